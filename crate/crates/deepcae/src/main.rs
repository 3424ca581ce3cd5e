fn main() {
    std::process::exit(deepcae::cli::run(std::env::args_os()));
}
