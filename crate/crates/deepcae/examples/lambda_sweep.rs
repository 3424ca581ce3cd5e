//! Sweep the penalty weight and watch the trained encoder contract.
//!
//! Trains the full-Jacobian variant at several lambda values over a
//! handful of seeds on one synthetic dataset, then reports the mean
//! test-set squared Jacobian norm per lambda (geometric mean across
//! seeds). Larger lambda should buy a smaller Jacobian at some
//! reconstruction cost.
//!
//! Run with: cargo run --release --example lambda_sweep

use deepcae::eval::geometric_mean;
use deepcae::models::{AutoencoderModel, EncoderSpec, Variant};
use deepcae::penalty::deepcae_penalty;
use deepcae::synth;
use deepcae::tensor::Matrix;
use deepcae::train::{fit, TrainConfig};
use deepcae::Result;

fn mean_test_jacobian(model: &AutoencoderModel, x_test: &Matrix) -> Result<f64> {
    let (_, trace) = model.encode(x_test)?;
    Ok(deepcae_penalty(&trace, &model.encoder_weights())?.value())
}

fn main() -> Result<()> {
    let dim = 12;
    let x_all = synth::correlated_gaussian(90, 480, dim);
    let x_train = Matrix::from_fn(240, dim, |i, j| x_all.get(i, j));
    let x_val = Matrix::from_fn(40, dim, |i, j| x_all.get(240 + i, j));
    let x_test = Matrix::from_fn(200, dim, |i, j| x_all.get(280 + i, j));

    let lambdas = [0.0, 0.01, 0.1, 1.0];
    let seeds = [0u64, 1, 2, 3, 4];
    let started = std::time::Instant::now();

    println!(
        "{:>8} {:>14} {:>14} {:>10}",
        "lambda", "mean ||J||^2_F", "test recon MSE", "epochs"
    );
    let mut norms_by_lambda = Vec::new();
    for &lambda in &lambdas {
        let mut norms = Vec::new();
        let mut recons = Vec::new();
        let mut epochs = Vec::new();
        for &seed in &seeds {
            let spec = EncoderSpec::new(dim, 0.5, 2)?;
            let model = AutoencoderModel::init(spec, Variant::DeepCae, lambda, seed)?;
            let mut config = TrainConfig::new(3e-3, lambda, seed);
            config.batch_size = 64;
            config.max_epochs = 60;
            let result = fit(&model, &x_train, &x_val, &config)?;
            norms.push(mean_test_jacobian(&result.model, &x_test)?);
            recons.push(x_test.mse(&result.model.reconstruct(&x_test)?)?);
            epochs.push(result.stopped_epoch);
        }
        let norm_gm = geometric_mean(&norms)?;
        let recon_mean = recons.iter().sum::<f64>() / recons.len() as f64;
        let epoch_mean = epochs.iter().sum::<usize>() / epochs.len();
        println!("{lambda:>8} {norm_gm:>14.6} {recon_mean:>14.6} {epoch_mean:>10}");
        norms_by_lambda.push(norm_gm);
    }

    let monotone = norms_by_lambda.windows(2).all(|w| w[1] < w[0]);
    println!(
        "\nstrictly decreasing across lambdas: {monotone} ({:.1}s total)",
        started.elapsed().as_secs_f64()
    );
    Ok(())
}
