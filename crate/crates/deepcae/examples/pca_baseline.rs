//! The linear baseline every run is normalized against.
//!
//! Fits PCA at each embedding width on correlated Gaussian data and
//! prints the eigenvalue spectrum next to the train reconstruction
//! MSE. For PCA the two are the same thing: the MSE equals the mean
//! of the discarded eigenvalues, which this example verifies.
//!
//! Run with: cargo run --release --example pca_baseline

use deepcae::models::PcaBaseline;
use deepcae::synth;
use deepcae::tensor::rel_err_scalar;
use deepcae::Result;

fn main() -> Result<()> {
    let dim = 10;
    let x = synth::correlated_gaussian(21, 400, dim);

    let full = PcaBaseline::fit(&x, dim)?;
    println!("eigenvalue spectrum (descending):");
    for (i, ev) in full.eigenvalues().iter().enumerate() {
        println!("  component {i}: {ev:.5}");
    }
    println!();

    println!("{:<6} {:>14} {:>22} {:>10}", "width", "train MSE", "discarded mass / dim", "rel err");
    for m in 1..=dim {
        let pca = PcaBaseline::fit(&x, m)?;
        let mse = x.mse(&pca.reconstruct(&x)?)?;
        let discarded: f64 = pca.eigenvalues()[m..].iter().sum();
        let expected = discarded / dim as f64;
        println!(
            "{m:<6} {mse:>14.6} {expected:>22.6} {:>10.1e}",
            rel_err_scalar(mse, expected)
        );
    }
    println!();
    println!("Reconstruction error is exactly the variance PCA throws away,");
    println!("which is what makes it a stable normalizer across datasets.");
    Ok(())
}
