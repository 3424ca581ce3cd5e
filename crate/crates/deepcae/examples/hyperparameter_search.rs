//! Successive-halving search over learning rate and penalty weight.
//!
//! Every (learning rate, lambda) pair in the grid trains briefly;
//! the top third survives to the next rung with triple the epoch
//! budget, retrained from scratch. The example prints the per-rung
//! leaderboard and then retrains the winner to convergence.
//!
//! Run with: cargo run --release --example hyperparameter_search

use deepcae::models::{AutoencoderModel, EncoderSpec, Variant};
use deepcae::synth;
use deepcae::tensor::Matrix;
use deepcae::train::{fit, successive_halving_search, SearchSpace, TrainConfig};
use deepcae::Result;

fn main() -> Result<()> {
    let data = synth::curved_manifold(13, 220, 200, 12, 3);
    let n_val = data.train.rows() / 5;
    let n_fit = data.train.rows() - n_val;
    let x_train = Matrix::from_fn(n_fit, data.train.cols(), |i, j| data.train.get(i, j));
    let x_val = Matrix::from_fn(n_val, data.train.cols(), |i, j| data.train.get(n_fit + i, j));

    let spec = EncoderSpec::new(data.train.cols(), 0.5, 2)?;
    let space = SearchSpace::default();
    println!(
        "searching {} learning rates x {} lambdas for the full-Jacobian variant",
        space.learning_rates.len(),
        space.lambdas.len()
    );

    let mut base = TrainConfig::new(1e-3, 1e-4, 501);
    base.batch_size = 32;
    let outcome =
        successive_halving_search(&spec, Variant::DeepCae, &x_train, &x_val, &space, 3, 6, &base)?;

    let max_rung = outcome.evaluations.iter().map(|e| e.rung).max().unwrap_or(0);
    for rung in 0..=max_rung {
        println!("rung {rung}:");
        for eval in outcome.evaluations.iter().filter(|e| e.rung == rung) {
            match (&eval.val_recon, &eval.error) {
                (Some(v), _) => println!(
                    "  lr {:>7.0e} lambda {:>7.0e} ({:>3} epochs): val recon {v:.6}",
                    eval.learning_rate, eval.lambda, eval.epochs_budget
                ),
                (None, Some(err)) => println!(
                    "  lr {:>7.0e} lambda {:>7.0e} ({:>3} epochs): dropped ({err})",
                    eval.learning_rate, eval.lambda, eval.epochs_budget
                ),
                (None, None) => unreachable!("an evaluation either scores or errors"),
            }
        }
    }
    println!(
        "winner: lr {:.0e}, lambda {:.0e}",
        outcome.best.learning_rate, outcome.best.lambda
    );

    let model = AutoencoderModel::init(spec, Variant::DeepCae, outcome.best.lambda, 0)?;
    let mut config = outcome.best.clone();
    config.seed = 0;
    config.max_epochs = 200;
    let result = fit(&model, &x_train, &x_val, &config)?;
    let test_mse = data.test.mse(&result.model.reconstruct(&data.test)?)?;
    println!(
        "retrained winner: {} epochs, val recon {:.6}, test MSE {:.6}",
        result.stopped_epoch, result.best_val_recon, test_mse
    );
    Ok(())
}
