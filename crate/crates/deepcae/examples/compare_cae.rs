//! Head-to-head: full-Jacobian penalty versus per-layer-sum penalty.
//!
//! For each synthetic dataset, both variants get the same validation
//! -driven hyperparameter search under an identical budget, then five
//! seeded final trainings each. Scores are test reconstruction MSE
//! normalized by a linear PCA baseline fitted on the same split, and
//! the summary is the geometric mean across all (dataset, seed)
//! cells.
//!
//! Run with: cargo run --release --example compare_cae

use deepcae::eval::{self, ScoreRow, ScoreTable};
use deepcae::models::{AutoencoderModel, EncoderSpec, PcaBaseline, Variant};
use deepcae::synth;
use deepcae::tensor::Matrix;
use deepcae::train::{fit, successive_halving_search, SearchSpace, TrainConfig};
use deepcae::Result;

fn rows_of(x: &Matrix, from: usize, count: usize) -> Matrix {
    Matrix::from_fn(count, x.cols(), |i, j| x.get(from + i, j))
}

fn main() -> Result<()> {
    let seeds = [0u64, 1, 2, 3, 4];
    let started = std::time::Instant::now();
    let mut table = ScoreTable::new("pca");

    for dataset in synth::comparison_suite(7) {
        let n_train = dataset.train.rows();
        let n_val = n_train / 10;
        let x_train = rows_of(&dataset.train, 0, n_train - n_val);
        let x_val = rows_of(&dataset.train, n_train - n_val, n_val);
        let spec = EncoderSpec::new(dataset.train.cols(), 0.5, 2)?;

        let pca = PcaBaseline::fit(&dataset.train, spec.embedding_dim())?;
        let baseline_mse = dataset.test.mse(&pca.reconstruct(&dataset.test)?)?;
        eprintln!(
            "{}: {} features, baseline MSE {baseline_mse:.6e}",
            dataset.name,
            dataset.train.cols()
        );

        for variant in [Variant::DeepCae, Variant::StackedCae] {
            let mut base = TrainConfig::new(1e-3, 1e-4, 1000 + seeds.len() as u64);
            base.batch_size = 32;
            let outcome = successive_halving_search(
                &spec,
                variant,
                &x_train,
                &x_val,
                &SearchSpace::default(),
                2,
                12,
                &base,
            )?;
            eprintln!(
                "{} {}: picked lr {:.1e}, lambda {:.1e}",
                dataset.name,
                variant,
                outcome.best.learning_rate,
                outcome.best.lambda
            );
            for &seed in &seeds {
                let model =
                    AutoencoderModel::init(spec.clone(), variant, outcome.best.lambda, seed)?;
                let mut config = outcome.best.clone();
                config.seed = seed;
                config.max_epochs = 150;
                let result = fit(&model, &x_train, &x_val, &config)?;
                let raw = dataset.test.mse(&result.model.reconstruct(&dataset.test)?)?;
                table.push(ScoreRow {
                    dataset: dataset.name.clone(),
                    variant: variant.as_str().to_string(),
                    seed,
                    raw_mse: raw,
                    baseline_mse,
                    normalized_mse: eval::normalize(raw, baseline_mse)?,
                    train_seconds: result.wall_time_seconds,
                    epochs: result.stopped_epoch,
                    downstream: None,
                });
            }
        }
    }

    let report = eval::deepcae_vs_stacked_report(&table)?;
    println!(
        "{:<18} {:>6} {:>14} {:>14}",
        "dataset", "seed", "deep", "stacked"
    );
    for cell in &report.cells {
        println!(
            "{:<18} {:>6} {:>14.6} {:>14.6}{}",
            cell.dataset,
            cell.seed,
            cell.deep_normalized,
            cell.stacked_normalized,
            if cell.deep_normalized <= cell.stacked_normalized {
                "  <= "
            } else {
                ""
            }
        );
    }
    println!(
        "\nfull-Jacobian not worse in {:.0}% of cells; geomeans {:.4} vs {:.4} \
         (ratio {:.4}); total {:.1}s",
        report.deep_not_worse_fraction * 100.0,
        report.deep_geomean,
        report.stacked_geomean,
        report.geomean_ratio,
        started.elapsed().as_secs_f64()
    );
    for row in &report.runtime {
        println!(
            "{}: mean {:.2}s, median {:.2}s, {:.4}s/epoch",
            row.variant, row.mean_seconds, row.median_seconds, row.mean_seconds_per_epoch
        );
    }
    Ok(())
}
