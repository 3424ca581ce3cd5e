//! End-to-end acceptance checks, one test per criterion. Each prints
//! a single PASS/FAIL line (visible with --nocapture or on failure)
//! and pins its tolerance explicitly.

use deepcae::eval::{self, ScoreRow, ScoreTable};
use deepcae::models::{AutoencoderModel, EncoderSpec, PcaBaseline, Variant};
use deepcae::penalty::{
    deepcae_penalty, single_layer_penalty_tanh, stacked_penalty,
};
use deepcae::synth;
use deepcae::tensor::{
    finite_diff_gradient, finite_diff_jacobian, rel_err_matrix, rel_err_scalar, Matrix,
};
use deepcae::train::{fit, successive_halving_search, SearchSpace, TrainConfig};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

type Check = std::result::Result<String, String>;

fn criterion(name: &str, body: impl FnOnce() -> Check) {
    match body() {
        Ok(detail) => println!("ACCEPTANCE {name}: PASS ({detail})"),
        Err(detail) => {
            println!("ACCEPTANCE {name}: FAIL ({detail})");
            panic!("acceptance criterion {name} failed: {detail}");
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

fn rows_of(x: &Matrix, from: usize, count: usize) -> Matrix {
    Matrix::from_fn(count, x.cols(), |i, j| x.get(from + i, j))
}

#[test]
fn jacobian_penalty_matches_finite_difference_oracle() {
    criterion("jacobian-oracle", || {
        let started = Instant::now();
        let mut max_err = 0.0f64;
        for case in 0..200u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(case);
            let d_x = rng.gen_range(2..=8usize);
            let k = (case % 4) as usize + 1;
            let spec = EncoderSpec::new(d_x, 0.5, k).map_err(|e| e.to_string())?;
            let model = AutoencoderModel::init(spec, Variant::DeepCae, 1.0, rng.gen())
                .map_err(|e| e.to_string())?;
            let x = Matrix::from_fn(1, d_x, |_, _| rng.gen_range(-0.9..0.9));

            let (_, trace) = model.encode(&x).map_err(|e| e.to_string())?;
            let analytic = deepcae_penalty(&trace, &model.encoder_weights())
                .map_err(|e| e.to_string())?
                .value();
            let encode_flat = |flat: &[f64]| {
                let input = Matrix::new(1, flat.len(), flat.to_vec())?;
                Ok(model.encode(&input)?.0.data().to_vec())
            };
            let jac =
                finite_diff_jacobian(encode_flat, x.data(), 1e-5).map_err(|e| e.to_string())?;
            max_err = max_err.max(rel_err_scalar(analytic, jac.frobenius_sq()));
        }
        let elapsed = started.elapsed().as_secs_f64();
        ensure!(
            max_err < 1e-5,
            "max rel err {max_err:.3e} is not below 1e-5"
        );
        ensure!(elapsed < 30.0, "took {elapsed:.1}s, budget is 30s");
        Ok(format!(
            "200 encoders, depths 1-4, max rel err {max_err:.3e} < 1e-5 in {elapsed:.1}s"
        ))
    });
}

#[test]
fn single_layer_closed_form_specialization() {
    criterion("single-layer-specialization", || {
        let mut max_gap = 0.0f64;
        for case in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + case);
            let d_x = rng.gen_range(2..=8usize);
            let spec = EncoderSpec::new(d_x, 0.5, 1).map_err(|e| e.to_string())?;
            let model = AutoencoderModel::init(spec, Variant::DeepCae, 1.0, rng.gen())
                .map_err(|e| e.to_string())?;
            let x = Matrix::from_fn(3, d_x, |_, _| rng.gen_range(-0.9..0.9));
            let (h, trace) = model.encode(&x).map_err(|e| e.to_string())?;
            let weights = model.encoder_weights();

            let deep = deepcae_penalty(&trace, &weights)
                .map_err(|e| e.to_string())?
                .value();
            let stacked = stacked_penalty(&trace, &weights)
                .map_err(|e| e.to_string())?
                .value();
            let closed = single_layer_penalty_tanh(&h, &weights[0])
                .map_err(|e| e.to_string())?
                .value();
            max_gap = max_gap
                .max(rel_err_scalar(deep, stacked))
                .max(rel_err_scalar(deep, closed));
        }
        ensure!(
            max_gap <= 1e-12,
            "max gap {max_gap:.3e} exceeds 1e-12"
        );
        Ok(format!(
            "100 cases, depth-1 penalty, per-layer sum, and closed form agree to {max_gap:.3e} <= 1e-12"
        ))
    });
}

#[test]
fn loss_gradients_match_finite_differences() {
    criterion("gradient-correctness", || {
        let mut max_err = 0.0f64;
        for case in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(2000 + case);
            let d_x = rng.gen_range(2..=5usize);
            let k = rng.gen_range(1..=2usize);
            let spec = EncoderSpec::new(d_x, 0.5, k).map_err(|e| e.to_string())?;
            let model = AutoencoderModel::init(spec, Variant::DeepCae, 0.3, rng.gen())
                .map_err(|e| e.to_string())?;
            let x = Matrix::from_fn(3, d_x, |_, _| rng.gen_range(-0.9..0.9));

            let mut tape = deepcae::tensor::Tape::new();
            let nodes = model.build_loss(&mut tape, &x).map_err(|e| e.to_string())?;
            let grads = tape.backward(nodes.total).map_err(|e| e.to_string())?;

            // Every parameter matrix of every layer, encoder and
            // decoder, weights and biases.
            let layer_count = model.encoder.len() + model.decoder.len();
            for layer_idx in 0..layer_count {
                for use_bias in [false, true] {
                    let node = if layer_idx < model.encoder.len() {
                        let (w, b) = nodes.encoder[layer_idx];
                        if use_bias {
                            b
                        } else {
                            w
                        }
                    } else {
                        let (w, b) = nodes.decoder[layer_idx - model.encoder.len()];
                        if use_bias {
                            b
                        } else {
                            w
                        }
                    };
                    let analytic = grads.wrt(node).clone();
                    let current = {
                        let layers: Vec<&deepcae::models::LayerParams> =
                            model.encoder.iter().chain(&model.decoder).collect();
                        let l = layers[layer_idx];
                        if use_bias {
                            l.b.clone()
                        } else {
                            l.w.clone()
                        }
                    };
                    let loss_of = |m: &Matrix| {
                        let mut perturbed = model.clone();
                        {
                            let mut layers: Vec<&mut deepcae::models::LayerParams> = perturbed
                                .encoder
                                .iter_mut()
                                .chain(perturbed.decoder.iter_mut())
                                .collect();
                            if use_bias {
                                layers[layer_idx].b = m.clone();
                            } else {
                                layers[layer_idx].w = m.clone();
                            }
                        }
                        Ok(perturbed.loss(&x)?.total)
                    };
                    let fd = finite_diff_gradient(loss_of, &current, 1e-4)
                        .map_err(|e| e.to_string())?;
                    max_err =
                        max_err.max(rel_err_matrix(&analytic, &fd).map_err(|e| e.to_string())?);
                }
            }
        }
        ensure!(max_err < 1e-4, "max rel err {max_err:.3e} is not below 1e-4");
        Ok(format!(
            "50 models, all parameters, max gradient rel err {max_err:.3e} < 1e-4"
        ))
    });
}

#[test]
fn lambda_zero_training_is_bitwise_standard() {
    criterion("lambda-zero-equivalence", || {
        let dim = 10;
        let x_all = synth::correlated_gaussian(3, 560, dim);
        let x_train = rows_of(&x_all, 0, 500);
        let x_val = rows_of(&x_all, 500, 60);

        let spec = EncoderSpec::new(dim, 0.5, 2).map_err(|e| e.to_string())?;
        let mut config = TrainConfig::new(1e-3, 0.0, 77);
        config.batch_size = 64;
        config.max_epochs = 25;

        let deep = AutoencoderModel::init(spec.clone(), Variant::DeepCae, 0.0, 77)
            .map_err(|e| e.to_string())?;
        let standard = AutoencoderModel::init(spec, Variant::Standard, 0.0, 77)
            .map_err(|e| e.to_string())?;
        let r_deep = fit(&deep, &x_train, &x_val, &config).map_err(|e| e.to_string())?;
        let r_std = fit(&standard, &x_train, &x_val, &config).map_err(|e| e.to_string())?;

        ensure!(
            r_deep.history.len() == r_std.history.len(),
            "history lengths differ: {} vs {}",
            r_deep.history.len(),
            r_std.history.len()
        );
        for (e, (a, b)) in r_deep.history.iter().zip(&r_std.history).enumerate() {
            ensure!(
                a.train_recon.to_bits() == b.train_recon.to_bits()
                    && a.val_recon.to_bits() == b.val_recon.to_bits(),
                "epoch {e} differs: {a:?} vs {b:?}"
            );
        }
        for (la, lb) in r_deep
            .model
            .encoder
            .iter()
            .chain(&r_deep.model.decoder)
            .zip(r_std.model.encoder.iter().chain(&r_std.model.decoder))
        {
            ensure!(
                la.w.data() == lb.w.data() && la.b.data() == lb.b.data(),
                "final parameters differ"
            );
        }
        Ok(format!(
            "500-row dataset, {} epochs, histories and final weights bitwise identical",
            r_deep.history.len()
        ))
    });
}

#[test]
fn contraction_strengthens_with_lambda() {
    criterion("contraction-monotonicity", || {
        let started = Instant::now();
        let dim = 12;
        let x_all = synth::correlated_gaussian(90, 480, dim);
        let x_train = rows_of(&x_all, 0, 240);
        let x_val = rows_of(&x_all, 240, 40);
        let x_test = rows_of(&x_all, 280, 200);

        let lambdas = [0.0, 0.01, 0.1, 1.0];
        let seeds = [0u64, 1, 2, 3, 4];
        let mut geomeans = Vec::new();
        for &lambda in &lambdas {
            let mut norms = Vec::new();
            for &seed in &seeds {
                let spec = EncoderSpec::new(dim, 0.5, 2).map_err(|e| e.to_string())?;
                let model = AutoencoderModel::init(spec, Variant::DeepCae, lambda, seed)
                    .map_err(|e| e.to_string())?;
                let mut config = TrainConfig::new(3e-3, lambda, seed);
                config.batch_size = 64;
                config.max_epochs = 60;
                let result = fit(&model, &x_train, &x_val, &config).map_err(|e| e.to_string())?;
                let (_, trace) = result.model.encode(&x_test).map_err(|e| e.to_string())?;
                norms.push(
                    deepcae_penalty(&trace, &result.model.encoder_weights())
                        .map_err(|e| e.to_string())?
                        .value(),
                );
            }
            geomeans.push(eval::geometric_mean(&norms).map_err(|e| e.to_string())?);
        }
        let elapsed = started.elapsed().as_secs_f64();
        for w in geomeans.windows(2) {
            ensure!(
                w[1] < w[0],
                "mean squared Jacobian norms not strictly decreasing: {geomeans:?}"
            );
        }
        ensure!(elapsed < 300.0, "took {elapsed:.1}s, budget is 300s");
        Ok(format!(
            "lambda 0 -> 1 shrinks the geomean test Jacobian norm {:.4} -> {:.4} -> {:.4} -> {:.4} in {elapsed:.1}s",
            geomeans[0], geomeans[1], geomeans[2], geomeans[3]
        ))
    });
}

/// Shared by the comparison and runtime criteria: train both
/// contractive variants with a matched protocol over the built-in
/// comparison suite and score them against a PCA baseline.
fn run_comparison() -> std::result::Result<ScoreTable, String> {
    let seeds = [0u64, 1, 2, 3, 4];
    let mut table = ScoreTable::new("pca");
    for dataset in synth::comparison_suite(7) {
        let n_train = dataset.train.rows();
        let n_val = n_train / 10;
        let x_train = rows_of(&dataset.train, 0, n_train - n_val);
        let x_val = rows_of(&dataset.train, n_train - n_val, n_val);
        let spec =
            EncoderSpec::new(dataset.train.cols(), 0.5, 2).map_err(|e| e.to_string())?;

        let pca = PcaBaseline::fit(&dataset.train, spec.embedding_dim())
            .map_err(|e| e.to_string())?;
        let baseline_mse = dataset
            .test
            .mse(&pca.reconstruct(&dataset.test).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;

        for variant in [Variant::DeepCae, Variant::StackedCae] {
            let mut base = TrainConfig::new(1e-3, 1e-4, 1005);
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
            )
            .map_err(|e| e.to_string())?;
            for &seed in &seeds {
                let model =
                    AutoencoderModel::init(spec.clone(), variant, outcome.best.lambda, seed)
                        .map_err(|e| e.to_string())?;
                let mut config = outcome.best.clone();
                config.seed = seed;
                config.max_epochs = 150;
                let result = fit(&model, &x_train, &x_val, &config).map_err(|e| e.to_string())?;
                let raw = dataset
                    .test
                    .mse(
                        &result
                            .model
                            .reconstruct(&dataset.test)
                            .map_err(|e| e.to_string())?,
                    )
                    .map_err(|e| e.to_string())?;
                table.push(ScoreRow {
                    dataset: dataset.name.clone(),
                    variant: variant.as_str().to_string(),
                    seed,
                    raw_mse: raw,
                    baseline_mse,
                    normalized_mse: eval::normalize(raw, baseline_mse)
                        .map_err(|e| e.to_string())?,
                    train_seconds: result.wall_time_seconds,
                    epochs: result.stopped_epoch,
                    downstream: None,
                });
            }
        }
    }
    Ok(table)
}

#[test]
fn full_jacobian_beats_per_layer_sum_on_suite() {
    criterion("deep-vs-stacked", || {
        let started = Instant::now();
        let table = run_comparison()?;
        let report = eval::deepcae_vs_stacked_report(&table).map_err(|e| e.to_string())?;
        let elapsed = started.elapsed().as_secs_f64();
        ensure!(
            report.cells.len() >= 15,
            "expected at least 15 cells, got {}",
            report.cells.len()
        );
        ensure!(
            report.deep_not_worse_fraction >= 0.6,
            "full-Jacobian variant not worse in only {:.0}% of cells (need >= 60%)",
            report.deep_not_worse_fraction * 100.0
        );
        ensure!(
            report.deep_geomean < report.stacked_geomean,
            "geomean {:.6} is not below {:.6}",
            report.deep_geomean,
            report.stacked_geomean
        );
        ensure!(elapsed < 1800.0, "took {elapsed:.1}s, budget is 1800s");
        Ok(format!(
            "3 datasets x 5 seeds, depth 2: not worse in {:.0}% of cells, geomeans {:.4} vs {:.4} in {elapsed:.1}s",
            report.deep_not_worse_fraction * 100.0,
            report.deep_geomean,
            report.stacked_geomean
        ))
    });
}

#[test]
fn pca_reconstruction_matches_discarded_eigenvalues() {
    criterion("pca-identity", || {
        let dim = 16;
        let x = synth::correlated_gaussian(11, 300, dim);
        let m = 7;
        let pca = PcaBaseline::fit(&x, m).map_err(|e| e.to_string())?;
        let mse = x
            .mse(&pca.reconstruct(&x).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let discarded: f64 = pca.eigenvalues()[m..].iter().sum();
        let expected = discarded / dim as f64;
        let rel = rel_err_scalar(mse, expected);
        ensure!(
            rel < 1e-8,
            "reconstruction MSE {mse:.6e} vs discarded-eigenvalue sum {expected:.6e}: rel err {rel:.3e}"
        );
        Ok(format!(
            "training MSE {mse:.6e} equals discarded eigenvalue mass {expected:.6e} (rel err {rel:.3e} < 1e-8)"
        ))
    });
}

#[test]
fn normalization_protocol_is_exact() {
    criterion("normalization-protocol", || {
        let mut table = ScoreTable::new("pca");
        for (i, &mse) in [0.013, 0.22, 1.7, 0.0004].iter().enumerate() {
            table.push(ScoreRow {
                dataset: format!("d{i}"),
                variant: "pca".into(),
                seed: 0,
                raw_mse: mse,
                baseline_mse: mse,
                normalized_mse: mse / mse,
                train_seconds: 0.01,
                epochs: 1,
                downstream: None,
            });
        }
        let agg = table.aggregate("pca", 5).map_err(|e| e.to_string())?;
        ensure!(
            agg.geometric_mean == 1.0,
            "baseline-vs-self geomean {} is not exactly 1.0",
            agg.geometric_mean
        );
        let sym = eval::geometric_mean(&[0.25, 4.0]).map_err(|e| e.to_string())?;
        ensure!(sym == 1.0, "geomean of {{0.25, 4.0}} is {sym}, not 1.0");
        Ok("baseline against itself aggregates to exactly 1.0; {0.25, 4.0} aggregates to 1.0".into())
    });
}

#[test]
fn downstream_protocol_identity_and_error_ordering() {
    criterion("downstream-protocol", || {
        // Identity case: embeddings are the raw features, so every
        // normalized metric must be 1 within 1e-10.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let label = |x: &Matrix, i: usize| {
            ((x.get(i, 0) > 0.0) as usize + (x.get(i, 1) > 0.0) as usize) as f64
        };
        let x_train = Matrix::from_fn(60, 5, |_, _| rng.gen_range(-1.0..1.0));
        let y_train: Vec<f64> = (0..60).map(|i| label(&x_train, i)).collect();
        let x_test = Matrix::from_fn(24, 5, |_, _| rng.gen_range(-1.0..1.0));
        let y_test: Vec<f64> = (0..24).map(|i| label(&x_test, i)).collect();
        let scores = eval::downstream_eval(
            &x_train,
            &x_test,
            &x_train,
            &x_test,
            &y_train,
            &y_test,
            eval::Task::Classification,
        )
        .map_err(|e| e.to_string())?;
        let eval::MetricSet::Classification(m) = scores.normalized else {
            return Err("expected classification metrics".into());
        };
        for (name, v) in [
            ("accuracy", m.accuracy),
            ("f1", m.f1),
            ("precision", m.precision),
            ("recall", m.recall),
        ] {
            ensure!(
                (v - 1.0).abs() <= 1e-10,
                "normalized {name} is {v}, not 1.0 within 1e-10"
            );
        }

        // Regression rows: RMSE >= MAE must hold on every report row.
        let mut checked = 0;
        for case in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + case);
            let x_train = Matrix::from_fn(40, 4, |_, _| rng.gen_range(-1.0..1.0));
            let y_train: Vec<f64> = (0..40)
                .map(|i| x_train.get(i, 0) - 0.5 * x_train.get(i, 2) + rng.gen_range(-0.3..0.3))
                .collect();
            let x_test = Matrix::from_fn(20, 4, |_, _| rng.gen_range(-1.0..1.0));
            let y_test: Vec<f64> = (0..20)
                .map(|i| x_test.get(i, 0) - 0.5 * x_test.get(i, 2) + rng.gen_range(-0.3..0.3))
                .collect();
            // A lossy "embedding": only the first two features.
            let e_train = Matrix::from_fn(40, 2, |i, j| x_train.get(i, j));
            let e_test = Matrix::from_fn(20, 2, |i, j| x_test.get(i, j));
            let scores = eval::downstream_eval(
                &e_train,
                &e_test,
                &x_train,
                &x_test,
                &y_train,
                &y_test,
                eval::Task::Regression,
            )
            .map_err(|e| e.to_string())?;
            for set in [scores.embedding, scores.raw] {
                let eval::MetricSet::Regression(r) = set else {
                    return Err("expected regression metrics".into());
                };
                ensure!(
                    r.rmse >= r.mae,
                    "RMSE {} fell below MAE {} on a report row",
                    r.rmse,
                    r.mae
                );
                checked += 1;
            }
        }
        Ok(format!(
            "identity embeddings normalize to 1.0 within 1e-10; RMSE >= MAE on all {checked} regression rows"
        ))
    });
}

#[test]
fn wide_input_runtime_accounting() {
    criterion("training-time-accounting", || {
        let dim = 64;
        let x_all = synth::correlated_gaussian(5, 200, dim);
        let x_train = rows_of(&x_all, 0, 160);
        let x_val = rows_of(&x_all, 160, 40);
        let mut table = ScoreTable::new("pca");
        let pca = PcaBaseline::fit(&x_train, 32).map_err(|e| e.to_string())?;
        let baseline = x_val
            .mse(&pca.reconstruct(&x_val).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;

        for variant in [Variant::DeepCae, Variant::StackedCae] {
            for seed in 0..3u64 {
                let spec = EncoderSpec::new(dim, 0.5, 2).map_err(|e| e.to_string())?;
                let model = AutoencoderModel::init(spec, variant, 1e-2, seed)
                    .map_err(|e| e.to_string())?;
                let mut config = TrainConfig::new(1e-3, 1e-2, seed);
                config.batch_size = 32;
                config.max_epochs = 3;
                config.early_stop_window = 100;
                let result = fit(&model, &x_train, &x_val, &config).map_err(|e| e.to_string())?;
                let raw = x_val
                    .mse(
                        &result
                            .model
                            .reconstruct(&x_val)
                            .map_err(|e| e.to_string())?,
                    )
                    .map_err(|e| e.to_string())?;
                table.push(ScoreRow {
                    dataset: "wide64".into(),
                    variant: variant.as_str().to_string(),
                    seed,
                    raw_mse: raw,
                    baseline_mse: baseline,
                    normalized_mse: raw / baseline,
                    train_seconds: result.wall_time_seconds,
                    epochs: result.stopped_epoch,
                    downstream: None,
                });
            }
        }
        let report = eval::deepcae_vs_stacked_report(&table).map_err(|e| e.to_string())?;
        ensure!(
            report.runtime.len() == 2,
            "runtime table has {} rows, expected 2",
            report.runtime.len()
        );
        let deep = report
            .runtime
            .iter()
            .find(|r| r.variant == Variant::DeepCae.as_str())
            .ok_or("missing deepcae runtime row")?;
        let stacked = report
            .runtime
            .iter()
            .find(|r| r.variant == Variant::StackedCae.as_str())
            .ok_or("missing stacked_cae runtime row")?;
        for row in &report.runtime {
            ensure!(
                row.mean_seconds.is_finite()
                    && row.median_seconds.is_finite()
                    && row.mean_seconds_per_epoch > 0.0,
                "runtime row {row:?} is not fully populated"
            );
        }
        ensure!(
            deep.mean_seconds_per_epoch > stacked.mean_seconds_per_epoch,
            "expected the full-Jacobian variant to cost more per epoch at 64 inputs: {:.4}s vs {:.4}s",
            deep.mean_seconds_per_epoch,
            stacked.mean_seconds_per_epoch
        );
        Ok(format!(
            "report carries mean/median wall-clock; per-epoch cost at 64 inputs: {:.4}s (full Jacobian) > {:.4}s (per-layer)",
            deep.mean_seconds_per_epoch, stacked.mean_seconds_per_epoch
        ))
    });
}
