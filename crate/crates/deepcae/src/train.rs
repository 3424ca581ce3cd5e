//! Mini-batch training with Adam, early stopping on validation
//! reconstruction, and a synchronous successive-halving search over
//! learning rate and penalty weight.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{AutoencoderModel, EncoderSpec, Variant};
use crate::tensor::{Matrix, Tape};

/// Hyperparameters for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Trailing epoch window inspected by the early-stopping rule.
    pub early_stop_window: usize,
    /// Minimum relative improvement of the best validation
    /// reconstruction over the window; less than this stops training.
    pub early_stop_min_progress: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults: batch 128, up to 1000 epochs, stop when the best
    /// validation reconstruction improved by less than 0.2% over the
    /// last 30 epochs.
    pub fn new(learning_rate: f64, lambda: f64, seed: u64) -> Self {
        Self {
            learning_rate,
            lambda,
            batch_size: 128,
            max_epochs: 1000,
            early_stop_window: 30,
            early_stop_min_progress: 0.002,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be finite and nonnegative, got {}",
                self.learning_rate
            )));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be finite and nonnegative, got {}",
                self.lambda
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.early_stop_window == 0 {
            return Err(Error::Config("early_stop_window must be at least 1".into()));
        }
        if !self.early_stop_min_progress.is_finite() || self.early_stop_min_progress < 0.0 {
            return Err(Error::Config(format!(
                "early_stop_min_progress must be finite and nonnegative, got {}",
                self.early_stop_min_progress
            )));
        }
        Ok(())
    }
}

/// Loss readings for one epoch. Training values are the batch-size
/// weighted means of the losses as seen during the epoch's updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_recon: f64,
    pub train_penalty: f64,
    pub val_recon: f64,
}

/// Outcome of [`fit`]: the best-validation snapshot plus the full
/// epoch history.
#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: AutoencoderModel,
    pub history: Vec<EpochStats>,
    pub stopped_epoch: usize,
    /// 1-based epoch whose validation reconstruction was lowest.
    pub best_epoch: usize,
    pub best_val_recon: f64,
    pub wall_time_seconds: f64,
    /// Sanity flag: total training loss at the final epoch was below
    /// the first epoch's. Reported, never enforced.
    pub train_loss_decreased: bool,
}

struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            t: 0,
        }
    }

    /// One update over all parameters; `grads` is positionally
    /// aligned with the state and `params`.
    fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = param.data_mut();
            let gd = grad.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                md[i] = Self::BETA1 * md[i] + (1.0 - Self::BETA1) * gd[i];
                vd[i] = Self::BETA2 * vd[i] + (1.0 - Self::BETA2) * gd[i] * gd[i];
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + Self::EPS);
            }
        }
    }
}

fn gather_rows(x: &Matrix, indices: &[usize]) -> Matrix {
    Matrix::from_fn(indices.len(), x.cols(), |i, j| x.get(indices[i], j))
}

fn validation_recon(model: &AutoencoderModel, x_val: &Matrix) -> Result<f64> {
    let recon = model.reconstruct(x_val)?;
    x_val.mse(&recon)
}

/// Train `model` on `x_train`, stopping early when the best
/// validation reconstruction stalls. Returns the parameters from the
/// best-validation epoch, not the last one.
///
/// The run is a pure function of (model, data, config): shuffling
/// comes from the config seed and every numeric step is sequential
/// f64 arithmetic.
pub fn fit(
    model: &AutoencoderModel,
    x_train: &Matrix,
    x_val: &Matrix,
    config: &TrainConfig,
) -> Result<TrainResult> {
    config.validate()?;
    if x_train.cols() != model.input_dim() || x_val.cols() != model.input_dim() {
        return Err(Error::Shape {
            op: "fit",
            left: format!("{}x{}", x_train.rows(), x_train.cols()),
            right: format!("input_dim {}", model.input_dim()),
        });
    }

    let start = Instant::now();
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let shapes: Vec<(usize, usize)> = model
        .encoder
        .iter()
        .chain(&model.decoder)
        .flat_map(|l| [l.w.shape(), l.b.shape()])
        .collect();
    let mut adam = Adam::new(&shapes);

    let mut history: Vec<EpochStats> = Vec::new();
    let mut indices: Vec<usize> = (0..x_train.rows()).collect();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_model = model.clone();
    let mut first_total = f64::NAN;
    let mut last_total = f64::NAN;

    for epoch in 1..=config.max_epochs {
        indices.shuffle(&mut rng);
        let mut recon_sum = 0.0;
        let mut penalty_sum = 0.0;
        let mut total_sum = 0.0;
        let mut seen = 0usize;

        for batch_indices in indices.chunks(config.batch_size) {
            let batch = gather_rows(x_train, batch_indices);
            let mut tape = Tape::new();
            let nodes = model.build_loss(&mut tape, &batch)?;
            let total = tape.value(nodes.total).scalar();
            if !total.is_finite() {
                let penalty_magnitude = nodes
                    .penalty
                    .map(|p| model.effective_lambda() * tape.value(p).scalar())
                    .unwrap_or(0.0);
                return Err(Error::Diverged {
                    epoch,
                    penalty_magnitude,
                });
            }
            let recon = tape.value(nodes.recon).scalar();
            let penalty = nodes.penalty.map(|p| tape.value(p).scalar()).unwrap_or(0.0);
            let weight = batch_indices.len() as f64;
            recon_sum += recon * weight;
            penalty_sum += penalty * weight;
            total_sum += total * weight;
            seen += batch_indices.len();

            let grads = tape.backward(nodes.total)?;
            let param_refs = nodes.param_refs();
            let grad_mats: Vec<&Matrix> = param_refs.iter().map(|r| grads.wrt(*r)).collect();
            let mut params: Vec<&mut Matrix> = Vec::with_capacity(param_refs.len());
            for layer in model.encoder.iter_mut().chain(model.decoder.iter_mut()) {
                params.push(&mut layer.w);
                params.push(&mut layer.b);
            }
            adam.step(&mut params, &grad_mats, config.learning_rate);
        }

        let n = seen as f64;
        let epoch_total = total_sum / n;
        if epoch == 1 {
            first_total = epoch_total;
        }
        last_total = epoch_total;

        let val_recon = validation_recon(&model, x_val)?;
        if !val_recon.is_finite() {
            return Err(Error::Diverged {
                epoch,
                penalty_magnitude: penalty_sum / n * model.effective_lambda(),
            });
        }
        history.push(EpochStats {
            train_recon: recon_sum / n,
            train_penalty: penalty_sum / n,
            val_recon,
        });
        if val_recon < best_val {
            best_val = val_recon;
            best_epoch = epoch;
            best_model = model.clone();
        }

        // Stop when the best seen so far is no longer meaningfully
        // better than the best from `window` epochs back.
        if epoch > config.early_stop_window {
            let window_start = epoch - config.early_stop_window;
            let prev_best = history[..window_start]
                .iter()
                .map(|h| h.val_recon)
                .fold(f64::INFINITY, f64::min);
            let progress = if prev_best > 0.0 {
                (prev_best - best_val) / prev_best
            } else {
                0.0
            };
            if progress < config.early_stop_min_progress {
                break;
            }
        }
    }

    let stopped_epoch = history.len();
    Ok(TrainResult {
        model: best_model,
        history,
        stopped_epoch,
        best_epoch,
        best_val_recon: best_val,
        wall_time_seconds: start.elapsed().as_secs_f64(),
        train_loss_decreased: last_total < first_total,
    })
}

/// Grid of learning rates and penalty weights explored by the search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub learning_rates: Vec<f64>,
    pub lambdas: Vec<f64>,
}

impl Default for SearchSpace {
    /// Learning rates bracketing the low-1e-4 regime that deep
    /// contractive training favours, and lambdas from the floor up to
    /// strongly regularized.
    fn default() -> Self {
        Self {
            learning_rates: vec![1e-4, 3e-4, 1e-3, 3e-3],
            lambdas: vec![1e-8, 1e-4, 1e-2, 1e-1],
        }
    }
}

/// One (config, rung) training record from the search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchEvaluation {
    pub config_index: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub rung: usize,
    pub epochs_budget: usize,
    /// Best validation reconstruction, absent when the run diverged.
    pub val_recon: Option<f64>,
    pub error: Option<String>,
}

/// Search outcome: the winning configuration plus the full log.
#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best: TrainConfig,
    pub evaluations: Vec<SearchEvaluation>,
}

/// Synchronous successive halving with eta = 3.
///
/// Every surviving configuration is retrained from scratch each rung
/// with three times the previous epoch budget; the top third (at
/// least one) survives, ranked by best validation reconstruction with
/// deterministic tie-breaking by lower lambda, then lower learning
/// rate, then grid order. Lambdas are floored per variant at this
/// boundary. Diverged configurations drop out; if every configuration
/// diverges the search fails listing each failure.
#[allow(clippy::too_many_arguments)]
pub fn successive_halving_search(
    spec: &EncoderSpec,
    variant: Variant,
    x_train: &Matrix,
    x_val: &Matrix,
    space: &SearchSpace,
    rungs: usize,
    budget_per_rung: usize,
    base: &TrainConfig,
) -> Result<SearchOutcome> {
    const ETA: usize = 3;
    if space.learning_rates.is_empty() || space.lambdas.is_empty() {
        return Err(Error::Config("search space must be non-empty".into()));
    }
    if rungs == 0 || budget_per_rung == 0 {
        return Err(Error::Config(
            "search needs at least one rung and one epoch per rung".into(),
        ));
    }

    let mut configs: Vec<(usize, f64, f64)> = Vec::new();
    for &lr in &space.learning_rates {
        for &lambda in &space.lambdas {
            configs.push((configs.len(), lr, variant.floor_lambda(lambda)));
        }
    }

    let mut evaluations = Vec::new();
    let mut survivors = configs;
    let mut ranked: Vec<(f64, f64, f64, usize)> = Vec::new();

    for rung in 0..rungs {
        let budget = budget_per_rung * ETA.pow(rung as u32);
        let mut failures = Vec::new();
        ranked.clear();

        for &(index, lr, lambda) in &survivors {
            let mut config = base.clone();
            config.learning_rate = lr;
            config.lambda = lambda;
            config.max_epochs = budget;
            let model = AutoencoderModel::init(spec.clone(), variant, lambda, config.seed)?;
            match fit(&model, x_train, x_val, &config) {
                Ok(result) => {
                    evaluations.push(SearchEvaluation {
                        config_index: index,
                        learning_rate: lr,
                        lambda,
                        rung,
                        epochs_budget: budget,
                        val_recon: Some(result.best_val_recon),
                        error: None,
                    });
                    ranked.push((result.best_val_recon, lambda, lr, index));
                }
                Err(err) => {
                    failures.push(format!("lr={lr} lambda={lambda}: {err}"));
                    evaluations.push(SearchEvaluation {
                        config_index: index,
                        learning_rate: lr,
                        lambda,
                        rung,
                        epochs_budget: budget,
                        val_recon: None,
                        error: Some(err.to_string()),
                    });
                }
            }
        }

        if ranked.is_empty() {
            return Err(Error::NonFinite(format!(
                "every configuration diverged during the search: {}",
                failures.join("; ")
            )));
        }
        ranked.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
        let keep = (ranked.len() / ETA).max(1);
        survivors = ranked
            .iter()
            .take(keep)
            .map(|&(_, lambda, lr, index)| (index, lr, lambda))
            .collect();
    }

    let (_, lambda, lr, _) = ranked[0];
    let mut best = base.clone();
    best.learning_rate = lr;
    best.lambda = lambda;
    Ok(SearchOutcome { best, evaluations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn small_spec(d: usize) -> EncoderSpec {
        EncoderSpec::new(d, 0.5, 1).unwrap()
    }

    fn toy_split(seed: u64, d: usize) -> (Matrix, Matrix) {
        let data = synth::correlated_gaussian(seed, 96, d);
        let train = Matrix::from_fn(80, d, |i, j| data.get(i, j));
        let val = Matrix::from_fn(16, d, |i, j| data.get(80 + i, j));
        (train, val)
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let (train, val) = toy_split(1, 6);
        let model = AutoencoderModel::init(small_spec(6), Variant::DeepCae, 0.01, 2).unwrap();
        let mut config = TrainConfig::new(0.0, 0.01, 3);
        config.max_epochs = 3;
        config.batch_size = 32;
        let result = fit(&model, &train, &val, &config).unwrap();
        assert_eq!(result.model, model);
        assert_eq!(result.stopped_epoch, 3);
    }

    #[test]
    fn training_is_deterministic() {
        let (train, val) = toy_split(2, 6);
        let model = AutoencoderModel::init(small_spec(6), Variant::StackedCae, 0.01, 5).unwrap();
        let mut config = TrainConfig::new(1e-3, 0.01, 7);
        config.max_epochs = 8;
        config.batch_size = 16;
        let a = fit(&model, &train, &val, &config).unwrap();
        let b = fit(&model, &train, &val, &config).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn constant_dataset_converges_and_stops_early() {
        let train = synth::constant_rows(48, 5, 0.3);
        let val = synth::constant_rows(8, 5, 0.3);
        let model = AutoencoderModel::init(small_spec(5), Variant::Standard, 0.0, 3).unwrap();
        let mut config = TrainConfig::new(1e-2, 0.0, 4);
        config.max_epochs = 3000;
        config.batch_size = 48;
        let result = fit(&model, &train, &val, &config).unwrap();
        assert!(result.stopped_epoch < 3000, "ran {} epochs", result.stopped_epoch);
        assert!(result.best_val_recon < 1e-6, "{}", result.best_val_recon);
        assert!(result.train_loss_decreased);
    }

    #[test]
    fn lambda_zero_training_is_variant_blind() {
        let (train, val) = toy_split(3, 6);
        let spec = small_spec(6);
        let mut config = TrainConfig::new(1e-3, 0.0, 11);
        config.max_epochs = 6;
        config.batch_size = 16;

        let mut results = Vec::new();
        for variant in Variant::ALL {
            let model = AutoencoderModel::init(spec.clone(), variant, 0.0, 13).unwrap();
            results.push(fit(&model, &train, &val, &config).unwrap());
        }
        assert_eq!(results[0].history, results[1].history);
        assert_eq!(results[0].history, results[2].history);
        assert_eq!(results[0].model.encoder, results[1].model.encoder);
        assert_eq!(results[0].model.encoder, results[2].model.encoder);
    }

    #[test]
    fn best_val_is_history_minimum_and_history_matches_stop() {
        let (train, val) = toy_split(4, 8);
        let model = AutoencoderModel::init(small_spec(8), Variant::DeepCae, 1e-4, 2).unwrap();
        let mut config = TrainConfig::new(3e-3, 1e-4, 9);
        config.max_epochs = 40;
        config.batch_size = 16;
        let result = fit(&model, &train, &val, &config).unwrap();
        assert_eq!(result.history.len(), result.stopped_epoch);
        let min = result
            .history
            .iter()
            .map(|h| h.val_recon)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(result.best_val_recon, min);
        assert_eq!(
            result.history[result.best_epoch - 1].val_recon,
            result.best_val_recon
        );
    }

    #[test]
    fn training_improves_reconstruction() {
        let data = synth::blobs(6, 120, 60, 8, 3);
        let model = AutoencoderModel::init(small_spec(8), Variant::Standard, 0.0, 4).unwrap();
        let before = validation_recon(&model, &data.test).unwrap();
        let mut config = TrainConfig::new(3e-3, 0.0, 5);
        config.max_epochs = 200;
        config.batch_size = 32;
        let result = fit(&model, &data.train, &data.test, &config).unwrap();
        let after = validation_recon(&result.model, &data.test).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn exploding_weights_report_divergence() {
        let (train, val) = toy_split(5, 4);
        let mut model = AutoencoderModel::init(small_spec(4), Variant::DeepCae, 0.1, 6).unwrap();
        // Saturated activations zero the derivative factor while the
        // squared weights overflow, so the penalty turns into NaN.
        model.encoder[0].w = Matrix::filled(2, 4, 1e200);
        let config = TrainConfig::new(1e-3, 0.1, 7);
        let err = fit(&model, &train, &val, &config).unwrap_err();
        match err {
            Error::Diverged { epoch, .. } => assert_eq!(epoch, 1),
            other => panic!("expected divergence, got {other}"),
        }
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn single_config_space_returns_it() {
        let (train, val) = toy_split(6, 5);
        let space = SearchSpace {
            learning_rates: vec![1e-3],
            lambdas: vec![1e-2],
        };
        let mut base = TrainConfig::new(0.0, 0.0, 21);
        base.batch_size = 32;
        let outcome = successive_halving_search(
            &small_spec(5),
            Variant::DeepCae,
            &train,
            &val,
            &space,
            1,
            3,
            &base,
        )
        .unwrap();
        assert_eq!(outcome.best.learning_rate, 1e-3);
        assert_eq!(outcome.best.lambda, 1e-2);
        assert_eq!(outcome.evaluations.len(), 1);
    }

    #[test]
    fn halving_schedule_nine_to_three_to_one() {
        let (train, val) = toy_split(7, 5);
        let space = SearchSpace {
            learning_rates: vec![1e-4, 1e-3, 3e-3],
            lambdas: vec![1e-8, 1e-4, 1e-2],
        };
        let mut base = TrainConfig::new(0.0, 0.0, 22);
        base.batch_size = 32;
        let outcome = successive_halving_search(
            &small_spec(5),
            Variant::StackedCae,
            &train,
            &val,
            &space,
            2,
            2,
            &base,
        )
        .unwrap();
        let rung0 = outcome.evaluations.iter().filter(|e| e.rung == 0).count();
        let rung1 = outcome.evaluations.iter().filter(|e| e.rung == 1).count();
        assert_eq!((rung0, rung1), (9, 3));
        // Second rung trains three times as long.
        assert!(outcome
            .evaluations
            .iter()
            .all(|e| e.epochs_budget == if e.rung == 0 { 2 } else { 6 }));
    }

    #[test]
    fn zero_learning_rate_never_wins() {
        let (train, val) = toy_split(8, 5);
        let space = SearchSpace {
            learning_rates: vec![0.0, 3e-3],
            lambdas: vec![1e-8],
        };
        let mut base = TrainConfig::new(0.0, 0.0, 23);
        base.batch_size = 32;
        let outcome = successive_halving_search(
            &small_spec(5),
            Variant::DeepCae,
            &train,
            &val,
            &space,
            1,
            15,
            &base,
        )
        .unwrap();
        assert_eq!(outcome.best.learning_rate, 3e-3);
    }

    #[test]
    fn search_floors_lambda_for_contractive_variants() {
        let (train, val) = toy_split(9, 5);
        let space = SearchSpace {
            learning_rates: vec![1e-3],
            lambdas: vec![0.0],
        };
        let mut base = TrainConfig::new(0.0, 0.0, 24);
        base.batch_size = 32;
        let outcome = successive_halving_search(
            &small_spec(5),
            Variant::DeepCae,
            &train,
            &val,
            &space,
            1,
            2,
            &base,
        )
        .unwrap();
        assert_eq!(outcome.best.lambda, crate::models::LAMBDA_FLOOR);
    }

    #[test]
    fn rejects_invalid_configs() {
        let mut c = TrainConfig::new(1e-3, 0.0, 1);
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::new(-1.0, 0.0, 1);
        assert!(c.validate().is_err());
        c = TrainConfig::new(1e-3, -0.5, 1);
        assert!(c.validate().is_err());
        let mut c = TrainConfig::new(1e-3, 0.0, 1);
        c.early_stop_window = 0;
        assert!(c.validate().is_err());
    }
}
