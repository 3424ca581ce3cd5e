//! Evaluation protocol: test-set reconstruction error, baseline
//! normalization with geometric-mean aggregation and bootstrap
//! confidence intervals, and downstream prediction from frozen
//! embeddings.
//!
//! Cross-dataset comparisons never average raw errors. Every score
//! is first divided by the baseline's score on the same dataset and
//! split, which removes dataset difficulty, and the normalized
//! ratios are combined by geometric mean so that halving and
//! doubling cancel.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// On-disk report container version.
pub const REPORT_FORMAT_VERSION: u32 = 1;

/// Bootstrap resamples drawn when estimating confidence intervals.
pub const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Test-set reconstruction error for any round-trip function
/// (autoencoder reconstruct, PCA project-and-lift, ...).
pub fn reconstruction_score<F>(round_trip: F, x_test: &Matrix) -> Result<f64>
where
    F: Fn(&Matrix) -> Result<Matrix>,
{
    let recon = round_trip(x_test)?;
    let mse = x_test.mse(&recon)?;
    if !mse.is_finite() {
        return Err(Error::NonFinite(format!(
            "reconstruction MSE is {mse}"
        )));
    }
    Ok(mse)
}

/// Divide a raw score by the baseline score for the same dataset.
pub fn normalize(raw: f64, baseline: f64) -> Result<f64> {
    if !(baseline.is_finite() && baseline > 0.0) {
        return Err(Error::InvalidInput(format!(
            "baseline score must be positive and finite, got {baseline}"
        )));
    }
    if !raw.is_finite() {
        return Err(Error::NonFinite(format!("raw score is {raw}")));
    }
    Ok(raw / baseline)
}

/// exp of the mean of logs; defined only for positive values.
pub fn geometric_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput(
            "geometric mean of an empty set".into(),
        ));
    }
    let mut log_sum = 0.0;
    for &v in values {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::InvalidInput(format!(
                "geometric mean needs positive finite values, got {v}"
            )));
        }
        log_sum += v.ln();
    }
    Ok((log_sum / values.len() as f64).exp())
}

/// Percentile bootstrap confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
}

/// Geometric-mean summary of a set of normalized scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub geometric_mean: f64,
    /// 95% percentile bootstrap interval over the score set.
    pub ci95: ConfidenceInterval,
    pub count: usize,
}

/// Geometric mean of normalized scores with a seeded 95% bootstrap
/// interval (resampling the scores with replacement).
pub fn aggregate_normalized(values: &[f64], seed: u64) -> Result<Aggregate> {
    let point = geometric_mean(values)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    let mut sample = vec![0.0; values.len()];
    for _ in 0..BOOTSTRAP_RESAMPLES {
        for slot in sample.iter_mut() {
            *slot = values[rng.gen_range(0..values.len())];
        }
        means.push(geometric_mean(&sample)?);
    }
    means.sort_by(|a, b| a.partial_cmp(b).expect("finite means"));
    let lo_idx = (BOOTSTRAP_RESAMPLES as f64 * 0.025) as usize;
    let hi_idx = (BOOTSTRAP_RESAMPLES as f64 * 0.975) as usize - 1;
    Ok(Aggregate {
        geometric_mean: point,
        ci95: ConfidenceInterval {
            lower: means[lo_idx],
            upper: means[hi_idx],
        },
        count: values.len(),
    })
}

/// Downstream prediction task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Regression,
}

/// Support-weighted classification metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub mae: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum MetricSet {
    Classification(ClassificationMetrics),
    Regression(RegressionMetrics),
}

/// Downstream results for one embedding: the predictor trained on
/// the embedding, the identical predictor trained on the raw
/// preprocessed features, and their elementwise ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DownstreamScores {
    pub embedding: MetricSet,
    pub raw: MetricSet,
    /// embedding metric / raw metric, componentwise.
    pub normalized: MetricSet,
}

fn ratio(a: f64, b: f64) -> Result<f64> {
    if b == 0.0 {
        return Err(Error::InvalidInput(
            "raw-feature predictor scored exactly zero; ratio undefined".into(),
        ));
    }
    Ok(a / b)
}

/// Train the reference predictor on both feature sets and report
/// embedding metrics alongside raw-feature metrics and their ratio.
///
/// Classification uses multinomial logistic regression (Newton
/// iterations, L2 1e-4, gradient tolerance 1e-6); regression uses
/// closed-form ridge (L2 1e-4, intercept unpenalized).
pub fn downstream_eval(
    emb_train: &Matrix,
    emb_test: &Matrix,
    raw_train: &Matrix,
    raw_test: &Matrix,
    y_train: &[f64],
    y_test: &[f64],
    task: Task,
) -> Result<DownstreamScores> {
    if emb_train.rows() != y_train.len() || raw_train.rows() != y_train.len() {
        return Err(Error::InvalidInput(format!(
            "training rows ({}, {}) do not match {} targets",
            emb_train.rows(),
            raw_train.rows(),
            y_train.len()
        )));
    }
    if emb_test.rows() != y_test.len() || raw_test.rows() != y_test.len() {
        return Err(Error::InvalidInput(format!(
            "test rows ({}, {}) do not match {} targets",
            emb_test.rows(),
            raw_test.rows(),
            y_test.len()
        )));
    }
    match task {
        Task::Classification => {
            let on_emb = classification_metrics(emb_train, y_train, emb_test, y_test)?;
            let on_raw = classification_metrics(raw_train, y_train, raw_test, y_test)?;
            Ok(DownstreamScores {
                embedding: MetricSet::Classification(on_emb),
                raw: MetricSet::Classification(on_raw),
                normalized: MetricSet::Classification(ClassificationMetrics {
                    accuracy: ratio(on_emb.accuracy, on_raw.accuracy)?,
                    f1: ratio(on_emb.f1, on_raw.f1)?,
                    precision: ratio(on_emb.precision, on_raw.precision)?,
                    recall: ratio(on_emb.recall, on_raw.recall)?,
                }),
            })
        }
        Task::Regression => {
            let on_emb = regression_metrics(emb_train, y_train, emb_test, y_test)?;
            let on_raw = regression_metrics(raw_train, y_train, raw_test, y_test)?;
            Ok(DownstreamScores {
                embedding: MetricSet::Regression(on_emb),
                raw: MetricSet::Regression(on_raw),
                normalized: MetricSet::Regression(RegressionMetrics {
                    mae: ratio(on_emb.mae, on_raw.mae)?,
                    rmse: ratio(on_emb.rmse, on_raw.rmse)?,
                }),
            })
        }
    }
}

const PREDICTOR_L2: f64 = 1e-4;
const NEWTON_TOL: f64 = 1e-6;
const NEWTON_MAX_ITERS: usize = 200;

fn class_labels(y: &[f64]) -> Result<Vec<usize>> {
    y.iter()
        .map(|&v| {
            if v.fract() == 0.0 && v >= 0.0 && v.is_finite() {
                Ok(v as usize)
            } else {
                Err(Error::InvalidInput(format!(
                    "classification target {v} is not a nonnegative integer class index"
                )))
            }
        })
        .collect()
}

/// Multinomial logistic regression fitted by damped Newton steps.
///
/// Parameters live in a (d+1)×K matrix (intercept row first). The L2
/// term covers every entry including the intercepts, which keeps the
/// Hessian positive definite under the full softmax parameterization
/// (otherwise shifting all class intercepts together is a flat
/// direction).
struct LogisticModel {
    weights: Matrix,
    classes: usize,
}

fn with_intercept(x: &Matrix) -> Matrix {
    Matrix::from_fn(x.rows(), x.cols() + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            x.get(i, j - 1)
        }
    })
}

fn softmax_rows(logits: &mut [f64], classes: usize) {
    for row in logits.chunks_mut(classes) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

fn fit_logistic(x: &Matrix, labels: &[usize]) -> Result<LogisticModel> {
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    if labels.iter().collect::<std::collections::BTreeSet<_>>().len() < 2 {
        return Err(Error::InvalidInput(
            "classification needs at least two classes in the training target".into(),
        ));
    }
    let xb = with_intercept(x);
    let n = xb.rows();
    let d = xb.cols();
    let p = d * classes;
    let mut w = vec![0.0f64; p];

    let loss_and_grad = |w: &[f64]| -> (f64, Vec<f64>, Vec<f64>) {
        // probs[n*classes], loss, grad[p]
        let mut probs = vec![0.0f64; n * classes];
        for i in 0..n {
            for k in 0..classes {
                let mut z = 0.0;
                for j in 0..d {
                    z += xb.get(i, j) * w[j * classes + k];
                }
                probs[i * classes + k] = z;
            }
        }
        softmax_rows(&mut probs, classes);
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            loss -= probs[i * classes + label].max(1e-300).ln();
        }
        loss /= n as f64;
        let mut grad = vec![0.0f64; p];
        for (i, &label) in labels.iter().enumerate() {
            for k in 0..classes {
                let err = probs[i * classes + k] - if k == label { 1.0 } else { 0.0 };
                for j in 0..d {
                    grad[j * classes + k] += xb.get(i, j) * err;
                }
            }
        }
        for g in grad.iter_mut() {
            *g /= n as f64;
        }
        for (g, &wi) in grad.iter_mut().zip(w.iter()) {
            *g += PREDICTOR_L2 * wi;
        }
        loss += 0.5 * PREDICTOR_L2 * w.iter().map(|v| v * v).sum::<f64>();
        (loss, grad, probs)
    };

    let (mut loss, mut grad, mut probs) = loss_and_grad(&w);
    for _ in 0..NEWTON_MAX_ITERS {
        let grad_inf = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if grad_inf < NEWTON_TOL {
            break;
        }
        // Full Newton Hessian: H[(j1,k1),(j2,k2)] =
        //   (1/n) Σ_i x_ij1 x_ij2 p_ik1 (δ_k1k2 − p_ik2) + λ δ.
        let mut h = nalgebra::DMatrix::<f64>::zeros(p, p);
        for i in 0..n {
            let pi = &probs[i * classes..(i + 1) * classes];
            for k1 in 0..classes {
                for k2 in 0..classes {
                    let s = pi[k1] * (if k1 == k2 { 1.0 } else { 0.0 } - pi[k2]) / n as f64;
                    if s == 0.0 {
                        continue;
                    }
                    for j1 in 0..d {
                        let xs = xb.get(i, j1) * s;
                        for j2 in 0..d {
                            h[(j1 * classes + k1, j2 * classes + k2)] +=
                                xs * xb.get(i, j2);
                        }
                    }
                }
            }
        }
        for j in 0..p {
            h[(j, j)] += PREDICTOR_L2;
        }
        let g = nalgebra::DVector::from_column_slice(&grad);
        let step = h
            .lu()
            .solve(&g)
            .ok_or_else(|| Error::NonFinite("singular Newton system".into()))?;
        // Damped update: halve the step until the loss decreases.
        let mut scale_step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial: Vec<f64> = w
                .iter()
                .zip(step.iter())
                .map(|(wi, si)| wi - scale_step * si)
                .collect();
            let (tl, tg, tp) = loss_and_grad(&trial);
            if tl <= loss {
                w = trial;
                loss = tl;
                grad = tg;
                probs = tp;
                accepted = true;
                break;
            }
            scale_step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(LogisticModel {
        weights: Matrix::new(d, classes, w)?,
        classes,
    })
}

impl LogisticModel {
    fn predict(&self, x: &Matrix) -> Vec<usize> {
        let xb = with_intercept(x);
        let mut out = Vec::with_capacity(xb.rows());
        for i in 0..xb.rows() {
            let mut best = 0;
            let mut best_z = f64::NEG_INFINITY;
            for k in 0..self.classes {
                let mut z = 0.0;
                for j in 0..xb.cols() {
                    z += xb.get(i, j) * self.weights.get(j, k);
                }
                if z > best_z {
                    best_z = z;
                    best = k;
                }
            }
            out.push(best);
        }
        out
    }
}

/// Accuracy plus support-weighted precision, recall, and F1.
fn weighted_metrics(truth: &[usize], predicted: &[usize]) -> ClassificationMetrics {
    let classes = truth
        .iter()
        .chain(predicted)
        .max()
        .map_or(0, |&m| m + 1);
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    let mut correct = 0usize;
    for (&t, &p) in truth.iter().zip(predicted) {
        if t == p {
            correct += 1;
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let n = truth.len() as f64;
    let mut precision = 0.0;
    let mut recall = 0.0;
    let mut f1 = 0.0;
    for c in 0..classes {
        let support = (tp[c] + fn_[c]) as f64;
        if support == 0.0 {
            continue;
        }
        let p = if tp[c] + fp[c] > 0 {
            tp[c] as f64 / (tp[c] + fp[c]) as f64
        } else {
            0.0
        };
        let r = tp[c] as f64 / support;
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        precision += support / n * p;
        recall += support / n * r;
        f1 += support / n * f;
    }
    ClassificationMetrics {
        accuracy: correct as f64 / n,
        precision,
        recall,
        f1,
    }
}

fn classification_metrics(
    x_train: &Matrix,
    y_train: &[f64],
    x_test: &Matrix,
    y_test: &[f64],
) -> Result<ClassificationMetrics> {
    let train_labels = class_labels(y_train)?;
    let test_labels = class_labels(y_test)?;
    let model = fit_logistic(x_train, &train_labels)?;
    let predicted = model.predict(x_test);
    Ok(weighted_metrics(&test_labels, &predicted))
}

/// Closed-form ridge regression. Features and target are centered so
/// the intercept absorbs the means and stays unpenalized.
fn fit_ridge(x: &Matrix, y: &[f64], l2: f64) -> Result<(Vec<f64>, f64)> {
    let n = x.rows();
    let d = x.cols();
    let x_mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64)
        .collect();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let mut gram = nalgebra::DMatrix::<f64>::zeros(d, d);
    let mut rhs = nalgebra::DVector::<f64>::zeros(d);
    for (i, &yi) in y.iter().enumerate() {
        for j1 in 0..d {
            let xc1 = x.get(i, j1) - x_mean[j1];
            rhs[j1] += xc1 * (yi - y_mean);
            for j2 in 0..d {
                gram[(j1, j2)] += xc1 * (x.get(i, j2) - x_mean[j2]);
            }
        }
    }
    for j in 0..d {
        gram[(j, j)] += l2;
    }
    let w = gram
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NonFinite("singular ridge system".into()))?;
    let w: Vec<f64> = w.iter().copied().collect();
    let intercept = y_mean
        - w.iter()
            .zip(&x_mean)
            .map(|(wi, mi)| wi * mi)
            .sum::<f64>();
    Ok((w, intercept))
}

fn ridge_predict(x: &Matrix, w: &[f64], intercept: f64) -> Vec<f64> {
    (0..x.rows())
        .map(|i| intercept + (0..x.cols()).map(|j| x.get(i, j) * w[j]).sum::<f64>())
        .collect()
}

fn regression_metrics(
    x_train: &Matrix,
    y_train: &[f64],
    x_test: &Matrix,
    y_test: &[f64],
) -> Result<RegressionMetrics> {
    let (w, intercept) = fit_ridge(x_train, y_train, PREDICTOR_L2)?;
    let predicted = ridge_predict(x_test, &w, intercept);
    let n = y_test.len() as f64;
    let mae = y_test
        .iter()
        .zip(&predicted)
        .map(|(t, p)| (t - p).abs())
        .sum::<f64>()
        / n;
    let rmse = (y_test
        .iter()
        .zip(&predicted)
        .map(|(t, p)| (t - p) * (t - p))
        .sum::<f64>()
        / n)
        .sqrt();
    if !(mae.is_finite() && rmse.is_finite()) {
        return Err(Error::NonFinite(format!(
            "regression metrics mae={mae} rmse={rmse}"
        )));
    }
    Ok(RegressionMetrics { mae, rmse })
}

/// One benchmark measurement: a model variant on a dataset under one
/// seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub dataset: String,
    pub variant: String,
    pub seed: u64,
    pub raw_mse: f64,
    /// Baseline raw MSE on the same dataset and split.
    pub baseline_mse: f64,
    pub normalized_mse: f64,
    pub train_seconds: f64,
    pub epochs: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub downstream: Option<DownstreamScores>,
}

/// Machine-readable benchmark report: one row per dataset x variant
/// x seed, normalized against the named baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub format_version: u32,
    /// Which method produced `baseline_mse` (always reported so the
    /// normalization reference is never ambiguous).
    pub normalizer: String,
    pub rows: Vec<ScoreRow>,
}

impl ScoreTable {
    pub fn new(normalizer: impl Into<String>) -> Self {
        Self {
            format_version: REPORT_FORMAT_VERSION,
            normalizer: normalizer.into(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: ScoreRow) {
        self.rows.push(row);
    }

    pub fn normalized_scores(&self, variant: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| r.normalized_mse)
            .collect()
    }

    /// Geometric-mean aggregate for one variant across all its rows.
    pub fn aggregate(&self, variant: &str, bootstrap_seed: u64) -> Result<Aggregate> {
        let scores = self.normalized_scores(variant);
        if scores.is_empty() {
            return Err(Error::InvalidInput(format!(
                "no rows for variant {variant:?}"
            )));
        }
        aggregate_normalized(&scores, bootstrap_seed)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::ioutil::write_json(path, self)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let table: ScoreTable = crate::ioutil::read_json(path)?;
        if table.format_version != REPORT_FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported report format_version {} (expected {REPORT_FORMAT_VERSION})",
                table.format_version
            )));
        }
        Ok(table)
    }

    /// Human-readable summary: per-variant aggregates and runtimes.
    pub fn render_summary(&self, bootstrap_seed: u64) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let mut variants: Vec<&str> = self.rows.iter().map(|r| r.variant.as_str()).collect();
        variants.sort_unstable();
        variants.dedup();
        let _ = writeln!(
            out,
            "{:<14} {:>8} {:>12} {:>24} {:>12} {:>12}",
            "variant", "cells", "geo-mean", "95% CI", "mean sec", "median sec"
        );
        for v in variants {
            let rows: Vec<&ScoreRow> = self.rows.iter().filter(|r| r.variant == v).collect();
            let agg = match self.aggregate(v, bootstrap_seed) {
                Ok(a) => a,
                Err(_) => continue,
            };
            let mut secs: Vec<f64> = rows.iter().map(|r| r.train_seconds).collect();
            secs.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
            let mean_s = secs.iter().sum::<f64>() / secs.len() as f64;
            let median_s = if secs.len() % 2 == 1 {
                secs[secs.len() / 2]
            } else {
                (secs[secs.len() / 2 - 1] + secs[secs.len() / 2]) / 2.0
            };
            let _ = writeln!(
                out,
                "{:<14} {:>8} {:>12.6} {:>24} {:>12.3} {:>12.3}",
                v,
                agg.count,
                agg.geometric_mean,
                format!("[{:.6}, {:.6}]", agg.ci95.lower, agg.ci95.upper),
                mean_s,
                median_s
            );
        }
        out
    }
}

/// One (dataset, seed) cell of the two-variant comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonCell {
    pub dataset: String,
    pub seed: u64,
    pub deep_normalized: f64,
    pub stacked_normalized: f64,
}

/// Per-variant wall-clock accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeRow {
    pub variant: String,
    pub mean_seconds: f64,
    pub median_seconds: f64,
    pub mean_seconds_per_epoch: f64,
}

/// Head-to-head summary of the full-Jacobian penalty versus the
/// per-layer-sum penalty over matched (dataset, seed) cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub cells: Vec<ComparisonCell>,
    /// Fraction of cells where the full-Jacobian variant's
    /// normalized MSE is less than or equal to the per-layer sum's.
    pub deep_not_worse_fraction: f64,
    pub deep_geomean: f64,
    pub stacked_geomean: f64,
    /// deep_geomean / stacked_geomean; below 1.0 means the
    /// full-Jacobian penalty reconstructs better overall.
    pub geomean_ratio: f64,
    pub runtime: Vec<RuntimeRow>,
}

fn runtime_row(rows: &[&ScoreRow], variant: &str) -> RuntimeRow {
    let mut secs: Vec<f64> = rows.iter().map(|r| r.train_seconds).collect();
    secs.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    let mean = secs.iter().sum::<f64>() / secs.len() as f64;
    let median = if secs.len() % 2 == 1 {
        secs[secs.len() / 2]
    } else {
        (secs[secs.len() / 2 - 1] + secs[secs.len() / 2]) / 2.0
    };
    let per_epoch = rows
        .iter()
        .map(|r| r.train_seconds / r.epochs.max(1) as f64)
        .sum::<f64>()
        / rows.len() as f64;
    RuntimeRow {
        variant: variant.to_string(),
        mean_seconds: mean,
        median_seconds: median,
        mean_seconds_per_epoch: per_epoch,
    }
}

/// Build the deep-vs-stacked comparison from a score table holding
/// both variants. Requires the two variants to cover exactly the
/// same (dataset, seed) cells.
pub fn deepcae_vs_stacked_report(table: &ScoreTable) -> Result<ComparisonReport> {
    use crate::models::Variant;
    let deep_name = Variant::DeepCae.as_str();
    let stacked_name = Variant::StackedCae.as_str();
    let deep: Vec<&ScoreRow> = table
        .rows
        .iter()
        .filter(|r| r.variant == deep_name)
        .collect();
    let stacked: Vec<&ScoreRow> = table
        .rows
        .iter()
        .filter(|r| r.variant == stacked_name)
        .collect();
    let key = |r: &ScoreRow| (r.dataset.clone(), r.seed);
    let deep_keys: std::collections::BTreeSet<_> = deep.iter().map(|r| key(r)).collect();
    let stacked_keys: std::collections::BTreeSet<_> =
        stacked.iter().map(|r| key(r)).collect();
    if deep_keys != stacked_keys || deep.is_empty() {
        return Err(Error::InvalidInput(format!(
            "comparison needs matching (dataset, seed) cells for both variants; \
             got {} vs {}",
            deep.len(),
            stacked.len()
        )));
    }
    let stacked_by_key: std::collections::BTreeMap<_, &ScoreRow> =
        stacked.iter().map(|r| (key(r), *r)).collect();
    let mut cells = Vec::with_capacity(deep.len());
    let mut not_worse = 0usize;
    for d in &deep {
        let s = stacked_by_key[&key(d)];
        if d.normalized_mse <= s.normalized_mse {
            not_worse += 1;
        }
        cells.push(ComparisonCell {
            dataset: d.dataset.clone(),
            seed: d.seed,
            deep_normalized: d.normalized_mse,
            stacked_normalized: s.normalized_mse,
        });
    }
    cells.sort_by(|a, b| (&a.dataset, a.seed).cmp(&(&b.dataset, b.seed)));
    let deep_geomean = geometric_mean(
        &cells.iter().map(|c| c.deep_normalized).collect::<Vec<_>>(),
    )?;
    let stacked_geomean = geometric_mean(
        &cells
            .iter()
            .map(|c| c.stacked_normalized)
            .collect::<Vec<_>>(),
    )?;
    Ok(ComparisonReport {
        deep_not_worse_fraction: not_worse as f64 / cells.len() as f64,
        deep_geomean,
        stacked_geomean,
        geomean_ratio: deep_geomean / stacked_geomean,
        runtime: vec![
            runtime_row(&deep, deep_name),
            runtime_row(&stacked, stacked_name),
        ],
        cells,
    })
}
