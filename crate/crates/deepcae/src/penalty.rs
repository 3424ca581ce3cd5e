//! Contractive penalty computations.
//!
//! A tanh layer `x -> tanh(Wx + b)` has Jacobian `diag(1 - h^2) W`
//! where `h` is the layer output. For a multi-layer encoder the full
//! Jacobian is the product of the per-layer Jacobians, evaluated at
//! each layer's own activation. This module provides:
//!
//! * the closed-form single-layer penalty (tanh and, as a reference
//!   oracle, sigmoid),
//! * per-layer and full-encoder Jacobian assembly,
//! * the two multi-layer penalties: the exact full-product form
//!   (`deepcae_penalty`) and the summed per-layer form
//!   (`stacked_penalty`),
//! * tape-recorded equivalents so gradients flow through both the
//!   weights and the activations.
//!
//! The full product costs O(k d^3) per sample from the matrix chain
//! (evaluated in layer order; widths shrink toward the embedding, so
//! reordering buys nothing), versus O(k d_h d_x) for the summed form.
//! Batch values are means of per-sample values, so a tuned penalty
//! weight keeps its meaning across batch sizes.

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tape, VarRef};

/// Per-layer activations from one encoder forward pass.
///
/// `layer_outputs[0]` is the batch input and `layer_outputs[i]` the
/// post-tanh output of layer `i`, so a k-layer encoder yields k+1
/// entries, all with the same batch dimension.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    layer_outputs: Vec<Matrix>,
}

impl ForwardTrace {
    /// Build a trace from activations, validating batch agreement
    /// and that post-activation entries stay inside the tanh range.
    /// Saturated entries at exactly +/-1 are accepted: 64-bit tanh
    /// reaches them for large pre-activations and their derivative
    /// factor is an exact zero.
    pub fn new(layer_outputs: Vec<Matrix>) -> Result<Self> {
        if layer_outputs.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "a forward trace needs the input plus at least one layer output, got {} matrices",
                layer_outputs.len()
            )));
        }
        let batch = layer_outputs[0].rows();
        for (i, m) in layer_outputs.iter().enumerate() {
            if m.rows() != batch {
                return Err(Error::InvalidInput(format!(
                    "trace entry {i} has batch {} but the input has batch {batch}",
                    m.rows()
                )));
            }
            if i > 0 {
                for &v in m.data() {
                    if !(-1.0..=1.0).contains(&v) {
                        return Err(Error::InvalidInput(format!(
                            "layer {i} activation {v} outside the tanh range [-1, 1]"
                        )));
                    }
                }
            }
        }
        Ok(Self { layer_outputs })
    }

    /// Number of encoder layers (trace length minus the input).
    pub fn num_layers(&self) -> usize {
        self.layer_outputs.len() - 1
    }

    pub fn batch_size(&self) -> usize {
        self.layer_outputs[0].rows()
    }

    /// The batch input x_0.
    pub fn input(&self) -> &Matrix {
        &self.layer_outputs[0]
    }

    /// The final activation x_k, i.e. the embedding.
    pub fn embedding(&self) -> &Matrix {
        self.layer_outputs.last().expect("trace is non-empty")
    }

    pub fn layer_outputs(&self) -> &[Matrix] {
        &self.layer_outputs
    }

    /// Single-sample view: row `i` of every layer output.
    pub fn sample(&self, i: usize) -> Result<ForwardTrace> {
        if i >= self.batch_size() {
            return Err(Error::InvalidInput(format!(
                "sample {i} out of bounds for batch {}",
                self.batch_size()
            )));
        }
        Ok(ForwardTrace {
            layer_outputs: self.layer_outputs.iter().map(|m| m.row(i)).collect(),
        })
    }
}

/// A batch penalty: the mean together with the per-row values it was
/// averaged from.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyValue {
    value: f64,
    per_sample: Vec<f64>,
}

impl PenaltyValue {
    fn from_per_sample(per_sample: Vec<f64>) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::InvalidInput("empty batch in penalty".into()));
        }
        for &v in &per_sample {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::NonFinite(format!(
                    "penalty produced an invalid per-sample value {v}"
                )));
            }
        }
        let value = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
        Ok(Self { value, per_sample })
    }

    /// Batch mean.
    pub fn value(&self) -> f64 {
        self.value
    }

    /// One value per batch row.
    pub fn per_sample(&self) -> &[f64] {
        &self.per_sample
    }
}

fn check_activation_range(h: &Matrix, lo: f64, hi: f64, what: &str) -> Result<()> {
    for &v in h.data() {
        if !(lo..=hi).contains(&v) {
            return Err(Error::InvalidInput(format!(
                "{what} activation {v} outside [{lo}, {hi}]"
            )));
        }
    }
    Ok(())
}

/// Squared Frobenius norm of a single tanh layer's Jacobian, in
/// closed form: per sample, sum_i (1 - h_i^2)^2 * sum_j W_ij^2.
pub fn single_layer_penalty_tanh(h: &Matrix, w: &Matrix) -> Result<PenaltyValue> {
    if h.cols() != w.rows() {
        return Err(Error::Shape {
            op: "single_layer_penalty_tanh",
            left: format!("{}x{}", h.rows(), h.cols()),
            right: format!("{}x{}", w.rows(), w.cols()),
        });
    }
    check_activation_range(h, -1.0, 1.0, "tanh")?;
    let row_sq: Vec<f64> = (0..w.rows())
        .map(|i| w.row_slice(i).iter().map(|v| v * v).sum())
        .collect();
    let per_sample = (0..h.rows())
        .map(|s| {
            h.row_slice(s)
                .iter()
                .zip(&row_sq)
                .map(|(&hi, &ws)| {
                    let d = 1.0 - hi * hi;
                    d * d * ws
                })
                .sum()
        })
        .collect();
    PenaltyValue::from_per_sample(per_sample)
}

/// Sigmoid counterpart of [`single_layer_penalty_tanh`]: per sample,
/// sum_i (h_i (1 - h_i))^2 * sum_j W_ij^2. Kept as a reference
/// oracle for the original single-layer formulation; training uses
/// tanh throughout.
pub fn single_layer_penalty_sigmoid(h: &Matrix, w: &Matrix) -> Result<PenaltyValue> {
    if h.cols() != w.rows() {
        return Err(Error::Shape {
            op: "single_layer_penalty_sigmoid",
            left: format!("{}x{}", h.rows(), h.cols()),
            right: format!("{}x{}", w.rows(), w.cols()),
        });
    }
    check_activation_range(h, 0.0, 1.0, "sigmoid")?;
    let row_sq: Vec<f64> = (0..w.rows())
        .map(|i| w.row_slice(i).iter().map(|v| v * v).sum())
        .collect();
    let per_sample = (0..h.rows())
        .map(|s| {
            h.row_slice(s)
                .iter()
                .zip(&row_sq)
                .map(|(&hi, &ws)| {
                    let d = hi * (1.0 - hi);
                    d * d * ws
                })
                .sum()
        })
        .collect();
    PenaltyValue::from_per_sample(per_sample)
}

/// Jacobian of one tanh layer at a single sample: `diag(1 - h^2) W`,
/// i.e. row `i` of `W` scaled by `1 - h_i^2` where `h` is the layer's
/// own output row.
pub fn layer_jacobian(x_k: &Matrix, w: &Matrix) -> Result<Matrix> {
    if x_k.rows() != 1 || x_k.cols() != w.rows() {
        return Err(Error::Shape {
            op: "layer_jacobian",
            left: format!("{}x{}", x_k.rows(), x_k.cols()),
            right: format!("{}x{}", w.rows(), w.cols()),
        });
    }
    check_activation_range(x_k, -1.0, 1.0, "tanh")?;
    Ok(Matrix::from_fn(w.rows(), w.cols(), |i, j| {
        let h = x_k.get(0, i);
        (1.0 - h * h) * w.get(i, j)
    }))
}

fn check_chain(trace: &ForwardTrace, weights: &[Matrix]) -> Result<()> {
    if trace.num_layers() != weights.len() {
        return Err(Error::InvalidInput(format!(
            "trace has {} layers but {} weight matrices were given",
            trace.num_layers(),
            weights.len()
        )));
    }
    for (i, w) in weights.iter().enumerate() {
        let d_in = trace.layer_outputs[i].cols();
        let d_out = trace.layer_outputs[i + 1].cols();
        if w.rows() != d_out || w.cols() != d_in {
            return Err(Error::Shape {
                op: "encoder weight chain",
                left: format!("{}x{}", d_out, d_in),
                right: format!("{}x{}", w.rows(), w.cols()),
            });
        }
    }
    Ok(())
}

/// Full-encoder Jacobian at a single sample: the ordered product of
/// per-layer Jacobians, last layer leftmost. Result shape is
/// embedding width by input width.
pub fn encoder_jacobian(trace: &ForwardTrace, weights: &[Matrix]) -> Result<Matrix> {
    if trace.batch_size() != 1 {
        return Err(Error::InvalidInput(format!(
            "encoder_jacobian expects a single-sample trace, got batch {}",
            trace.batch_size()
        )));
    }
    check_chain(trace, weights)?;
    let mut product: Option<Matrix> = None;
    for (i, w) in weights.iter().enumerate() {
        let j_layer = layer_jacobian(&trace.layer_outputs[i + 1], w)?;
        product = Some(match product {
            None => j_layer,
            Some(p) => j_layer.matmul(&p)?,
        });
    }
    Ok(product.expect("at least one layer"))
}

/// Exact contractive penalty of the whole encoder: per sample, the
/// squared Frobenius norm of the full Jacobian product; batch mean.
pub fn deepcae_penalty(trace: &ForwardTrace, weights: &[Matrix]) -> Result<PenaltyValue> {
    check_chain(trace, weights)?;
    let per_sample = (0..trace.batch_size())
        .map(|s| {
            let sample = trace.sample(s)?;
            Ok(encoder_jacobian(&sample, weights)?.frobenius_sq())
        })
        .collect::<Result<Vec<f64>>>()?;
    PenaltyValue::from_per_sample(per_sample)
}

/// Summed per-layer penalty: each layer's single-layer value in
/// isolation, added up. This is not the norm of the Jacobian product;
/// the two differ whenever layers interact.
pub fn stacked_penalty(trace: &ForwardTrace, weights: &[Matrix]) -> Result<PenaltyValue> {
    check_chain(trace, weights)?;
    let mut per_sample = vec![0.0; trace.batch_size()];
    for (i, w) in weights.iter().enumerate() {
        let layer = single_layer_penalty_tanh(&trace.layer_outputs[i + 1], w)?;
        for (acc, v) in per_sample.iter_mut().zip(layer.per_sample()) {
            *acc += v;
        }
    }
    PenaltyValue::from_per_sample(per_sample)
}

/// Diagnostic distance ratio `||f(x) - f(x')|| / ||x - x'||` for any
/// encoder map; small perturbations recover directional Jacobian
/// norms.
pub fn contraction_ratio<F>(encode: F, x: &Matrix, x_prime: &Matrix) -> Result<f64>
where
    F: Fn(&Matrix) -> Result<Matrix>,
{
    if x.shape() != x_prime.shape() {
        return Err(Error::Shape {
            op: "contraction_ratio",
            left: format!("{}x{}", x.rows(), x.cols()),
            right: format!("{}x{}", x_prime.rows(), x_prime.cols()),
        });
    }
    let input_dist = x.sub(x_prime)?.norm();
    if input_dist == 0.0 {
        return Err(Error::InvalidInput(
            "contraction_ratio requires two distinct points".into(),
        ));
    }
    let fx = encode(x)?;
    let fx_prime = encode(x_prime)?;
    Ok(fx.sub(&fx_prime)?.norm() / input_dist)
}

/// Tape version of the single-layer tanh penalty over a batch.
/// `h` is the layer output (batch x d_h), `w` the weight (d_h x d_in);
/// returns the 1x1 batch mean.
pub fn build_single_layer_penalty_tanh(
    tape: &mut Tape,
    h: VarRef,
    w: VarRef,
) -> Result<VarRef> {
    if h.cols() != w.rows() {
        return Err(Error::Shape {
            op: "build_single_layer_penalty_tanh",
            left: format!("{}x{}", h.rows(), h.cols()),
            right: format!("{}x{}", w.rows(), w.cols()),
        });
    }
    let batch = h.rows();
    let w_sq = tape.square(w);
    let ones_in = tape.leaf(Matrix::filled(w.cols(), 1, 1.0));
    let row_sums = tape.matmul(w_sq, ones_in)?;
    let h_sq = tape.square(h);
    let neg_h_sq = tape.scale(h_sq, -1.0);
    let ones_batch = tape.leaf(Matrix::filled(batch, h.cols(), 1.0));
    let deriv = tape.add(ones_batch, neg_h_sq)?;
    let deriv_sq = tape.square(deriv);
    let per_sample = tape.matmul(deriv_sq, row_sums)?;
    let ones_row = tape.leaf(Matrix::filled(1, batch, 1.0));
    let total = tape.matmul(ones_row, per_sample)?;
    Ok(tape.scale(total, 1.0 / batch as f64))
}

/// Tape version of [`deepcae_penalty`]. `activations[i]` is the
/// recorded output of layer i+1 (batch x width), `weights[i]` its
/// weight node. Returns the 1x1 batch-mean penalty with gradients
/// flowing through both weights and activations.
///
/// A one-layer encoder reduces to the closed single-layer form, which
/// this builder uses directly; deeper encoders assemble the per-sample
/// Jacobian product row by row.
pub fn build_deepcae_penalty(
    tape: &mut Tape,
    activations: &[VarRef],
    weights: &[VarRef],
) -> Result<VarRef> {
    if activations.len() != weights.len() || weights.is_empty() {
        return Err(Error::InvalidInput(format!(
            "penalty needs matching non-empty activations and weights, got {} and {}",
            activations.len(),
            weights.len()
        )));
    }
    if weights.len() == 1 {
        return build_single_layer_penalty_tanh(tape, activations[0], weights[0]);
    }
    let batch = activations[0].rows();
    let ones_rows: Vec<VarRef> = activations
        .iter()
        .map(|a| tape.leaf(Matrix::filled(1, a.cols(), 1.0)))
        .collect();

    let mut total: Option<VarRef> = None;
    for s in 0..batch {
        let mut product: Option<VarRef> = None;
        for (i, (&act, &w)) in activations.iter().zip(weights).enumerate() {
            let h_row = tape.row(act, s)?;
            let h_sq = tape.square(h_row);
            let neg = tape.scale(h_sq, -1.0);
            let deriv = tape.add(ones_rows[i], neg)?;
            let j_layer = tape.diag_scale(deriv, w)?;
            product = Some(match product {
                None => j_layer,
                Some(p) => tape.matmul(j_layer, p)?,
            });
        }
        let fs = tape.frobenius_sq(product.expect("at least one layer"));
        total = Some(match total {
            None => fs,
            Some(t) => tape.add(t, fs)?,
        });
    }
    Ok(tape.scale(total.expect("batch is non-empty"), 1.0 / batch as f64))
}

/// Tape version of [`stacked_penalty`]: the sum of batched
/// single-layer penalties.
pub fn build_stacked_penalty(
    tape: &mut Tape,
    activations: &[VarRef],
    weights: &[VarRef],
) -> Result<VarRef> {
    if activations.len() != weights.len() || weights.is_empty() {
        return Err(Error::InvalidInput(format!(
            "penalty needs matching non-empty activations and weights, got {} and {}",
            activations.len(),
            weights.len()
        )));
    }
    let mut total: Option<VarRef> = None;
    for (&act, &w) in activations.iter().zip(weights) {
        let layer = build_single_layer_penalty_tanh(tape, act, w)?;
        total = Some(match total {
            None => layer,
            Some(t) => tape.add(t, layer)?,
        });
    }
    Ok(total.expect("at least one layer"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{
        finite_diff_gradient, finite_diff_jacobian, rel_err_matrix, rel_err_scalar,
    };
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
    }

    /// Random encoder stack: weights out x in, biases 1 x out.
    fn random_encoder(
        rng: &mut ChaCha8Rng,
        widths: &[usize],
        scale: f64,
    ) -> (Vec<Matrix>, Vec<Matrix>) {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in widths.windows(2) {
            weights.push(random_matrix(rng, pair[1], pair[0], scale));
            biases.push(random_matrix(rng, 1, pair[1], scale));
        }
        (weights, biases)
    }

    /// Plain forward pass with tanh layers, recording every output.
    fn forward(x0: &Matrix, weights: &[Matrix], biases: &[Matrix]) -> ForwardTrace {
        let mut outputs = vec![x0.clone()];
        let mut x = x0.clone();
        for (w, b) in weights.iter().zip(biases) {
            let ones = Matrix::filled(x.rows(), 1, 1.0);
            let z = x
                .matmul(&w.transpose())
                .unwrap()
                .add(&ones.matmul(b).unwrap())
                .unwrap();
            x = z.map(f64::tanh);
            outputs.push(x.clone());
        }
        ForwardTrace::new(outputs).unwrap()
    }

    fn random_widths(rng: &mut ChaCha8Rng, d_x_max: usize, k_max: usize) -> Vec<usize> {
        let d_x = rng.gen_range(2..=d_x_max);
        let k = rng.gen_range(1..=k_max);
        let mut widths = vec![d_x];
        for _ in 0..k {
            let prev = *widths.last().unwrap();
            widths.push(rng.gen_range(1..=prev));
        }
        widths
    }

    #[test]
    fn single_layer_tanh_at_zero_activation_is_weight_norm() {
        let w = Matrix::new(2, 3, vec![1.0, -2.0, 0.5, 3.0, 1.5, -0.25]).unwrap();
        let h = Matrix::zeros(1, 2);
        let p = single_layer_penalty_tanh(&h, &w).unwrap();
        assert!((p.value() - w.frobenius_sq()).abs() < 1e-12);
    }

    #[test]
    fn single_layer_tanh_vanishes_at_saturation() {
        let w = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let h = Matrix::new(1, 2, vec![1.0, -1.0]).unwrap();
        let p = single_layer_penalty_tanh(&h, &w).unwrap();
        assert_eq!(p.value(), 0.0);
    }

    #[test]
    fn single_layer_tanh_matches_explicit_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = random_matrix(&mut rng, 3, 5, 1.0);
        let h = random_matrix(&mut rng, 4, 3, 0.9);
        let p = single_layer_penalty_tanh(&h, &w).unwrap();
        for s in 0..4 {
            let row = h.row(s);
            let explicit = Matrix::from_fn(3, 5, |i, j| {
                let hi = row.get(0, i);
                (1.0 - hi * hi) * w.get(i, j)
            });
            assert!(rel_err_scalar(p.per_sample()[s], explicit.frobenius_sq()) < 1e-12);
        }
    }

    #[test]
    fn single_layer_tanh_rejects_out_of_range_activation() {
        let w = Matrix::identity(2);
        let h = Matrix::new(1, 2, vec![0.5, 1.5]).unwrap();
        assert!(single_layer_penalty_tanh(&h, &w).is_err());
    }

    #[test]
    fn sigmoid_penalty_hand_value() {
        // h = 0.5, W = [[1, 1]]: (0.5 * 0.5)^2 * 2 = 0.125
        let h = Matrix::filled(1, 1, 0.5);
        let w = Matrix::new(1, 2, vec![1.0, 1.0]).unwrap();
        let p = single_layer_penalty_sigmoid(&h, &w).unwrap();
        assert!((p.value() - 0.125).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_penalty_vanishes_at_saturation() {
        let w = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let h = Matrix::new(1, 2, vec![0.0, 1.0]).unwrap();
        let p = single_layer_penalty_sigmoid(&h, &w).unwrap();
        assert_eq!(p.value(), 0.0);
    }

    #[test]
    fn sigmoid_penalty_matches_explicit_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = random_matrix(&mut rng, 3, 4, 1.0);
        let h = Matrix::from_fn(2, 3, |_, _| rng.gen_range(0.05..0.95));
        let p = single_layer_penalty_sigmoid(&h, &w).unwrap();
        for s in 0..2 {
            let row = h.row(s);
            let explicit = Matrix::from_fn(3, 4, |i, j| {
                let hi = row.get(0, i);
                hi * (1.0 - hi) * w.get(i, j)
            });
            assert!(rel_err_scalar(p.per_sample()[s], explicit.frobenius_sq()) < 1e-12);
        }
    }

    #[test]
    fn layer_jacobian_identities() {
        let w = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let zero = Matrix::zeros(1, 2);
        assert_eq!(layer_jacobian(&zero, &w).unwrap(), w);

        let x = Matrix::new(1, 2, vec![0.3, -0.6]).unwrap();
        let j = layer_jacobian(&x, &Matrix::identity(2)).unwrap();
        assert!((j.get(0, 0) - (1.0 - 0.09)).abs() < 1e-15);
        assert!((j.get(1, 1) - (1.0 - 0.36)).abs() < 1e-15);
        assert_eq!(j.get(0, 1), 0.0);
    }

    #[test]
    fn layer_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = random_matrix(&mut rng, 3, 4, 0.8);
        let b = random_matrix(&mut rng, 1, 3, 0.5);
        let x0 = random_matrix(&mut rng, 1, 4, 0.7);

        let layer_map = |x: &[f64]| -> Result<Vec<f64>> {
            let xm = Matrix::new(1, 4, x.to_vec())?;
            let z = xm.matmul(&w.transpose())?.add(&b)?;
            Ok(z.map(f64::tanh).data().to_vec())
        };
        let fd = finite_diff_jacobian(layer_map, x0.data(), 1e-5).unwrap();

        let out = Matrix::new(1, 3, layer_map(x0.data()).unwrap()).unwrap();
        let analytic = layer_jacobian(&out, &w).unwrap();
        assert!(rel_err_matrix(&analytic, &fd).unwrap() < 1e-6);
    }

    #[test]
    fn encoder_jacobian_single_layer_is_layer_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (weights, biases) = random_encoder(&mut rng, &[4, 2], 0.8);
        let x0 = random_matrix(&mut rng, 1, 4, 0.5);
        let trace = forward(&x0, &weights, &biases);
        let full = encoder_jacobian(&trace, &weights).unwrap();
        let single = layer_jacobian(trace.embedding(), &weights[0]).unwrap();
        assert_eq!(full, single);
    }

    #[test]
    fn encoder_jacobian_identity_stack() {
        // All activations zero and identity weights: the product of
        // identity Jacobians.
        let d = 3;
        let trace = ForwardTrace::new(vec![
            Matrix::zeros(1, d),
            Matrix::zeros(1, d),
            Matrix::zeros(1, d),
        ])
        .unwrap();
        let weights = vec![Matrix::identity(d), Matrix::identity(d)];
        let j = encoder_jacobian(&trace, &weights).unwrap();
        assert_eq!(j, Matrix::identity(d));
    }

    #[test]
    fn encoder_jacobian_matches_finite_differences_k3() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let widths = [6, 5, 4, 3];
        let (weights, biases) = random_encoder(&mut rng, &widths, 0.7);
        let x0 = random_matrix(&mut rng, 1, 6, 0.6);
        let trace = forward(&x0, &weights, &biases);

        let encode_vec = |x: &[f64]| -> Result<Vec<f64>> {
            let xm = Matrix::new(1, 6, x.to_vec())?;
            Ok(forward(&xm, &weights, &biases).embedding().data().to_vec())
        };
        let fd = finite_diff_jacobian(encode_vec, x0.data(), 1e-5).unwrap();
        let analytic = encoder_jacobian(&trace, &weights).unwrap();
        assert!(rel_err_matrix(&analytic, &fd).unwrap() < 1e-6);
    }

    #[test]
    fn deepcae_penalty_zero_weights() {
        let trace = ForwardTrace::new(vec![Matrix::zeros(2, 3), Matrix::zeros(2, 2)]).unwrap();
        let weights = vec![Matrix::zeros(2, 3)];
        let p = deepcae_penalty(&trace, &weights).unwrap();
        assert_eq!(p.value(), 0.0);
    }

    #[test]
    fn deepcae_matches_single_layer_formula_at_k1() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let d_x = rng.gen_range(2..=6);
            let d_h = rng.gen_range(1..=d_x);
            let (weights, biases) = random_encoder(&mut rng, &[d_x, d_h], 1.0);
            let x0 = random_matrix(&mut rng, 3, d_x, 0.9);
            let trace = forward(&x0, &weights, &biases);

            let deep = deepcae_penalty(&trace, &weights).unwrap();
            let stacked = stacked_penalty(&trace, &weights).unwrap();
            let single = single_layer_penalty_tanh(trace.embedding(), &weights[0]).unwrap();

            assert!(rel_err_scalar(deep.value(), single.value()) < 1e-12);
            assert!(rel_err_scalar(stacked.value(), single.value()) < 1e-12);
        }
    }

    #[test]
    fn deepcae_matches_finite_difference_jacobian_norm() {
        // The central oracle: analytic penalty vs a numeric Jacobian,
        // across many shapes and seeds.
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for _ in 0..50 {
            let widths = random_widths(&mut rng, 8, 4);
            let d_x = widths[0];
            let (weights, biases) = random_encoder(&mut rng, &widths, 0.8);
            let x0 = random_matrix(&mut rng, 1, d_x, 0.8);
            let trace = forward(&x0, &weights, &biases);

            let encode_vec = |x: &[f64]| -> Result<Vec<f64>> {
                let xm = Matrix::new(1, d_x, x.to_vec())?;
                Ok(forward(&xm, &weights, &biases).embedding().data().to_vec())
            };
            let fd = finite_diff_jacobian(encode_vec, x0.data(), 1e-5).unwrap();
            let analytic = deepcae_penalty(&trace, &weights).unwrap();
            assert!(
                rel_err_scalar(analytic.value(), fd.frobenius_sq()) < 1e-5,
                "widths {widths:?}"
            );
        }
    }

    #[test]
    fn stacked_is_sum_of_per_layer_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (weights, biases) = random_encoder(&mut rng, &[5, 4, 3], 0.9);
        let x0 = random_matrix(&mut rng, 2, 5, 0.8);
        let trace = forward(&x0, &weights, &biases);

        let p1 = single_layer_penalty_tanh(&trace.layer_outputs()[1], &weights[0]).unwrap();
        let p2 = single_layer_penalty_tanh(&trace.layer_outputs()[2], &weights[1]).unwrap();
        let stacked = stacked_penalty(&trace, &weights).unwrap();
        assert!(rel_err_scalar(stacked.value(), p1.value() + p2.value()) < 1e-12);
    }

    #[test]
    fn deep_and_stacked_differ_at_k2() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (weights, biases) = random_encoder(&mut rng, &[6, 4, 3], 1.0);
        let x0 = random_matrix(&mut rng, 1, 6, 0.9);
        let trace = forward(&x0, &weights, &biases);

        let deep = deepcae_penalty(&trace, &weights).unwrap();
        let stacked = stacked_penalty(&trace, &weights).unwrap();
        assert!((deep.value() - stacked.value()).abs() > 1e-8);
    }

    #[test]
    fn contraction_ratio_identities() {
        let x = Matrix::new(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        let y = Matrix::new(1, 3, vec![0.4, 0.0, -0.2]).unwrap();

        let identity = |m: &Matrix| -> Result<Matrix> { Ok(m.clone()) };
        assert!((contraction_ratio(identity, &x, &y).unwrap() - 1.0).abs() < 1e-12);

        let zero = |m: &Matrix| -> Result<Matrix> { Ok(Matrix::zeros(m.rows(), m.cols())) };
        assert_eq!(contraction_ratio(zero, &x, &y).unwrap(), 0.0);

        assert!(contraction_ratio(identity, &x, &x).is_err());
    }

    #[test]
    fn contraction_ratio_recovers_directional_jacobian_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (weights, biases) = random_encoder(&mut rng, &[5, 3], 0.9);
        let x0 = random_matrix(&mut rng, 1, 5, 0.7);
        let dir = random_matrix(&mut rng, 1, 5, 1.0);
        let unit = dir.scale(1.0 / dir.norm());
        let x_prime = x0.add(&unit.scale(1e-6)).unwrap();

        let encode = |m: &Matrix| -> Result<Matrix> {
            Ok(forward(m, &weights, &biases).embedding().clone())
        };
        let ratio = contraction_ratio(encode, &x0, &x_prime).unwrap();

        let trace = forward(&x0, &weights, &biases);
        let j = encoder_jacobian(&trace, &weights).unwrap();
        let ju = j.matmul(&unit.transpose()).unwrap();
        assert!(rel_err_scalar(ratio, ju.norm()) < 1e-3);
    }

    #[test]
    fn tape_builders_match_pure_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for widths in [vec![5, 3], vec![6, 4, 2], vec![5, 4, 3, 2]] {
            let (weights, biases) = random_encoder(&mut rng, &widths, 0.8);
            let x0 = random_matrix(&mut rng, 3, widths[0], 0.8);
            let trace = forward(&x0, &weights, &biases);

            let mut tape = Tape::new();
            let w_refs: Vec<VarRef> = weights.iter().map(|w| tape.parameter(w.clone())).collect();
            let act_refs: Vec<VarRef> = trace.layer_outputs()[1..]
                .iter()
                .map(|a| tape.leaf(a.clone()))
                .collect();

            let deep_node = build_deepcae_penalty(&mut tape, &act_refs, &w_refs).unwrap();
            let stacked_node = build_stacked_penalty(&mut tape, &act_refs, &w_refs).unwrap();

            let deep = deepcae_penalty(&trace, &weights).unwrap();
            let stacked = stacked_penalty(&trace, &weights).unwrap();
            assert!(rel_err_scalar(tape.value(deep_node).scalar(), deep.value()) < 1e-12);
            assert!(rel_err_scalar(tape.value(stacked_node).scalar(), stacked.value()) < 1e-12);
        }
    }

    #[test]
    fn tape_deepcae_gradient_matches_finite_differences() {
        // Gradients must flow through the weights both directly and
        // via the recorded activations, so the probe rebuilds the
        // whole forward pass.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let widths = [5, 4, 3];
        let (weights, biases) = random_encoder(&mut rng, &widths, 0.8);
        let x0 = random_matrix(&mut rng, 2, 5, 0.7);

        for target in 0..weights.len() {
            let penalty_of = |w_probe: &Matrix| -> Result<f64> {
                let mut ws = weights.clone();
                ws[target] = w_probe.clone();
                let trace = forward(&x0, &ws, &biases);
                Ok(deepcae_penalty(&trace, &ws)?.value())
            };
            let fd = finite_diff_gradient(penalty_of, &weights[target], 1e-4).unwrap();

            let mut tape = Tape::new();
            let w_refs: Vec<VarRef> =
                weights.iter().map(|w| tape.parameter(w.clone())).collect();
            let mut act_refs = Vec::new();
            let mut x = tape.leaf(x0.clone());
            for (i, b) in biases.iter().enumerate() {
                let wt = tape.transpose(w_refs[i]);
                let xw = tape.matmul(x, wt).unwrap();
                let ones = tape.leaf(Matrix::filled(x0.rows(), 1, 1.0));
                let bias_ref = tape.leaf(b.clone());
                let brows = tape.matmul(ones, bias_ref).unwrap();
                let z = tape.add(xw, brows).unwrap();
                x = tape.tanh(z);
                act_refs.push(x);
            }
            let pen = build_deepcae_penalty(&mut tape, &act_refs, &w_refs).unwrap();
            let grads = tape.backward(pen).unwrap();
            assert!(
                rel_err_matrix(grads.wrt(w_refs[target]), &fd).unwrap() < 1e-4,
                "layer {target}"
            );
        }
    }

    proptest! {
        #[test]
        fn prop_full_jacobian_norm_submultiplicative(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let widths = random_widths(&mut rng, 6, 3);
            let (weights, biases) = random_encoder(&mut rng, &widths, 1.2);
            let x0 = random_matrix(&mut rng, 1, widths[0], 0.9);
            let trace = forward(&x0, &weights, &biases);

            let full = encoder_jacobian(&trace, &weights).unwrap().norm();
            let mut product = 1.0;
            for (i, w) in weights.iter().enumerate() {
                product *= layer_jacobian(&trace.layer_outputs()[i + 1], w).unwrap().norm();
            }
            prop_assert!(full <= product * (1.0 + 1e-9) + 1e-12);
        }

        #[test]
        fn prop_penalties_nonnegative(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
            let widths = random_widths(&mut rng, 6, 3);
            let (weights, biases) = random_encoder(&mut rng, &widths, 1.5);
            let x0 = random_matrix(&mut rng, 3, widths[0], 1.0);
            let trace = forward(&x0, &weights, &biases);

            let deep = deepcae_penalty(&trace, &weights).unwrap();
            let stacked = stacked_penalty(&trace, &weights).unwrap();
            prop_assert!(deep.value() >= 0.0);
            prop_assert!(stacked.value() >= 0.0);
            prop_assert!(deep.per_sample().iter().all(|&v| v >= 0.0));
            prop_assert!(stacked.per_sample().iter().all(|&v| v >= 0.0));
        }
    }
}
