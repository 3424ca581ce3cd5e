//! Autoencoder variants and the linear-PCA baseline.
//!
//! All models share the same bones: a stack of affine layers with
//! tanh after every layer, encoder widths shrinking from the input
//! dimension to the embedding dimension, and a decoder mirroring the
//! encoder widths in reverse. The variants differ only in which
//! contractive penalty (if any) is added to the reconstruction loss:
//!
//! * `Standard`: reconstruction only.
//! * `DeepCae`: the exact full-encoder Jacobian penalty.
//! * `StackedCae`: the summed per-layer penalty.
//!
//! [`PcaBaseline`] provides the linear reference reconstruction used
//! to normalize scores across datasets.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::penalty::{
    self, build_deepcae_penalty, build_stacked_penalty, ForwardTrace,
};
use crate::tensor::{Matrix, Tape, VarRef};

/// On-disk model container version.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Which loss the model trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Standard,
    #[serde(rename = "deepcae")]
    DeepCae,
    StackedCae,
}

/// Smallest penalty weight applied when a contractive variant is
/// configured; values below it are raised at the configuration
/// boundary (direct library calls may still train at exactly zero).
pub const LAMBDA_FLOOR: f64 = 1e-8;

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Standard, Variant::DeepCae, Variant::StackedCae];

    /// Apply the configuration-level floor: contractive variants
    /// never search or benchmark below [`LAMBDA_FLOOR`]; the standard
    /// variant ignores lambda entirely.
    pub fn floor_lambda(&self, lambda: f64) -> f64 {
        match self {
            Variant::Standard => lambda,
            _ => lambda.max(LAMBDA_FLOOR),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Standard => "standard",
            Variant::DeepCae => "deepcae",
            Variant::StackedCae => "stacked_cae",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Variant::Standard),
            "deepcae" => Ok(Variant::DeepCae),
            "stacked_cae" | "stacked" => Ok(Variant::StackedCae),
            other => Err(Error::Config(format!(
                "unknown variant {other:?}; expected standard, deepcae, or stacked"
            ))),
        }
    }
}

/// Architecture of the encoder half.
///
/// The embedding width is `round(input_dim * compression_rate)` with
/// a floor of 1; intermediate widths interpolate linearly between the
/// input and the embedding (so for two layers the hidden width is the
/// average), rounding halves up. Widths never increase toward the
/// embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    input_dim: usize,
    embedding_dim: usize,
    num_layers: usize,
    compression_rate: f64,
}

impl EncoderSpec {
    pub fn new(input_dim: usize, compression_rate: f64, num_layers: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Config("input_dim must be at least 1".into()));
        }
        if num_layers == 0 {
            return Err(Error::Config("num_layers must be at least 1".into()));
        }
        if !compression_rate.is_finite() || compression_rate <= 0.0 || compression_rate > 1.0 {
            return Err(Error::Config(format!(
                "compression_rate must lie in (0, 1], got {compression_rate}"
            )));
        }
        let embedding_dim = ((input_dim as f64 * compression_rate).round() as usize).max(1);
        Ok(Self {
            input_dim,
            embedding_dim,
            num_layers,
            compression_rate,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn compression_rate(&self) -> f64 {
        self.compression_rate
    }

    /// Layer widths from input to embedding, length `num_layers + 1`.
    pub fn widths(&self) -> Vec<usize> {
        let k = self.num_layers;
        let d_x = self.input_dim as f64;
        let d_h = self.embedding_dim as f64;
        (0..=k)
            .map(|i| {
                let w = d_x + (d_h - d_x) * i as f64 / k as f64;
                (w.round() as usize).max(1)
            })
            .collect()
    }
}

/// One affine layer: `W` is output-by-input, `b` a 1-by-output row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub w: Matrix,
    pub b: Matrix,
}

impl LayerParams {
    pub fn new(w: Matrix, b: Matrix) -> Result<Self> {
        if b.rows() != 1 || b.cols() != w.rows() {
            return Err(Error::Shape {
                op: "layer params",
                left: format!("{}x{}", w.rows(), w.cols()),
                right: format!("{}x{}", b.rows(), b.cols()),
            });
        }
        Ok(Self { w, b })
    }

    pub fn output_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }
}

/// Evaluated loss components; `total = recon + lambda * penalty` with
/// the model's effective lambda.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub recon: f64,
    pub penalty: f64,
}

/// Per-layer (weight, bias) parameter nodes plus the activation node
/// each layer produced.
type StackRefs = (Vec<(VarRef, VarRef)>, Vec<VarRef>);

/// Tape nodes produced by [`AutoencoderModel::build_loss`], exposing
/// every parameter node so an optimizer can fetch gradients and the
/// loss heads for reporting.
#[derive(Debug)]
pub struct TapeBindings {
    pub encoder: Vec<(VarRef, VarRef)>,
    pub decoder: Vec<(VarRef, VarRef)>,
    pub embedding: VarRef,
    pub reconstruction: VarRef,
    pub total: VarRef,
    pub recon: VarRef,
    /// Present only when a penalty subgraph was recorded (effective
    /// lambda nonzero). With lambda zero the tape is structurally
    /// identical to a reconstruction-only model's tape.
    pub penalty: Option<VarRef>,
}

impl TapeBindings {
    /// All parameter nodes, encoder first, weights before biases, in
    /// layer order. The order is stable so optimizer state can be
    /// indexed positionally.
    pub fn param_refs(&self) -> Vec<VarRef> {
        self.encoder
            .iter()
            .chain(self.decoder.iter())
            .flat_map(|(w, b)| [*w, *b])
            .collect()
    }
}

/// A symmetric encoder/decoder pair with an optional contractive
/// penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderModel {
    pub variant: Variant,
    pub spec: EncoderSpec,
    pub encoder: Vec<LayerParams>,
    pub decoder: Vec<LayerParams>,
    pub lambda: f64,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    model: AutoencoderModel,
}

impl AutoencoderModel {
    /// Deterministic initialization: uniform weights with the
    /// Xavier bound `sqrt(6 / (fan_in + fan_out))`, zero biases.
    /// The same seed always produces bitwise-identical parameters.
    pub fn init(spec: EncoderSpec, variant: Variant, lambda: f64, seed: u64) -> Result<Self> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be finite and nonnegative, got {lambda}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = spec.widths();
        let mut draw_stack = |dims: &[usize]| -> Vec<LayerParams> {
            dims.windows(2)
                .map(|pair| {
                    let (d_in, d_out) = (pair[0], pair[1]);
                    let bound = (6.0 / (d_in + d_out) as f64).sqrt();
                    let w = Matrix::from_fn(d_out, d_in, |_, _| rng.gen_range(-bound..bound));
                    LayerParams {
                        w,
                        b: Matrix::zeros(1, d_out),
                    }
                })
                .collect()
        };
        let encoder = draw_stack(&widths);
        let rev: Vec<usize> = widths.iter().rev().copied().collect();
        let decoder = draw_stack(&rev);
        Ok(Self {
            variant,
            spec,
            encoder,
            decoder,
            lambda,
        })
    }

    /// Lambda actually applied in the loss: the standard variant
    /// always trains penalty-free.
    pub fn effective_lambda(&self) -> f64 {
        match self.variant {
            Variant::Standard => 0.0,
            _ => self.lambda,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn embedding_dim(&self) -> usize {
        self.spec.embedding_dim()
    }

    /// Encoder weight matrices in layer order, cloned for use with
    /// the pure penalty functions.
    pub fn encoder_weights(&self) -> Vec<Matrix> {
        self.encoder.iter().map(|l| l.w.clone()).collect()
    }

    fn forward(layers: &[LayerParams], x: &Matrix) -> Result<Vec<Matrix>> {
        let ones = Matrix::filled(x.rows(), 1, 1.0);
        let mut outputs = Vec::with_capacity(layers.len());
        let mut cur = x.clone();
        for layer in layers {
            if cur.cols() != layer.input_dim() {
                return Err(Error::Shape {
                    op: "forward",
                    left: format!("{}x{}", cur.rows(), cur.cols()),
                    right: format!("{}x{}", layer.w.rows(), layer.w.cols()),
                });
            }
            let z = cur.matmul(&layer.w.transpose())?.add(&ones.matmul(&layer.b)?)?;
            cur = z.map(f64::tanh);
            outputs.push(cur.clone());
        }
        Ok(outputs)
    }

    /// Run the encoder, returning the embedding and the per-layer
    /// activation trace the penalties need.
    pub fn encode(&self, x: &Matrix) -> Result<(Matrix, ForwardTrace)> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "encode",
                left: format!("{}x{}", x.rows(), x.cols()),
                right: format!("input_dim {}", self.input_dim()),
            });
        }
        let mut outputs = vec![x.clone()];
        outputs.extend(Self::forward(&self.encoder, x)?);
        let embedding = outputs.last().expect("encoder has layers").clone();
        Ok((embedding, ForwardTrace::new(outputs)?))
    }

    /// Run the decoder on embeddings; output lands in [-1, 1] by the
    /// final tanh.
    pub fn decode(&self, z: &Matrix) -> Result<Matrix> {
        if z.cols() != self.embedding_dim() {
            return Err(Error::Shape {
                op: "decode",
                left: format!("{}x{}", z.rows(), z.cols()),
                right: format!("embedding_dim {}", self.embedding_dim()),
            });
        }
        Ok(Self::forward(&self.decoder, z)?
            .pop()
            .expect("decoder has layers"))
    }

    /// Encode then decode.
    pub fn reconstruct(&self, x: &Matrix) -> Result<Matrix> {
        let (z, _) = self.encode(x)?;
        self.decode(&z)
    }

    /// Record the full loss on a tape: reconstruction error plus the
    /// variant's penalty scaled by the effective lambda.
    ///
    /// When the effective lambda is zero no penalty subgraph is
    /// recorded at all, so a `DeepCae` model at lambda zero produces
    /// exactly the same tape, values, and gradients as a `Standard`
    /// one with the same parameters.
    pub fn build_loss(&self, tape: &mut Tape, x: &Matrix) -> Result<TapeBindings> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "build_loss",
                left: format!("{}x{}", x.rows(), x.cols()),
                right: format!("input_dim {}", self.input_dim()),
            });
        }
        let batch = x.rows();
        let x_ref = tape.leaf(x.clone());
        let ones = tape.leaf(Matrix::filled(batch, 1, 1.0));

        let record_stack = |tape: &mut Tape,
                                layers: &[LayerParams],
                                input: VarRef|
         -> Result<StackRefs> {
            let mut refs = Vec::with_capacity(layers.len());
            let mut activations = Vec::with_capacity(layers.len());
            let mut cur = input;
            for layer in layers {
                let w = tape.parameter(layer.w.clone());
                let b = tape.parameter(layer.b.clone());
                let wt = tape.transpose(w);
                let xw = tape.matmul(cur, wt)?;
                let bias_rows = tape.matmul(ones, b)?;
                let z = tape.add(xw, bias_rows)?;
                cur = tape.tanh(z);
                refs.push((w, b));
                activations.push(cur);
            }
            Ok((refs, activations))
        };

        let (encoder_refs, encoder_acts) = record_stack(tape, &self.encoder, x_ref)?;
        let embedding = *encoder_acts.last().expect("encoder has layers");
        let (decoder_refs, decoder_acts) = record_stack(tape, &self.decoder, embedding)?;
        let reconstruction = *decoder_acts.last().expect("decoder has layers");

        let recon = tape.mse(x_ref, reconstruction)?;
        let lambda = self.effective_lambda();
        let (total, penalty) = if lambda > 0.0 {
            let weights: Vec<VarRef> = encoder_refs.iter().map(|(w, _)| *w).collect();
            let pen = match self.variant {
                Variant::DeepCae => build_deepcae_penalty(tape, &encoder_acts, &weights)?,
                Variant::StackedCae => build_stacked_penalty(tape, &encoder_acts, &weights)?,
                Variant::Standard => unreachable!("standard has effective lambda 0"),
            };
            let scaled = tape.scale(pen, lambda);
            (tape.add(recon, scaled)?, Some(pen))
        } else {
            (recon, None)
        };

        Ok(TapeBindings {
            encoder: encoder_refs,
            decoder: decoder_refs,
            embedding,
            reconstruction,
            total,
            recon,
            penalty,
        })
    }

    /// Evaluate the loss components at the current parameters.
    ///
    /// The penalty field reports the variant's penalty even when the
    /// effective lambda is zero and it contributes nothing to the
    /// total (the standard variant reports zero).
    pub fn loss(&self, x: &Matrix) -> Result<LossValue> {
        let mut tape = Tape::new();
        let nodes = self.build_loss(&mut tape, x)?;
        let recon = tape.value(nodes.recon).scalar();
        let total = tape.value(nodes.total).scalar();
        let penalty = match (nodes.penalty, self.variant) {
            (Some(p), _) => tape.value(p).scalar(),
            (None, Variant::Standard) => 0.0,
            (None, variant) => {
                let (_, trace) = self.encode(x)?;
                let weights = self.encoder_weights();
                match variant {
                    Variant::DeepCae => penalty::deepcae_penalty(&trace, &weights)?.value(),
                    Variant::StackedCae => penalty::stacked_penalty(&trace, &weights)?.value(),
                    Variant::Standard => unreachable!(),
                }
            }
        };
        Ok(LossValue {
            total,
            recon,
            penalty,
        })
    }

    /// Write the model as versioned JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            model: self.clone(),
        };
        crate::ioutil::write_json(path, &file)
    }

    /// Read a model written by [`AutoencoderModel::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ModelFile = serde_json::from_str(&text)?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "unsupported model format_version {} (expected {MODEL_FORMAT_VERSION})",
                file.format_version
            )));
        }
        let model = file.model;
        for (stack, name) in [(&model.encoder, "encoder"), (&model.decoder, "decoder")] {
            for layer in stack.iter() {
                if layer.b.rows() != 1 || layer.b.cols() != layer.w.rows() {
                    return Err(Error::Schema(format!(
                        "{name} layer bias shape {}x{} does not match weight rows {}",
                        layer.b.rows(),
                        layer.b.cols(),
                        layer.w.rows()
                    )));
                }
            }
        }
        Ok(model)
    }
}

/// Mean vector plus leading principal axes fitted on training data.
#[derive(Debug, Clone)]
pub struct PcaBaseline {
    mean: Matrix,
    axes: Matrix,
    eigenvalues: Vec<f64>,
    degenerate: bool,
}

impl PcaBaseline {
    /// Fit by eigendecomposition of the (1/n) covariance matrix.
    /// Eigenvalues are sorted descending; each axis is sign-fixed so
    /// its largest-magnitude entry is positive. If fewer than `m`
    /// axes carry positive variance the remaining axes are an
    /// arbitrary orthonormal completion and the baseline is flagged
    /// degenerate.
    pub fn fit(x: &Matrix, m: usize) -> Result<Self> {
        let (n, d) = x.shape();
        if m == 0 || m > d {
            return Err(Error::InvalidInput(format!(
                "embedding dimension {m} must lie in 1..={d}"
            )));
        }
        let mean = Matrix::from_fn(1, d, |_, j| {
            (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64
        });
        let centered = Matrix::from_fn(n, d, |i, j| x.get(i, j) - mean.get(0, j));
        let cov = centered.transpose().matmul(&centered)?.scale(1.0 / n as f64);

        let dm = nalgebra::DMatrix::from_fn(d, d, |i, j| cov.get(i, j));
        let eig = nalgebra::SymmetricEigen::new(dm);

        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .partial_cmp(&eig.eigenvalues[a])
                .expect("eigenvalues are finite")
        });

        let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let mut axes = Matrix::zeros(d, m);
        for (col, &src) in order.iter().take(m).enumerate() {
            let axis = eig.eigenvectors.column(src);
            let lead = (0..d)
                .max_by(|&a, &b| {
                    axis[a]
                        .abs()
                        .partial_cmp(&axis[b].abs())
                        .expect("axis entries are finite")
                })
                .expect("d >= 1");
            let sign = if axis[lead] < 0.0 { -1.0 } else { 1.0 };
            for i in 0..d {
                axes.set(i, col, sign * axis[i]);
            }
        }

        let tol = 1e-12 * eigenvalues.first().copied().unwrap_or(0.0).max(1.0);
        let positive = eigenvalues.iter().filter(|&&v| v > tol).count();
        Ok(Self {
            mean,
            axes,
            eigenvalues,
            degenerate: positive < m,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.axes.cols()
    }

    /// All eigenvalues of the covariance, descending, not just the
    /// kept ones; the tail is the reconstruction error budget.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn axes(&self) -> &Matrix {
        &self.axes
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// Project onto the kept axes.
    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.cols() {
            return Err(Error::Shape {
                op: "pca embed",
                left: format!("{}x{}", x.rows(), x.cols()),
                right: format!("input_dim {}", self.mean.cols()),
            });
        }
        let centered = Matrix::from_fn(x.rows(), x.cols(), |i, j| {
            x.get(i, j) - self.mean.get(0, j)
        });
        centered.matmul(&self.axes)
    }

    /// Project and lift back, adding the mean.
    pub fn reconstruct(&self, x: &Matrix) -> Result<Matrix> {
        let projected = self.embed(x)?;
        let lifted = projected.matmul(&self.axes.transpose())?;
        Ok(Matrix::from_fn(lifted.rows(), lifted.cols(), |i, j| {
            lifted.get(i, j) + self.mean.get(0, j)
        }))
    }
}
