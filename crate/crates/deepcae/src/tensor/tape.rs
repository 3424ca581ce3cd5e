//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records primitive matrix operations during a forward
//! pass (define-by-run; one tape per mini-batch) and replays them in
//! reverse to accumulate adjoints. The op set is intentionally small:
//! exactly what the autoencoder loss needs. Nodes reference only
//! earlier nodes, so the insertion order is already topological.
//!
//! Everything is sequential `f64` arithmetic: replaying the same tape
//! twice yields bitwise-identical values and gradients.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

static TAPE_IDS: AtomicU64 = AtomicU64::new(0);

/// Handle to a node on a [`Tape`], carrying its shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarRef {
    index: usize,
    rows: usize,
    cols: usize,
    tape: u64,
}

impl VarRef {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    fn shape_string(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }
}

#[derive(Debug)]
enum Op {
    Leaf { parameter: bool },
    MatMul(VarRef, VarRef),
    Add(VarRef, VarRef),
    Scale(VarRef, f64),
    Tanh(VarRef),
    Square(VarRef),
    DiagScale { scale: VarRef, matrix: VarRef },
    Transpose(VarRef),
    Row(VarRef, usize),
    FrobeniusSq(VarRef),
    Mse(VarRef, VarRef),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Recorded forward computation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> VarRef {
        let r = VarRef {
            index: self.nodes.len(),
            rows: value.rows(),
            cols: value.cols(),
            tape: self.id,
        };
        self.nodes.push(Node { value, op });
        r
    }

    fn check_owned(&self, v: VarRef) {
        assert_eq!(v.tape, self.id, "VarRef used on a foreign tape");
    }

    /// Record a constant input; its adjoint is tracked but not a
    /// training parameter.
    pub fn leaf(&mut self, value: Matrix) -> VarRef {
        self.push(value, Op::Leaf { parameter: false })
    }

    /// Record a trainable parameter.
    pub fn parameter(&mut self, value: Matrix) -> VarRef {
        self.push(value, Op::Leaf { parameter: true })
    }

    pub fn value(&self, v: VarRef) -> &Matrix {
        self.check_owned(v);
        &self.nodes[v.index].value
    }

    pub fn is_parameter(&self, v: VarRef) -> bool {
        self.check_owned(v);
        matches!(self.nodes[v.index].op, Op::Leaf { parameter: true })
    }

    pub fn matmul(&mut self, a: VarRef, b: VarRef) -> Result<VarRef> {
        self.check_owned(a);
        self.check_owned(b);
        if a.cols != b.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: a.shape_string(),
                right: b.shape_string(),
            });
        }
        let value = self.nodes[a.index]
            .value
            .matmul(&self.nodes[b.index].value)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: VarRef, b: VarRef) -> Result<VarRef> {
        self.check_owned(a);
        self.check_owned(b);
        if (a.rows, a.cols) != (b.rows, b.cols) {
            return Err(Error::Shape {
                op: "add",
                left: a.shape_string(),
                right: b.shape_string(),
            });
        }
        let value = self.nodes[a.index].value.add(&self.nodes[b.index].value)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: VarRef, factor: f64) -> VarRef {
        self.check_owned(a);
        let value = self.nodes[a.index].value.scale(factor);
        self.push(value, Op::Scale(a, factor))
    }

    /// Elementwise tanh. Backward multiplies the incoming adjoint by
    /// `1 - out^2`, which vanishes cleanly at saturation.
    pub fn tanh(&mut self, a: VarRef) -> VarRef {
        self.check_owned(a);
        let value = self.nodes[a.index].value.map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    /// Elementwise square.
    pub fn square(&mut self, a: VarRef) -> VarRef {
        self.check_owned(a);
        let value = self.nodes[a.index].value.map(|v| v * v);
        self.push(value, Op::Square(a))
    }

    /// `diag(scale) * matrix`: row `i` of `matrix` multiplied by
    /// `scale[0, i]`. `scale` must be a 1xM row vector with M equal to
    /// `matrix.rows`.
    pub fn diag_scale(&mut self, scale: VarRef, matrix: VarRef) -> Result<VarRef> {
        self.check_owned(scale);
        self.check_owned(matrix);
        if scale.rows != 1 || scale.cols != matrix.rows {
            return Err(Error::Shape {
                op: "diag_scale",
                left: scale.shape_string(),
                right: matrix.shape_string(),
            });
        }
        let s = &self.nodes[scale.index].value;
        let m = &self.nodes[matrix.index].value;
        let value = Matrix::from_fn(m.rows(), m.cols(), |i, j| s.get(0, i) * m.get(i, j));
        Ok(self.push(value, Op::DiagScale { scale, matrix }))
    }

    pub fn transpose(&mut self, a: VarRef) -> VarRef {
        self.check_owned(a);
        let value = self.nodes[a.index].value.transpose();
        self.push(value, Op::Transpose(a))
    }

    /// Extract row `i` as a 1xN matrix.
    pub fn row(&mut self, a: VarRef, i: usize) -> Result<VarRef> {
        self.check_owned(a);
        if i >= a.rows {
            return Err(Error::InvalidInput(format!(
                "row {i} out of bounds for {} rows",
                a.rows
            )));
        }
        let value = self.nodes[a.index].value.row(i);
        Ok(self.push(value, Op::Row(a, i)))
    }

    /// Sum of squared entries, as a 1x1 node.
    pub fn frobenius_sq(&mut self, a: VarRef) -> VarRef {
        self.check_owned(a);
        let value = Matrix::filled(1, 1, self.nodes[a.index].value.frobenius_sq());
        self.push(value, Op::FrobeniusSq(a))
    }

    /// Mean of squared entrywise differences, as a 1x1 node.
    pub fn mse(&mut self, a: VarRef, b: VarRef) -> Result<VarRef> {
        self.check_owned(a);
        self.check_owned(b);
        if (a.rows, a.cols) != (b.rows, b.cols) {
            return Err(Error::Shape {
                op: "mse",
                left: a.shape_string(),
                right: b.shape_string(),
            });
        }
        let value = Matrix::filled(
            1,
            1,
            self.nodes[a.index].value.mse(&self.nodes[b.index].value)?,
        );
        Ok(self.push(value, Op::Mse(a, b)))
    }

    /// Propagate adjoints backward from a scalar loss node.
    pub fn backward(&self, loss: VarRef) -> Result<Gradients> {
        self.check_owned(loss);
        if !loss.is_scalar() {
            return Err(Error::InvalidInput(format!(
                "backward requires a scalar loss, got {}",
                loss.shape_string()
            )));
        }
        let mut adjoints: Vec<Matrix> = self
            .nodes
            .iter()
            .map(|n| Matrix::zeros(n.value.rows(), n.value.cols()))
            .collect();
        adjoints[loss.index].set(0, 0, 1.0);

        for idx in (0..=loss.index).rev() {
            match &self.nodes[idx].op {
                Op::Leaf { .. } => {}
                Op::MatMul(a, b) => {
                    let g = adjoints[idx].clone();
                    let av = &self.nodes[a.index].value;
                    let bv = &self.nodes[b.index].value;
                    let da = g.matmul(&bv.transpose()).expect("matmul backward");
                    let db = av.transpose().matmul(&g).expect("matmul backward");
                    accumulate(&mut adjoints[a.index], &da);
                    accumulate(&mut adjoints[b.index], &db);
                }
                Op::Add(a, b) => {
                    let g = adjoints[idx].clone();
                    accumulate(&mut adjoints[a.index], &g);
                    accumulate(&mut adjoints[b.index], &g);
                }
                Op::Scale(a, factor) => {
                    let da = adjoints[idx].scale(*factor);
                    accumulate(&mut adjoints[a.index], &da);
                }
                Op::Tanh(a) => {
                    let out = &self.nodes[idx].value;
                    let g = &adjoints[idx];
                    let da = Matrix::from_fn(out.rows(), out.cols(), |i, j| {
                        let y = out.get(i, j);
                        g.get(i, j) * (1.0 - y * y)
                    });
                    accumulate(&mut adjoints[a.index], &da);
                }
                Op::Square(a) => {
                    let av = &self.nodes[a.index].value;
                    let g = &adjoints[idx];
                    let da = Matrix::from_fn(av.rows(), av.cols(), |i, j| {
                        2.0 * av.get(i, j) * g.get(i, j)
                    });
                    accumulate(&mut adjoints[a.index], &da);
                }
                Op::DiagScale { scale, matrix } => {
                    let s = &self.nodes[scale.index].value;
                    let m = &self.nodes[matrix.index].value;
                    let g = &adjoints[idx];
                    let dm = Matrix::from_fn(m.rows(), m.cols(), |i, j| {
                        s.get(0, i) * g.get(i, j)
                    });
                    let ds = Matrix::from_fn(1, m.rows(), |_, i| {
                        (0..m.cols()).map(|j| m.get(i, j) * g.get(i, j)).sum()
                    });
                    accumulate(&mut adjoints[matrix.index], &dm);
                    accumulate(&mut adjoints[scale.index], &ds);
                }
                Op::Transpose(a) => {
                    let da = adjoints[idx].transpose();
                    accumulate(&mut adjoints[a.index], &da);
                }
                Op::Row(a, i) => {
                    let g = adjoints[idx].clone();
                    let dst = &mut adjoints[a.index];
                    for j in 0..g.cols() {
                        let v = dst.get(*i, j) + g.get(0, j);
                        dst.set(*i, j, v);
                    }
                }
                Op::FrobeniusSq(a) => {
                    let g = adjoints[idx].scalar();
                    let av = &self.nodes[a.index].value;
                    let da = av.scale(2.0 * g);
                    accumulate(&mut adjoints[a.index], &da);
                }
                Op::Mse(a, b) => {
                    let g = adjoints[idx].scalar();
                    let av = &self.nodes[a.index].value;
                    let bv = &self.nodes[b.index].value;
                    let n = av.len() as f64;
                    let da = Matrix::from_fn(av.rows(), av.cols(), |i, j| {
                        2.0 * (av.get(i, j) - bv.get(i, j)) * g / n
                    });
                    let db = da.scale(-1.0);
                    accumulate(&mut adjoints[a.index], &da);
                    accumulate(&mut adjoints[b.index], &db);
                }
            }
        }

        Ok(Gradients {
            tape: self.id,
            adjoints,
        })
    }
}

fn accumulate(dst: &mut Matrix, src: &Matrix) {
    debug_assert_eq!(dst.shape(), src.shape());
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

/// Adjoints produced by [`Tape::backward`], queryable per node.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    adjoints: Vec<Matrix>,
}

impl Gradients {
    /// Gradient of the loss with respect to the node `v`.
    pub fn wrt(&self, v: VarRef) -> &Matrix {
        assert_eq!(v.tape, self.tape, "VarRef from a different tape");
        &self.adjoints[v.index]
    }
}
