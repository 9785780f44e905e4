//! Network building blocks shared by the value-space forward passes
//! (prediction, evaluation) and the tape forward passes (training).

use rand::RngExt;
use rand_chacha::ChaCha12Rng;

use crate::numerics::{gemm, Graph, NumericsError, Tensor, VarId};

/// Fully connected layer; weights are `[in×out]` so activations multiply
/// from the left as row vectors, bias is `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    /// Fan-in-scaled uniform weights `U(−1/√in, 1/√in)`, zero bias.
    pub fn fan_in(in_dim: usize, out_dim: usize, rng: &mut ChaCha12Rng) -> Self {
        let lim = 1.0 / (in_dim as f64).sqrt();
        let w: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-lim..lim))
            .collect();
        Self {
            w: Tensor::new(vec![in_dim, out_dim], w).expect("consistent shape"),
            b: Tensor::zeros(vec![out_dim]),
        }
    }

    /// All-zero layer (used for final heads and the classifier).
    pub fn zeroed(in_dim: usize, out_dim: usize) -> Self {
        Self {
            w: Tensor::zeros(vec![in_dim, out_dim]),
            b: Tensor::zeros(vec![out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.cols()
    }

    /// `[n×in] → [n×out]` without the tape.
    pub fn forward_value(&self, x: &Tensor) -> Tensor {
        let (n, k) = (x.rows(), x.cols());
        let out_dim = self.out_dim();
        debug_assert_eq!(k, self.in_dim());
        let mut out = vec![0.0; n * out_dim];
        gemm::matmul(n, k, out_dim, x.data(), self.w.data(), &mut out);
        for row in out.chunks_exact_mut(out_dim) {
            for (o, b) in row.iter_mut().zip(self.b.data()) {
                *o += b;
            }
        }
        Tensor::new(vec![n, out_dim], out).expect("consistent shape")
    }

    pub fn register(&self, g: &mut Graph) -> Result<LinearVars, NumericsError> {
        Ok(LinearVars {
            w: g.param(self.w.clone())?,
            b: g.param(self.b.clone())?,
        })
    }
}

/// Tape handles for one registered [`Linear`].
#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearVars {
    pub w: VarId,
    pub b: VarId,
}

impl LinearVars {
    /// `[n×in] → [n×out]` on the tape.
    pub fn forward(&self, g: &mut Graph, x: VarId) -> Result<VarId, NumericsError> {
        let n = g.value(x).rows();
        let xw = g.matmul(x, self.w)?;
        let bb = g.broadcast_rows(self.b, n)?;
        g.add(xw, bb)
    }
}

pub(crate) fn map_tensor(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.iter().map(|&x| f(x)).collect())
        .expect("same shape as input")
}

/// Column means of a matrix with each column's addends summed in sorted
/// order, making the result exactly invariant to row permutations.
pub(crate) fn mean_rows_sorted(x: &Tensor) -> Tensor {
    let (n, m) = (x.rows(), x.cols());
    let mut out = vec![0.0; m];
    let mut column = vec![0.0; n];
    for (j, o) in out.iter_mut().enumerate() {
        for (i, c) in column.iter_mut().enumerate() {
            *c = x.data()[i * m + j];
        }
        column.sort_by(f64::total_cmp);
        *o = column.iter().sum::<f64>() / n as f64;
    }
    Tensor::vector(out)
}
