//! Reverse-mode computation graph (eager tape).
//!
//! Ops append nodes to a [`Graph`]; [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients. The op set is fixed: add, multiply,
//! matrix product, logistic, exponential, logarithm, square, sum/mean
//! reductions, max-with-index, concatenation, and broadcast, plus fused
//! softplus, clamp, and constant-affine kernels.
//!
//! Every op validates shapes and scans its output for non-finite values, so
//! a NaN/Inf surfaces as an error naming the op that produced it.

use super::gemm;
use super::{NumericsError, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

/// Checkpoint of a [`Graph`]'s tape length (see [`Graph::mark`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GraphMark(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(VarId, VarId),
    Mul(VarId, VarId),
    MatMul(VarId, VarId),
    /// Repeat a vector as every row of an `n`-row matrix.
    BroadcastRows(VarId, usize),
    /// Flatten-and-concatenate into one vector.
    Concat(Vec<VarId>),
    Logistic(VarId),
    Softplus(VarId),
    Exp(VarId),
    Ln(VarId),
    Square(VarId),
    Clamp(VarId, f64, f64),
    /// Elementwise `a·x + b` with constants; only the scale `a` matters to
    /// the backward pass, so the shift is not recorded.
    AffineConst(VarId, f64),
    SumAll(VarId),
    MeanAll(VarId),
    /// Column means of a matrix: `[n×m] → [m]`.
    MeanRows(VarId),
    /// Maximum element (ties → lowest index); the index is recorded.
    MaxIndex(VarId, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::MatMul(..) => "matmul",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::Concat(..) => "concat",
            Op::Logistic(..) => "logistic",
            Op::Softplus(..) => "softplus",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Square(..) => "square",
            Op::Clamp(..) => "clamp",
            Op::AffineConst(..) => "affine_const",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::MeanRows(..) => "mean_rows",
            Op::MaxIndex(..) => "max_index",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Eager reverse-mode tape. Single-threaded during forward/backward.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// Numerically stable logistic function.
pub fn logistic_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softplus ln(1 + eˣ).
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<VarId, NumericsError> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.grads.push(None);
        Ok(VarId(self.nodes.len() - 1))
    }

    /// Registers a leaf tensor. Gradients are tracked iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<VarId, NumericsError> {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Leaf that participates in gradients (a trainable parameter).
    pub fn param(&mut self, value: Tensor) -> Result<VarId, NumericsError> {
        self.leaf(value, true)
    }

    /// Leaf excluded from gradients (data, noise, targets).
    pub fn constant(&mut self, value: Tensor) -> Result<VarId, NumericsError> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Checkpoint of the current tape length. With [`Graph::truncate_to`]
    /// this lets one graph re-evaluate a function many times without
    /// re-registering its leaves (the finite-difference workhorse).
    pub fn mark(&self) -> GraphMark {
        GraphMark(self.nodes.len())
    }

    /// Drops every node recorded after `mark` and clears all gradients.
    /// Handles issued before the mark stay valid; later ones must not be
    /// used again.
    pub fn truncate_to(&mut self, mark: GraphMark) {
        self.nodes.truncate(mark.0);
        self.grads.truncate(mark.0);
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Overwrites one coordinate of a leaf's value in place (used by
    /// finite-difference probes). Rejects non-leaf nodes, out-of-range
    /// coordinates, and non-finite values.
    pub fn set_leaf_coord(
        &mut self,
        v: VarId,
        coord: usize,
        value: f64,
    ) -> Result<(), NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: "set_leaf_coord" });
        }
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(NumericsError::InvalidArgument(format!(
                "set_leaf_coord target must be a leaf, got {}",
                node.op.name()
            )));
        }
        match node.value.data_mut().get_mut(coord) {
            Some(x) => {
                *x = value;
                Ok(())
            }
            None => Err(NumericsError::InvalidArgument(format!(
                "set_leaf_coord coordinate {coord} is out of range"
            ))),
        }
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if any reached it.
    pub fn grad(&self, v: VarId) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, with zeros when the loss does not reach it.
    pub fn grad_or_zeros(&self, v: VarId) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape().to_vec()))
    }

    fn rg(&self, v: VarId) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn binary_same_shape(
        &mut self,
        a: VarId,
        b: VarId,
        context: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<VarId, NumericsError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(NumericsError::ShapeMismatch {
                context,
                expected: va.shape().to_vec(),
                got: vb.shape().to_vec(),
            });
        }
        let data = va.iter().zip(vb.iter()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(op, value, rg)
    }

    fn unary(
        &mut self,
        a: VarId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<VarId, NumericsError> {
        let va = &self.nodes[a.0].value;
        let data = va.iter().map(|&x| f(x)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(op, value, rg)
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `a − b`, composed from the affine and add kernels.
    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        let nb = self.affine(b, -1.0, 0.0)?;
        self.add(a, nb)
    }

    /// Matrix product. Rank-1 tensors act as single-row matrices; the result
    /// is always a matrix `[rows(a) × cols(b)]`.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, k, k2, p) = (va.rows(), va.cols(), vb.rows(), vb.cols());
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                context: "matmul inner dimension",
                expected: vec![n, k],
                got: vec![k2, p],
            });
        }
        let mut out = vec![0.0; n * p];
        gemm::matmul(n, k, p, va.data(), vb.data(), &mut out);
        let value = Tensor::new(vec![n, p], out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Op::MatMul(a, b), value, rg)
    }

    /// Repeats vector `v` as each of `n` rows: `[m] → [n×m]`.
    pub fn broadcast_rows(&mut self, v: VarId, n: usize) -> Result<VarId, NumericsError> {
        let vv = &self.nodes[v.0].value;
        if vv.shape().len() != 1 || n == 0 {
            return Err(NumericsError::ShapeMismatch {
                context: "broadcast_rows takes a vector and n ≥ 1",
                expected: vec![vv.len()],
                got: vv.shape().to_vec(),
            });
        }
        let m = vv.len();
        let mut data = Vec::with_capacity(n * m);
        for _ in 0..n {
            data.extend_from_slice(vv.data());
        }
        let rg = self.rg(v);
        self.push(Op::BroadcastRows(v, n), Tensor::new(vec![n, m], data)?, rg)
    }

    /// Flattens and concatenates the inputs into one vector.
    pub fn concat(&mut self, parts: &[VarId]) -> Result<VarId, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::InvalidArgument(
                "concat needs at least one input".into(),
            ));
        }
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
            rg |= self.rg(p);
        }
        let n = data.len();
        self.push(Op::Concat(parts.to_vec()), Tensor::new(vec![n], data)?, rg)
    }

    /// Elementwise logistic function 1/(1+e⁻ˣ).
    pub fn logistic(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        self.unary(a, logistic_scalar, Op::Logistic(a))
    }

    /// Elementwise softplus ln(1+eˣ) (smooth ramp).
    pub fn softplus(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        self.unary(a, softplus_scalar, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn square(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Elementwise clamp into `[lo, hi]`; gradient passes inside the range.
    pub fn clamp(&mut self, a: VarId, lo: f64, hi: f64) -> Result<VarId, NumericsError> {
        if !(lo <= hi) {
            return Err(NumericsError::InvalidArgument(format!(
                "clamp bounds inverted: [{lo}, {hi}]"
            )));
        }
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Elementwise `scale·x + shift` with constants.
    pub fn affine(&mut self, a: VarId, scale: f64, shift: f64) -> Result<VarId, NumericsError> {
        self.unary(a, |x| scale * x + shift, Op::AffineConst(a, scale))
    }

    /// Sum of all elements → scalar.
    pub fn sum_all(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        let s: f64 = self.nodes[a.0].value.iter().sum();
        let rg = self.rg(a);
        self.push(Op::SumAll(a), Tensor::scalar(s), rg)
    }

    /// Mean of all elements → scalar.
    pub fn mean_all(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        let v = &self.nodes[a.0].value;
        let s: f64 = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Op::MeanAll(a), Tensor::scalar(s), rg)
    }

    /// Column means of a matrix: `[n×m] → [m]`.
    pub fn mean_rows(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        let v = &self.nodes[a.0].value;
        if v.shape().len() != 2 {
            return Err(NumericsError::ShapeMismatch {
                context: "mean_rows takes a matrix",
                expected: vec![0, 0],
                got: v.shape().to_vec(),
            });
        }
        let (n, m) = (v.rows(), v.cols());
        let mut out = vec![0.0; m];
        for i in 0..n {
            let row = &v.data()[i * m..(i + 1) * m];
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let rg = self.rg(a);
        self.push(Op::MeanRows(a), Tensor::vector(out), rg)
    }

    /// Maximum element as a scalar plus its flat index; ties take the lowest
    /// index. Gradient flows only to the argmax element.
    pub fn max_index(&mut self, a: VarId) -> Result<(VarId, usize), NumericsError> {
        let v = &self.nodes[a.0].value;
        let mut idx = 0;
        let mut best = v.data()[0];
        for (i, &x) in v.iter().enumerate().skip(1) {
            if x > best {
                best = x;
                idx = i;
            }
        }
        let rg = self.rg(a);
        let var = self.push(Op::MaxIndex(a, idx), Tensor::scalar(best), rg)?;
        Ok((var, idx))
    }

    /// Reverse-mode gradient of a scalar `loss` w.r.t. every reachable node.
    pub fn backward(&mut self, loss: VarId) -> Result<(), NumericsError> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(NumericsError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if !g.all_finite() {
                return Err(NumericsError::NonFinite {
                    op: self.nodes[i].op.name(),
                });
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(a, g.data(), |_, gi| gi);
                    self.accumulate(b, g.data(), |_, gi| gi);
                }
                Op::Mul(a, b) => {
                    let vb = self.nodes[b.0].value.clone();
                    let va = self.nodes[a.0].value.clone();
                    self.accumulate(a, g.data(), |j, gi| gi * vb.data()[j]);
                    self.accumulate(b, g.data(), |j, gi| gi * va.data()[j]);
                }
                Op::MatMul(a, b) => {
                    let (n, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                    let p = self.nodes[b.0].value.cols();
                    if self.rg(a) {
                        let vb = self.nodes[b.0].value.clone();
                        let ga = self.grad_buf(a);
                        gemm::matmul_a_bt_accum(n, p, k, g.data(), vb.data(), ga.data_mut());
                    }
                    if self.rg(b) {
                        let va = self.nodes[a.0].value.clone();
                        let gb = self.grad_buf(b);
                        gemm::matmul_at_b_accum(n, k, p, va.data(), g.data(), gb.data_mut());
                    }
                }
                Op::BroadcastRows(v, n) => {
                    if self.rg(v) {
                        let m = self.nodes[v.0].value.len();
                        let gv = self.grad_buf(v);
                        for r in 0..n {
                            let row = &g.data()[r * m..(r + 1) * m];
                            for (o, x) in gv.data_mut().iter_mut().zip(row) {
                                *o += x;
                            }
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.nodes[p.0].value.len();
                        let seg = g.data()[off..off + len].to_vec();
                        self.accumulate(p, &seg, |_, gi| gi);
                        off += len;
                    }
                }
                Op::Logistic(a) => {
                    let y = self.nodes[i].value.clone();
                    self.accumulate(a, g.data(), |j, gi| {
                        let s = y.data()[j];
                        gi * s * (1.0 - s)
                    });
                }
                Op::Softplus(a) => {
                    let va = self.nodes[a.0].value.clone();
                    self.accumulate(a, g.data(), |j, gi| gi * logistic_scalar(va.data()[j]));
                }
                Op::Exp(a) => {
                    let y = self.nodes[i].value.clone();
                    self.accumulate(a, g.data(), |j, gi| gi * y.data()[j]);
                }
                Op::Ln(a) => {
                    let va = self.nodes[a.0].value.clone();
                    self.accumulate(a, g.data(), |j, gi| gi / va.data()[j]);
                }
                Op::Square(a) => {
                    let va = self.nodes[a.0].value.clone();
                    self.accumulate(a, g.data(), |j, gi| gi * 2.0 * va.data()[j]);
                }
                Op::Clamp(a, lo, hi) => {
                    let va = self.nodes[a.0].value.clone();
                    self.accumulate(a, g.data(), |j, gi| {
                        let x = va.data()[j];
                        if (lo..=hi).contains(&x) {
                            gi
                        } else {
                            0.0
                        }
                    });
                }
                Op::AffineConst(a, scale) => {
                    self.accumulate(a, g.data(), |_, gi| gi * scale);
                }
                Op::SumAll(a) => {
                    let gi = g.item();
                    if self.rg(a) {
                        let ga = self.grad_buf(a);
                        for o in ga.data_mut() {
                            *o += gi;
                        }
                    }
                }
                Op::MeanAll(a) => {
                    let gi = g.item() / self.nodes[a.0].value.len() as f64;
                    if self.rg(a) {
                        let ga = self.grad_buf(a);
                        for o in ga.data_mut() {
                            *o += gi;
                        }
                    }
                }
                Op::MeanRows(a) => {
                    if self.rg(a) {
                        let n = self.nodes[a.0].value.rows();
                        let m = self.nodes[a.0].value.cols();
                        let ga = self.grad_buf(a);
                        for r in 0..n {
                            let row = &mut ga.data_mut()[r * m..(r + 1) * m];
                            for (o, x) in row.iter_mut().zip(g.data()) {
                                *o += x / n as f64;
                            }
                        }
                    }
                }
                Op::MaxIndex(a, idx) => {
                    let gi = g.item();
                    if self.rg(a) {
                        let ga = self.grad_buf(a);
                        ga.data_mut()[idx] += gi;
                    }
                }
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Mutable gradient buffer for `v`, created zeroed on first touch.
    fn grad_buf(&mut self, v: VarId) -> &mut Tensor {
        let shape = self.nodes[v.0].value.shape().to_vec();
        self.grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
    }

    /// Adds `f(j, upstream[j])` into the gradient of `v`, elementwise.
    fn accumulate(&mut self, v: VarId, upstream: &[f64], f: impl Fn(usize, f64) -> f64) {
        if !self.rg(v) {
            return;
        }
        let gv = self.grad_buf(v);
        for (j, (o, &gi)) in gv.data_mut().iter_mut().zip(upstream).enumerate() {
            *o += f(j, gi);
        }
    }
}
