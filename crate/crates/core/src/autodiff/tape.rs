//! Reverse-mode gradient tape over the small fixed set of operations the
//! ranker uses.
//!
//! Every operation appends a node holding its forward value; `backward` walks
//! the list in reverse and only visits nodes that transitively depend on a
//! parameter. Piecewise-smooth operations (ReLU, hinge, and externally
//! recorded discrete choices such as sort orders) feed a fingerprint so
//! finite-difference checks can detect when a perturbation crossed a kink.

use std::collections::HashMap;

use super::params::ParamStore;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    ScaleBy(Var, Var),
    MulConst(Var, Tensor),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Transpose(Var),
    MeanRows(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RowDot(Var, Var),
    Sum(Var),
    SumSquares(Var),
    PairwiseLogistic {
        scores: Var,
        pairs: Vec<(usize, usize, f64)>,
        denom: f64,
    },
    MeanSquaredError {
        pred: Var,
        target: Vec<f64>,
    },
    WeightedSqDist {
        x: Var,
        center: Tensor,
        weights: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    fingerprint: u64,
}

/// Gradients of one scalar root with respect to every tape node.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

const FP_PRIME: u64 = 0x0000_0100_0000_01B3;

impl Tape {
    pub fn new() -> Self {
        Self {
            fingerprint: 0xcbf2_9ce4_8422_2325,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Hash of every piecewise branch taken so far.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    /// Folds an external discrete decision into the fingerprint.
    pub fn record_decision(&mut self, bits: u64) {
        self.fingerprint = (self.fingerprint ^ bits).wrapping_mul(FP_PRIME);
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{op:?}").chars().take(40).collect()));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a named parameter. Repeated calls return the same node.
    /// A free input that receives a gradient, for values computed elsewhere.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Like [`Tape::param`] but the leaf is a constant (no gradient flows).
    pub fn frozen_param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        Ok(self.constant(store.get(name)?.clone()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `x [n x m] + b [m]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let m = xv.cols();
        if bv.len() != m {
            return Err(Error::shape("add_row", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        for row in out.values_mut().chunks_mut(m) {
            for (o, bb) in row.iter_mut().zip(bv.values()) {
                *o += bb;
            }
        }
        let ng = self.ng(&[x, b]);
        self.push(out, Op::AddRow(x, b), ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * k);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, k), ng)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        let ng = self.ng(&[a]);
        self.push(out, Op::Offset(a), ng)
    }

    /// `a * s` where `s` is a one-element node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("scale_by", self.value(a).shape(), self.value(s).shape()));
        }
        let k = self.value(s).item();
        let out = self.value(a).map(|x| x * k);
        let ng = self.ng(&[a, s]);
        self.push(out, Op::ScaleBy(a, s), ng)
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        if self.value(a).shape() != mask.shape() {
            return Err(Error::shape("mul_const", self.value(a).shape(), mask.shape()));
        }
        let out = self.value(a).zip_map(&mask, |x, m| x * m);
        let ng = self.ng(&[a]);
        self.push(out, Op::MulConst(a, mask), ng)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let mut fp = self.fingerprint;
        let out = self.value(a).map(|x| x.max(0.0));
        for &x in self.value(a).values() {
            fp = (fp ^ u64::from(x > 0.0)).wrapping_mul(FP_PRIME);
        }
        self.fingerprint = fp;
        let ng = self.ng(&[a]);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let m = av.cols();
        let mut out = av.clone();
        for row in out.values_mut().chunks_mut(m) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let ng = self.ng(&[a]);
        self.push(out, Op::SoftmaxRows(a), ng)
    }

    /// Row-wise layer normalization with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let m = xv.cols();
        if self.value(gamma).len() != m || self.value(beta).len() != m {
            return Err(Error::shape("layer_norm", xv.shape(), self.value(gamma).shape()));
        }
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for row in xhat.values_mut().chunks_mut(m) {
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let (g, b) = (self.value(gamma).values(), self.value(beta).values());
        let mut out = xhat.clone();
        for row in out.values_mut().chunks_mut(m) {
            for ((o, gg), bb) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gg + bb;
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        let ng = self.ng(&[a]);
        self.push(out, Op::Transpose(a), ng)
    }

    /// Column means, `[n x m] -> [1 x m]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (n, m) = (av.rows(), av.cols());
        if n == 0 {
            return Err(Error::EmptyBatch("mean_rows"));
        }
        let mut out = vec![0.0; m];
        for row in av.values().chunks(m) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let ng = self.ng(&[a]);
        self.push(Tensor::row(out), Op::MeanRows(a), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, m) = (xv.rows(), xv.cols());
        if start + len > m {
            return Err(Error::shape("slice_cols", xv.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(n * len);
        for row in xv.values().chunks(m) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::matrix(n, len, out)?, Op::SliceCols { x, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts
            .first()
            .map(|p| self.value(*p).rows())
            .ok_or(Error::EmptyBatch("concat_cols"))?;
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for p in parts {
                let pv = self.value(*p);
                if pv.rows() != n {
                    return Err(Error::shape("concat_cols", &[n], pv.shape()));
                }
                out.extend_from_slice(pv.row_slice(r));
            }
        }
        let ng = self.ng(parts);
        self.push(Tensor::matrix(n, total, out)?, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts
            .first()
            .map(|p| self.value(*p).cols())
            .ok_or(Error::EmptyBatch("concat_rows"))?;
        let mut out = Vec::new();
        let mut n = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.cols() != m {
                return Err(Error::shape("concat_rows", &[m], pv.shape()));
            }
            out.extend_from_slice(pv.values());
            n += pv.rows();
        }
        let ng = self.ng(parts);
        self.push(Tensor::matrix(n, m, out)?, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Per-row inner products `[n x m], [n x m] -> [n]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() || av.cols() != bv.cols() {
            return Err(Error::shape("row_dot", av.shape(), bv.shape()));
        }
        let m = av.cols();
        let out: Vec<f64> = av
            .values()
            .chunks(m)
            .zip(bv.values().chunks(m))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
            .collect();
        let ng = self.ng(&[a, b]);
        self.push(Tensor::vector(out), Op::RowDot(a, b), ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).values().iter().map(|v| v * v).sum();
        let ng = self.ng(&[a]);
        self.push(Tensor::scalar(s), Op::SumSquares(a), ng)
    }

    /// `sum_p w_p * softplus(-(s_i - s_j)) / denom` over `(i, j, w_p)`.
    pub fn pairwise_logistic(
        &mut self,
        scores: Var,
        pairs: Vec<(usize, usize, f64)>,
        denom: f64,
    ) -> Result<Var> {
        let s = self.value(scores).values();
        let mut total = 0.0;
        for &(i, j, w) in &pairs {
            if i >= s.len() || j >= s.len() {
                return Err(Error::Invalid(format!("pair ({i},{j}) out of range")));
            }
            total += w * softplus(-(s[i] - s[j]));
        }
        let ng = self.ng(&[scores]);
        self.push(
            Tensor::scalar(total / denom),
            Op::PairwiseLogistic {
                scores,
                pairs,
                denom,
            },
            ng,
        )
    }

    pub fn mean_squared_error(&mut self, pred: Var, target: Vec<f64>) -> Result<Var> {
        let p = self.value(pred).values();
        if p.len() != target.len() || p.is_empty() {
            return Err(Error::shape("mse", &[p.len()], &[target.len()]));
        }
        let l = p
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / p.len() as f64;
        let ng = self.ng(&[pred]);
        self.push(Tensor::scalar(l), Op::MeanSquaredError { pred, target }, ng)
    }

    /// `sum_i w_i (x_i - c_i)^2` with constant center and weights.
    pub fn weighted_sq_dist(&mut self, x: Var, center: Tensor, weights: Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != center.shape() || xv.shape() != weights.shape() {
            return Err(Error::shape("weighted_sq_dist", xv.shape(), center.shape()));
        }
        let l = xv
            .values()
            .iter()
            .zip(center.values())
            .zip(weights.values())
            .map(|((a, c), w)| w * (a - c) * (a - c))
            .sum();
        let ng = self.ng(&[x]);
        self.push(
            Tensor::scalar(l),
            Op::WeightedSqDist { x, center, weights },
            ng,
        )
    }

    /// Gradients of the one-element node `root`.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward", self.value(root).shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(self.value(root).shape().to_vec(), vec![1.0])?);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }
        Ok(Grads { grads })
    }

    fn backprop_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let acc = |v: Var, g: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if wants(*a) {
                    let mut da = vec![0.0; n * k];
                    gemm(n, m, k, dy.values(), false, bv.values(), true, &mut da, 0.0);
                    acc(*a, Tensor::new(av.shape().to_vec(), da)?, grads);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * m];
                    gemm(k, n, m, av.values(), true, dy.values(), false, &mut db, 0.0);
                    acc(*b, Tensor::new(bv.shape().to_vec(), db)?, grads);
                }
            }
            Op::AddRow(x, b) => {
                acc(*x, dy.clone(), grads);
                if wants(*b) {
                    let m = dy.cols();
                    let mut db = vec![0.0; m];
                    for row in dy.values().chunks(m) {
                        for (o, v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(*b, Tensor::new(val(*b).shape().to_vec(), db)?, grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone(), grads);
                acc(*b, dy.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, dy.clone(), grads);
                acc(*b, dy.map(|v| -v), grads);
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, dy.zip_map(val(*b), |g, y| g * y), grads);
                }
                if wants(*b) {
                    acc(*b, dy.zip_map(val(*a), |g, x| g * x), grads);
                }
            }
            Op::Scale(a, k) => acc(*a, dy.map(|v| v * k), grads),
            Op::Offset(a) => acc(*a, dy.clone(), grads),
            Op::ScaleBy(a, s) => {
                let k = val(*s).item();
                if wants(*a) {
                    acc(*a, dy.map(|v| v * k), grads);
                }
                if wants(*s) {
                    let ds: f64 = dy.values().iter().zip(val(*a).values()).map(|(g, x)| g * x).sum();
                    acc(*s, Tensor::new(val(*s).shape().to_vec(), vec![ds])?, grads);
                }
            }
            Op::MulConst(a, mask) => acc(*a, dy.zip_map(mask, |g, m| g * m), grads),
            Op::Relu(a) => {
                acc(*a, dy.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 }), grads);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let m = y.cols();
                let mut dx = dy.clone();
                for (drow, yrow) in dx.values_mut().chunks_mut(m).zip(y.values().chunks(m)) {
                    let dot: f64 = drow.iter().zip(yrow).map(|(g, p)| g * p).sum();
                    for (g, p) in drow.iter_mut().zip(yrow) {
                        *g = p * (*g - dot);
                    }
                }
                acc(*a, dx, grads);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let m = xhat.cols();
                let g = val(*gamma).values();
                if wants(*gamma) {
                    let mut dg = vec![0.0; m];
                    for (drow, hrow) in dy.values().chunks(m).zip(xhat.values().chunks(m)) {
                        for ((o, d), h) in dg.iter_mut().zip(drow).zip(hrow) {
                            *o += d * h;
                        }
                    }
                    acc(*gamma, Tensor::new(val(*gamma).shape().to_vec(), dg)?, grads);
                }
                if wants(*beta) {
                    let mut db = vec![0.0; m];
                    for drow in dy.values().chunks(m) {
                        for (o, d) in db.iter_mut().zip(drow) {
                            *o += d;
                        }
                    }
                    acc(*beta, Tensor::new(val(*beta).shape().to_vec(), db)?, grads);
                }
                if wants(*x) {
                    let mut dx = vec![0.0; dy.len()];
                    let mf = m as f64;
                    for (r, ((drow, hrow), out)) in dy
                        .values()
                        .chunks(m)
                        .zip(xhat.values().chunks(m))
                        .zip(dx.chunks_mut(m))
                        .enumerate()
                    {
                        let dh: Vec<f64> = drow.iter().zip(g).map(|(d, gg)| d * gg).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hrow).map(|(a, b)| a * b).sum();
                        for ((o, d), h) in out.iter_mut().zip(&dh).zip(hrow) {
                            *o = inv_std[r] / mf * (mf * d - sum_dh - h * sum_dh_h);
                        }
                    }
                    acc(*x, Tensor::new(val(*x).shape().to_vec(), dx)?, grads);
                }
            }
            Op::Transpose(a) => acc(*a, dy.transpose(), grads),
            Op::MeanRows(a) => {
                let av = val(*a);
                let (n, m) = (av.rows(), av.cols());
                let mut dx = Vec::with_capacity(n * m);
                for _ in 0..n {
                    dx.extend(dy.values().iter().map(|v| v / n as f64));
                }
                acc(*a, Tensor::new(av.shape().to_vec(), dx)?, grads);
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let (n, m) = (xv.rows(), xv.cols());
                let len = dy.cols();
                let mut dx = vec![0.0; n * m];
                for r in 0..n {
                    dx[r * m + start..r * m + start + len].copy_from_slice(dy.row_slice(r));
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), dx)?, grads);
            }
            Op::ConcatCols(parts) => {
                let n = dy.rows();
                let mut offset = 0;
                for p in parts {
                    let pv = val(*p);
                    let w = pv.cols();
                    if wants(*p) {
                        let mut dp = Vec::with_capacity(n * w);
                        for r in 0..n {
                            dp.extend_from_slice(&dy.row_slice(r)[offset..offset + w]);
                        }
                        acc(*p, Tensor::new(pv.shape().to_vec(), dp)?, grads);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pv = val(*p);
                    let len = pv.len();
                    if wants(*p) {
                        let dp = dy.values()[offset..offset + len].to_vec();
                        acc(*p, Tensor::new(pv.shape().to_vec(), dp)?, grads);
                    }
                    offset += len;
                }
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let m = av.cols();
                let scale_rows = |src: &Tensor| {
                    let mut out = src.clone();
                    for (row, g) in out.values_mut().chunks_mut(m).zip(dy.values()) {
                        for v in row.iter_mut() {
                            *v *= g;
                        }
                    }
                    out
                };
                if wants(*a) {
                    acc(*a, scale_rows(bv), grads);
                }
                if wants(*b) {
                    acc(*b, scale_rows(av), grads);
                }
            }
            Op::Sum(a) => {
                let g = dy.item();
                acc(*a, Tensor::filled(val(*a).shape(), g), grads);
            }
            Op::SumSquares(a) => {
                let g = dy.item();
                acc(*a, val(*a).map(|x| 2.0 * g * x), grads);
            }
            Op::PairwiseLogistic {
                scores,
                pairs,
                denom,
            } => {
                let g = dy.item();
                let s = val(*scores).values();
                let mut ds = vec![0.0; s.len()];
                for &(i, j, w) in pairs {
                    let d = s[i] - s[j];
                    // d/dd softplus(-d) = -sigmoid(-d)
                    let k = -w * sigmoid(-d) / denom * g;
                    ds[i] += k;
                    ds[j] -= k;
                }
                acc(*scores, Tensor::new(val(*scores).shape().to_vec(), ds)?, grads);
            }
            Op::MeanSquaredError { pred, target } => {
                let g = dy.item();
                let p = val(*pred);
                let n = target.len() as f64;
                let dp: Vec<f64> = p
                    .values()
                    .iter()
                    .zip(target)
                    .map(|(a, b)| 2.0 * (a - b) / n * g)
                    .collect();
                acc(*pred, Tensor::new(p.shape().to_vec(), dp)?, grads);
            }
            Op::WeightedSqDist { x, center, weights } => {
                let g = dy.item();
                let xv = val(*x);
                let dx: Vec<f64> = xv
                    .values()
                    .iter()
                    .zip(center.values())
                    .zip(weights.values())
                    .map(|((a, c), w)| 2.0 * w * (a - c) * g)
                    .collect();
                acc(*x, Tensor::new(xv.shape().to_vec(), dx)?, grads);
            }
        }
        Ok(())
    }

    /// Adds the gradient of every bound parameter into `store`.
    pub fn accumulate_param_grads(&self, grads: &Grads, store: &mut ParamStore) -> Result<()> {
        let mut names: Vec<(&String, &Var)> = self.params.iter().collect();
        names.sort();
        for (name, v) in names {
            if let Some(g) = grads.wrt(*v) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    /// Parameter gradients keyed by name (absent entries had no path to root).
    pub fn param_grads(&self, grads: &Grads) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params
            .iter()
            .filter_map(|(k, v)| grads.wrt(*v).map(|g| (k.clone(), g.clone())))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(entries: &[(&str, Tensor)]) -> ParamStore {
        let mut p = ParamStore::new();
        for (k, v) in entries {
            p.insert(*k, v.clone()).unwrap();
        }
        p
    }

    #[test]
    fn square_gradient() {
        let p = store(&[("x", Tensor::scalar(3.0))]);
        let mut t = Tape::new();
        let x = t.param(&p, "x").unwrap();
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn param_leaf_is_shared() {
        let p = store(&[("x", Tensor::scalar(2.0))]);
        let mut t = Tape::new();
        let a = t.param(&p, "x").unwrap();
        let b = t.param(&p, "x").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constants_get_no_gradient() {
        let p = store(&[("x", Tensor::scalar(2.0))]);
        let mut t = Tape::new();
        let x = t.param(&p, "x").unwrap();
        let c = t.constant(Tensor::scalar(5.0));
        let y = t.mul(x, c).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 5.0);
        assert!(g.wrt(c).is_none());
    }

    #[test]
    fn relu_changes_fingerprint_by_sign() {
        let mut a = Tape::new();
        let x = a.constant(Tensor::vector(vec![1.0, -1.0]));
        a.relu(x).unwrap();
        let mut b = Tape::new();
        let x = b.constant(Tensor::vector(vec![1.0, 1.0]));
        b.relu(x).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(2, 3, vec![1., 2., 3., -1., 0., 1000.]).unwrap());
        let y = t.softmax_rows(x).unwrap();
        for r in 0..2 {
            let s: f64 = t.value(y).row_slice(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(f64::MAX));
        assert!(matches!(t.scale(x, 10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn stable_softplus() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
    }
}
