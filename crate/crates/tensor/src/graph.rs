//! Computation tape with reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node holding its value and the
//! information its backward rule needs. Nodes are appended in evaluation
//! order, so the node vector is already a topological order and
//! [`Graph::backward`] walks it once in reverse.

use std::collections::HashMap;
use std::fmt;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation defined outside this crate.
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// Returns one gradient per input, shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Abs(NodeId),
    Square(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize),
    SliceRows(NodeId, usize),
    GatherRows(NodeId, Vec<usize>),
    ReplaceRows {
        x: NodeId,
        token: NodeId,
        mask: Vec<bool>,
    },
    Reshape(NodeId),
    Transpose(NodeId),
    PairAdd(NodeId, NodeId),
    SinCos(NodeId, Vec<f64>),
    Sum(NodeId),
    Mean(NodeId),
    Mse(NodeId, Tensor),
    L1(NodeId, Tensor, f64),
    Bce {
        logits: NodeId,
        targets: Vec<f64>,
        weights: Vec<f64>,
        denom: f64,
    },
    Focal {
        logits: NodeId,
        targets: Vec<usize>,
        alpha: f64,
        gamma: f64,
    },
    P2pIou {
        a: NodeId,
        b: NodeId,
        half_width: f64,
    },
    Custom(Box<dyn CustomOp>, Vec<NodeId>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded tape. Build one per forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, NodeId>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn shape2(rows: usize, cols: usize) -> Vec<usize> {
    vec![rows, cols]
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn log_softmax_row(row: &[f64], out: &mut [f64]) {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing on it requires a gradient.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that receives a gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// The leaf for a stored parameter, created once per tape.
    /// Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let p = store.get(id);
        let n = if p.frozen || !self.grad_enabled {
            self.constant(p.value.clone())
        } else {
            self.input(p.value.clone())
        };
        self.params.insert(id, n);
        n
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k) = (av.rows(), av.cols());
        if bv.shape().len() != 2 || bv.shape()[0] != k {
            return Err(mismatch("matmul", av, bv));
        }
        let m = bv.cols();
        let mut out = vec![0.0; n * m];
        gemm(av.data(), (n, k), false, bv.data(), (k, m), false, 0.0, &mut out);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().expect("matmul lhs rank") = m;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: n × k`, `b: m × k`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, k) = (av.rows(), av.cols());
        if bv.cols() != k {
            return Err(mismatch("matmul_nt", av, bv));
        }
        let m = bv.rows();
        let mut out = vec![0.0; n * m];
        gemm(av.data(), (n, k), false, bv.data(), (m, k), true, 0.0, &mut out);
        let value = Tensor::new(shape2(n, m), out)?;
        Ok(self.push(value, Op::MatMulNT(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let (n, m) = (av.rows(), av.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = av.data()[i * m + j];
            }
        }
        let value = Tensor::new(shape2(m, n), out)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    // ---- elementwise ----

    fn zip_same(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(mismatch(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    fn row_broadcast(
        &mut self,
        a: NodeId,
        r: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, rv) = (self.value(a), self.value(r));
        let c = av.cols();
        if rv.len() != c {
            return Err(mismatch(name, av, rv));
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            for (x, &y) in row.iter_mut().zip(rv.data()) {
                *x = f(*x, y);
            }
        }
        Tensor::new(av.shape().to_vec(), data)
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let v = self.row_broadcast(a, row, "add_row", |x, y| x + y)?;
        Ok(self.push(v, Op::AddRow(a, row), &[a, row]))
    }

    /// Multiplies every row elementwise by a length-`cols` vector.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let v = self.row_broadcast(a, row, "mul_row", |x, y| x * y)?;
        Ok(self.push(v, Op::MulRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()));
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a), &[a])
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    // ---- normalization ----

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gain` and `bias` (both length `cols`).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let c = xv.cols();
        if gv.len() != c || bv.len() != c {
            return Err(mismatch("layer_norm", xv, gv));
        }
        if eps <= 0.0 {
            return Err(TensorError::Invalid("layer_norm eps must be positive".into()));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for i in 0..rows {
            let r = &xv.data()[i * c..(i + 1) * c];
            let mean = r.iter().sum::<f64>() / c as f64;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[i] = s;
            for j in 0..c {
                let h = (r[j] - mean) * s;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let c = av.cols();
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let m = row.iter().fold(f64::NEG_INFINITY, |x, &y| x.max(y));
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), out).expect("softmax shape");
        self.push(value, Op::Softmax(a), &[a])
    }

    // ---- structural ----

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_cols of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows {
                return Err(mismatch("concat_cols", self.value(*first), v));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let v = self.value(*p).data();
            for i in 0..rows {
                out[i * total + off..i * total + off + w].copy_from_slice(&v[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let value = Tensor::new(shape2(rows, total), out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat_rows of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            if v.cols() != cols {
                return Err(mismatch("concat_rows", self.value(*first), v));
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        let value = Tensor::new(shape2(rows, cols), out)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let av = self.value(a);
        let (rows, c) = (av.rows(), av.cols());
        if start + len > c {
            return Err(TensorError::OutOfRange {
                index: start + len,
                len: c,
            });
        }
        let mut out = Vec::with_capacity(rows * len);
        for i in 0..rows {
            out.extend_from_slice(&av.data()[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(shape2(rows, len), out)?;
        Ok(self.push(value, Op::SliceCols(a, start), &[a]))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let av = self.value(a);
        let (rows, c) = (av.rows(), av.cols());
        if start + len > rows {
            return Err(TensorError::OutOfRange {
                index: start + len,
                len: rows,
            });
        }
        let out = av.data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(shape2(len, c), out)?;
        Ok(self.push(value, Op::SliceRows(a, start), &[a]))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let av = self.value(a);
        let (rows, c) = (av.rows(), av.cols());
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::OutOfRange { index: i, len: rows });
            }
            out.extend_from_slice(&av.data()[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(shape2(idx.len(), c), out)?;
        Ok(self.push(value, Op::GatherRows(a, idx.to_vec()), &[a]))
    }

    /// Replaces each row `i` with `mask[i]` set by the single-row `token`.
    pub fn replace_rows(&mut self, x: NodeId, token: NodeId, mask: &[bool]) -> Result<NodeId> {
        let (xv, tv) = (self.value(x), self.value(token));
        let (rows, c) = (xv.rows(), xv.cols());
        if tv.len() != c || mask.len() != rows {
            return Err(mismatch("replace_rows", xv, tv));
        }
        let mut out = xv.data().to_vec();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                out[i * c..(i + 1) * c].copy_from_slice(tv.data());
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::ReplaceRows {
                x,
                token,
                mask: mask.to_vec(),
            },
            &[x, token],
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// Row `i * m + j` of the result is `a[i] + b[j]`, for `a: n × h`, `b: m × h`.
    pub fn pair_add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let h = av.cols();
        if bv.cols() != h {
            return Err(mismatch("pair_add", av, bv));
        }
        let (n, m) = (av.rows(), bv.rows());
        let mut out = vec![0.0; n * m * h];
        for i in 0..n {
            let ar = &av.data()[i * h..(i + 1) * h];
            for j in 0..m {
                let br = &bv.data()[j * h..(j + 1) * h];
                let o = &mut out[(i * m + j) * h..(i * m + j + 1) * h];
                for k in 0..h {
                    o[k] = ar[k] + br[k];
                }
            }
        }
        let value = Tensor::new(shape2(n * m, h), out)?;
        Ok(self.push(value, Op::PairAdd(a, b), &[a, b]))
    }

    /// For every column `v` of `a` and angular frequency `w`, emits
    /// `sin(w·v), cos(w·v)`; columns are laid out `[col0: f0 sin, f0 cos, f1 sin, …, col1: …]`.
    pub fn sincos(&mut self, a: NodeId, freqs: &[f64]) -> NodeId {
        let av = self.value(a);
        let (rows, d) = (av.rows(), av.cols());
        let k = freqs.len();
        let width = d * 2 * k;
        let mut out = vec![0.0; rows * width];
        for i in 0..rows {
            for c in 0..d {
                let x = av.data()[i * d + c];
                for (f, w) in freqs.iter().enumerate() {
                    let (s, co) = (w * x).sin_cos();
                    out[i * width + c * 2 * k + 2 * f] = s;
                    out[i * width + c * 2 * k + 2 * f + 1] = co;
                }
            }
        }
        let value = Tensor::new(shape2(rows, width), out).expect("sincos shape");
        self.push(value, Op::SinCos(a, freqs.to_vec()), &[a])
    }

    // ---- reductions and losses ----

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, a: NodeId, target: Tensor) -> Result<NodeId> {
        let av = self.value(a);
        if av.len() != target.len() {
            return Err(mismatch("mse", av, &target));
        }
        let n = av.len().max(1) as f64;
        let s = av
            .data()
            .iter()
            .zip(target.data())
            .map(|(x, t)| (x - t) * (x - t))
            .sum::<f64>()
            / n;
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, target), &[a]))
    }

    /// `Σ|a − target| / denom`.
    pub fn l1(&mut self, a: NodeId, target: Tensor, denom: f64) -> Result<NodeId> {
        let av = self.value(a);
        if av.len() != target.len() {
            return Err(mismatch("l1", av, &target));
        }
        let s = av
            .data()
            .iter()
            .zip(target.data())
            .map(|(x, t)| (x - t).abs())
            .sum::<f64>()
            / denom;
        Ok(self.push(Tensor::scalar(s), Op::L1(a, target, denom), &[a]))
    }

    /// Weighted mean binary cross-entropy with logits; entries with weight 0
    /// are ignored. The mean divides by the weight sum (or 1 when it is 0).
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[f64], weights: &[f64]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.len() != targets.len() || lv.len() != weights.len() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let wsum: f64 = weights.iter().sum();
        let denom = if wsum > 0.0 { wsum } else { 1.0 };
        let mut s = 0.0;
        for ((&z, &t), &w) in lv.data().iter().zip(targets).zip(weights) {
            if w != 0.0 {
                s += w * (softplus(z) - t * z);
            }
        }
        Ok(self.push(
            Tensor::scalar(s / denom),
            Op::Bce {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                denom,
            },
            &[logits],
        ))
    }

    /// Softmax focal loss summed over rows: `−α (1 − p_t)^γ log p_t`.
    pub fn focal(&mut self, logits: NodeId, targets: &[usize], alpha: f64, gamma: f64) -> Result<NodeId> {
        let lv = self.value(logits);
        let (rows, c) = (lv.rows(), lv.cols());
        if targets.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "focal",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let mut logp = vec![0.0; c];
        let mut s = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(TensorError::OutOfRange { index: t, len: c });
            }
            log_softmax_row(&lv.data()[i * c..(i + 1) * c], &mut logp);
            let lp = logp[t];
            let p = lp.exp();
            s += -alpha * (1.0 - p).max(0.0).powf(gamma) * lp;
        }
        Ok(self.push(
            Tensor::scalar(s),
            Op::Focal {
                logits,
                targets: targets.to_vec(),
                alpha,
                gamma,
            },
            &[logits],
        ))
    }

    /// `1 − mean_i max(0, 2w − dᵢ) / (2w + dᵢ)` over paired 2-D points of
    /// `a` and `b` (both flattened as `x0, y0, x1, y1, …`).
    pub fn p2p_iou_loss(&mut self, a: NodeId, b: NodeId, half_width: f64) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() || av.len() % 2 != 0 || av.is_empty() {
            return Err(mismatch("p2p_iou_loss", av, bv));
        }
        if half_width <= 0.0 {
            return Err(TensorError::Invalid("p2p half width must be positive".into()));
        }
        let n = av.len() / 2;
        let w2 = 2.0 * half_width;
        let mut acc = 0.0;
        for i in 0..n {
            let dx = av.data()[2 * i] - bv.data()[2 * i];
            let dy = av.data()[2 * i + 1] - bv.data()[2 * i + 1];
            let d = dx.hypot(dy);
            acc += (w2 - d).max(0.0) / (w2 + d);
        }
        let value = Tensor::scalar(1.0 - acc / n as f64);
        Ok(self.push(value, Op::P2pIou { a, b, half_width }, &[a, b]))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor> = inputs.iter().map(|i| self.value(*i)).collect();
        let value = op.forward(&vals)?;
        Ok(self.push(value, Op::Custom(op, inputs.to_vec()), inputs))
    }

    /// Propagates `∂loss/∂node` to every node that requires a gradient and
    /// consumes the tape.
    pub fn backward(self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 || !lv.shape().is_empty() && lv.shape() != [1] {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        }
        let mut leaves: HashMap<NodeId, Tensor> = HashMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.insert(NodeId(i), g);
                continue;
            }
            for (target, contrib) in self.backward_rule(i, &g) {
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                match &mut grads[target.0] {
                    Some(t) => t.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        let params = self
            .params
            .iter()
            .filter_map(|(pid, nid)| leaves.get(nid).map(|g| (*pid, g.clone())))
            .collect();
        Ok(Gradients { leaves, params })
    }

    fn backward_rule(&self, i: usize, g: &Tensor) -> Vec<(NodeId, Tensor)> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |id: NodeId| &self.nodes[id.0].value;
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let like = |t: &Tensor, data: Vec<f64>| Tensor::new(t.shape().to_vec(), data).expect("grad shape");
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.cols());
                if needs(*a) {
                    let mut ga = vec![0.0; n * k];
                    gemm(g.data(), (n, m), false, bv.data(), (k, m), true, 0.0, &mut ga);
                    res.push((*a, like(av, ga)));
                }
                if needs(*b) {
                    let mut gb = vec![0.0; k * m];
                    gemm(av.data(), (n, k), true, g.data(), (n, m), false, 0.0, &mut gb);
                    res.push((*b, like(bv, gb)));
                }
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, k, m) = (av.rows(), av.cols(), bv.rows());
                if needs(*a) {
                    let mut ga = vec![0.0; n * k];
                    gemm(g.data(), (n, m), false, bv.data(), (m, k), false, 0.0, &mut ga);
                    res.push((*a, like(av, ga)));
                }
                if needs(*b) {
                    let mut gb = vec![0.0; m * k];
                    gemm(g.data(), (n, m), true, av.data(), (n, k), false, 0.0, &mut gb);
                    res.push((*b, like(bv, gb)));
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (out.rows(), out.cols());
                let mut ga = vec![0.0; n * m];
                for r in 0..n {
                    for c in 0..m {
                        ga[c * n + r] = g.data()[r * m + c];
                    }
                }
                res.push((*a, like(val(*a), ga)));
            }
            Op::Add(a, b) => {
                res.push((*a, like(val(*a), g.data().to_vec())));
                res.push((*b, like(val(*b), g.data().to_vec())));
            }
            Op::Sub(a, b) => {
                res.push((*a, like(val(*a), g.data().to_vec())));
                res.push((*b, like(val(*b), g.data().iter().map(|v| -v).collect())));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if needs(*a) {
                    res.push((*a, like(av, g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect())));
                }
                if needs(*b) {
                    res.push((*b, like(bv, g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect())));
                }
            }
            Op::AddRow(a, r) => {
                res.push((*a, like(val(*a), g.data().to_vec())));
                if needs(*r) {
                    let c = g.cols();
                    let mut gr = vec![0.0; c];
                    for row in g.data().chunks(c.max(1)) {
                        for (s, v) in gr.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    res.push((*r, like(val(*r), gr)));
                }
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (val(*a), val(*r));
                let c = av.cols();
                if needs(*a) {
                    let mut ga = g.data().to_vec();
                    for row in ga.chunks_mut(c.max(1)) {
                        for (x, y) in row.iter_mut().zip(rv.data()) {
                            *x *= y;
                        }
                    }
                    res.push((*a, like(av, ga)));
                }
                if needs(*r) {
                    let mut gr = vec![0.0; c];
                    for (grow, arow) in g.data().chunks(c.max(1)).zip(av.data().chunks(c.max(1))) {
                        for j in 0..c {
                            gr[j] += grow[j] * arow[j];
                        }
                    }
                    res.push((*r, like(rv, gr)));
                }
            }
            Op::Scale(a, c) => res.push((*a, g.map(|v| v * c))),
            Op::AddScalar(a) => res.push((*a, g.clone())),
            Op::Relu(a) => {
                let av = val(*a);
                let d = g.data().iter().zip(av.data()).map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 }).collect();
                res.push((*a, like(av, d)));
            }
            Op::Gelu(a) => {
                let av = val(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(gv, &x)| {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        gv * (0.5 * (1.0 + t) + 0.5 * x * dt)
                    })
                    .collect();
                res.push((*a, like(av, d)));
            }
            Op::Sigmoid(a) => {
                let d = g.data().iter().zip(out.data()).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                res.push((*a, like(val(*a), d)));
            }
            Op::Abs(a) => {
                let av = val(*a);
                let d = g.data().iter().zip(av.data()).map(|(gv, x)| gv * sign0(*x)).collect();
                res.push((*a, like(av, d)));
            }
            Op::Square(a) => {
                let av = val(*a);
                let d = g.data().iter().zip(av.data()).map(|(gv, x)| 2.0 * gv * x).collect();
                res.push((*a, like(av, d)));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = out.cols();
                let rows = out.rows();
                let gv = val(*gain).data();
                if needs(*x) {
                    let mut gx = vec![0.0; out.len()];
                    for i in 0..rows {
                        let gr = &g.data()[i * c..(i + 1) * c];
                        let hr = &xhat[i * c..(i + 1) * c];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        let n = c as f64;
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            gx[i * c + j] = rstd[i] / n * (n * dh - s1 - hr[j] * s2);
                        }
                    }
                    res.push((*x, like(val(*x), gx)));
                }
                if needs(*gain) || needs(*bias) {
                    let mut gg = vec![0.0; c];
                    let mut gb = vec![0.0; c];
                    for i in 0..rows {
                        for j in 0..c {
                            gg[j] += g.data()[i * c + j] * xhat[i * c + j];
                            gb[j] += g.data()[i * c + j];
                        }
                    }
                    res.push((*gain, like(val(*gain), gg)));
                    res.push((*bias, like(val(*bias), gb)));
                }
            }
            Op::Softmax(a) => {
                let c = out.cols();
                let mut ga = vec![0.0; out.len()];
                for ((gr, yr), dr) in g
                    .data()
                    .chunks(c.max(1))
                    .zip(out.data().chunks(c.max(1)))
                    .zip(ga.chunks_mut(c.max(1)))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                res.push((*a, like(val(*a), ga)));
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (out.rows(), out.cols());
                let mut off = 0;
                for p in parts {
                    let pv = val(*p);
                    let w = pv.cols();
                    if needs(*p) {
                        let mut gp = vec![0.0; rows * w];
                        for r in 0..rows {
                            gp[r * w..(r + 1) * w]
                                .copy_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        res.push((*p, like(pv, gp)));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let pv = val(*p);
                    if needs(*p) {
                        res.push((*p, like(pv, g.data()[off..off + pv.len()].to_vec())));
                    }
                    off += pv.len();
                }
            }
            Op::SliceCols(a, start) => {
                let av = val(*a);
                let (rows, c, w) = (av.rows(), av.cols(), out.cols());
                let mut ga = vec![0.0; av.len()];
                for r in 0..rows {
                    ga[r * c + start..r * c + start + w].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                res.push((*a, like(av, ga)));
            }
            Op::SliceRows(a, start) => {
                let av = val(*a);
                let c = av.cols();
                let mut ga = vec![0.0; av.len()];
                ga[start * c..start * c + g.len()].copy_from_slice(g.data());
                res.push((*a, like(av, ga)));
            }
            Op::GatherRows(a, idx) => {
                let av = val(*a);
                let c = av.cols();
                let mut ga = vec![0.0; av.len()];
                for (k, &r) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga[r * c + j] += g.data()[k * c + j];
                    }
                }
                res.push((*a, like(av, ga)));
            }
            Op::ReplaceRows { x, token, mask } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut gx = g.data().to_vec();
                let mut gt = vec![0.0; c];
                for (i, &m) in mask.iter().enumerate() {
                    if m {
                        for j in 0..c {
                            gt[j] += gx[i * c + j];
                            gx[i * c + j] = 0.0;
                        }
                    }
                }
                res.push((*x, like(xv, gx)));
                res.push((*token, like(val(*token), gt)));
            }
            Op::Reshape(a) => res.push((*a, like(val(*a), g.data().to_vec()))),
            Op::PairAdd(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (n, m, h) = (av.rows(), bv.rows(), av.cols());
                let mut ga = vec![0.0; n * h];
                let mut gb = vec![0.0; m * h];
                for i in 0..n {
                    for j in 0..m {
                        let gr = &g.data()[(i * m + j) * h..(i * m + j + 1) * h];
                        for k in 0..h {
                            ga[i * h + k] += gr[k];
                            gb[j * h + k] += gr[k];
                        }
                    }
                }
                res.push((*a, like(av, ga)));
                res.push((*b, like(bv, gb)));
            }
            Op::SinCos(a, freqs) => {
                let av = val(*a);
                let (rows, d) = (av.rows(), av.cols());
                let k = freqs.len();
                let width = out.cols();
                let mut ga = vec![0.0; av.len()];
                for i in 0..rows {
                    for c in 0..d {
                        let mut s = 0.0;
                        for (f, w) in freqs.iter().enumerate() {
                            let base = i * width + c * 2 * k + 2 * f;
                            let (sv, cv) = (out.data()[base], out.data()[base + 1]);
                            s += g.data()[base] * w * cv - g.data()[base + 1] * w * sv;
                        }
                        ga[i * d + c] = s;
                    }
                }
                res.push((*a, like(av, ga)));
            }
            Op::Sum(a) => {
                let av = val(*a);
                res.push((*a, Tensor::full(av.shape(), g.item())));
            }
            Op::Mean(a) => {
                let av = val(*a);
                res.push((*a, Tensor::full(av.shape(), g.item() / av.len().max(1) as f64)));
            }
            Op::Mse(a, t) => {
                let av = val(*a);
                let n = av.len().max(1) as f64;
                let s = g.item() * 2.0 / n;
                let d = av.data().iter().zip(t.data()).map(|(x, y)| s * (x - y)).collect();
                res.push((*a, like(av, d)));
            }
            Op::L1(a, t, denom) => {
                let av = val(*a);
                let s = g.item() / denom;
                let d = av.data().iter().zip(t.data()).map(|(x, y)| s * sign0(x - y)).collect();
                res.push((*a, like(av, d)));
            }
            Op::Bce {
                logits,
                targets,
                weights,
                denom,
            } => {
                let lv = val(*logits);
                let s = g.item() / denom;
                let d = lv
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&z, &t), &w)| if w == 0.0 { 0.0 } else { s * w * (sigmoid(z) - t) })
                    .collect();
                res.push((*logits, like(lv, d)));
            }
            Op::Focal {
                logits,
                targets,
                alpha,
                gamma,
            } => {
                let lv = val(*logits);
                let c = lv.cols();
                let mut gl = vec![0.0; lv.len()];
                let mut logp = vec![0.0; c];
                for (i, &t) in targets.iter().enumerate() {
                    log_softmax_row(&lv.data()[i * c..(i + 1) * c], &mut logp);
                    let lp = logp[t];
                    let p = lp.exp();
                    let q = (1.0 - p).max(0.0);
                    // d/dp of −α q^γ log p
                    let dq = if *gamma == 0.0 {
                        0.0
                    } else if q > 0.0 {
                        gamma * q.powf(gamma - 1.0)
                    } else {
                        0.0
                    };
                    let dfdp = -alpha * (-dq * lp + q.powf(*gamma) / p);
                    for j in 0..c {
                        let pj = logp[j].exp();
                        let dpdz = p * (if j == t { 1.0 } else { 0.0 } - pj);
                        gl[i * c + j] = g.item() * dfdp * dpdz;
                    }
                }
                res.push((*logits, like(lv, gl)));
            }
            Op::P2pIou { a, b, half_width } => {
                let (av, bv) = (val(*a), val(*b));
                let n = av.len() / 2;
                let w2 = 2.0 * half_width;
                let mut ga = vec![0.0; av.len()];
                for i in 0..n {
                    let dx = av.data()[2 * i] - bv.data()[2 * i];
                    let dy = av.data()[2 * i + 1] - bv.data()[2 * i + 1];
                    let d = dx.hypot(dy);
                    if d > 0.0 && d < w2 {
                        let diou = -2.0 * w2 / ((w2 + d) * (w2 + d));
                        // loss = 1 − mean(iou)
                        let s = -g.item() * diou / n as f64 / d;
                        ga[2 * i] = s * dx;
                        ga[2 * i + 1] = s * dy;
                    }
                }
                if needs(*b) {
                    res.push((*b, like(bv, ga.iter().map(|v| -v).collect())));
                }
                res.push((*a, like(av, ga)));
            }
            Op::Custom(op, inputs) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|id| val(*id)).collect();
                for (id, gi) in inputs.iter().zip(op.backward(&vals, out, g)) {
                    res.push((*id, gi));
                }
            }
        }
        res
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradients for the leaves of a consumed tape.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<NodeId, Tensor>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor> {
        self.leaves.get(&node)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    /// Adds the parameter gradients into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in &self.params {
            store.accumulate_grad(*id, g);
        }
    }
}
