//! Layers built from tape operations. Each layer owns only [`ParamId`]s; the
//! values live in a [`ParamStore`].

use rand::Rng;

use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Result, Tensor, TensorError};

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("uniform init shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Identity,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
            Activation::Identity => x,
        }
    }
}

/// `y = x W + b`, with `W: d_in × d_out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights and bias drawn uniformly from `±sqrt(1 / d_in)`.
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = (1.0 / d_in.max(1) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[d_in, d_out], bound))?;
        let bias = store.add(format!("{name}.bias"), uniform(rng, &[d_out], bound))?;
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    /// A layer whose weight and bias start at zero.
    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[d_in, d_out]))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?;
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        if g.value(x).cols() != self.d_in {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: g.value(x).shape().to_vec(),
                rhs: vec![self.d_in, self.d_out],
            });
        }
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let xw = g.matmul(x, w)?;
        g.add_row(xw, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?;
        Ok(Self { gain, bias, eps: 1e-5 })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, self.eps)
    }
}

/// Linear layers with an activation between consecutive layers; the last
/// layer is linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `widths` lists the output width of each layer.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        widths: &[usize],
        activation: Activation,
    ) -> Result<Self> {
        if widths.is_empty() {
            return Err(TensorError::Invalid("mlp needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = d_in;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Linear::new(store, rng, &format!("{name}.{i}"), prev, w)?);
            prev = w;
        }
        Ok(Self { layers, activation })
    }

    /// Sets the final layer's weight and bias to zero.
    pub fn zero_last(&self, store: &mut ParamStore) {
        let last = self.layers.last().expect("mlp has layers");
        store.get_mut(last.weight).value.data_mut().fill(0.0);
        store.get_mut(last.bias).value.data_mut().fill(0.0);
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, |l| l.d_out)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i < last {
                h = self.activation.apply(g, h);
            }
        }
        Ok(h)
    }
}

/// Scaled dot-product attention over `heads` heads with input and output
/// projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::Invalid(format!(
                "attention width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q_proj: Linear::new(store, rng, &format!("{name}.q"), dim, dim)?,
            k_proj: Linear::new(store, rng, &format!("{name}.k"), dim, dim)?,
            v_proj: Linear::new(store, rng, &format!("{name}.v"), dim, dim)?,
            out_proj: Linear::new(store, rng, &format!("{name}.o"), dim, dim)?,
            heads,
            dim,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: NodeId,
        key: NodeId,
        value: NodeId,
    ) -> Result<NodeId> {
        Ok(self.forward_with_weights(g, store, query, key, value)?.0)
    }

    /// Also returns the per-head attention weight nodes (`Nq × Nk` each).
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: NodeId,
        key: NodeId,
        value: NodeId,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let nk = g.value(key).rows();
        if nk == 0 {
            return Err(TensorError::Invalid("attention over an empty key set".into()));
        }
        if g.value(value).rows() != nk {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: g.value(key).shape().to_vec(),
                rhs: g.value(value).shape().to_vec(),
            });
        }
        let q = self.q_proj.forward(g, store, query)?;
        let k = self.k_proj.forward(g, store, key)?;
        let v = self.v_proj.forward(g, store, value)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh)?,
                    g.slice_cols(k, h * dh, dh)?,
                    g.slice_cols(v, h * dh, dh)?,
                )
            };
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax(scores);
            weights.push(attn);
            outs.push(g.matmul(attn, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        Ok((self.out_proj.forward(g, store, cat)?, weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                for t in 0..k {
                    out[i * m + j] += a[i * k + t] * b[t * m + j];
                }
            }
        }
        out
    }

    #[test]
    fn linear_identity_and_zero_input() {
        let mut store = ParamStore::new();
        let lin = Linear::zeros(&mut store, "l", 3, 3).unwrap();
        {
            let w = store.get_mut(lin.weight).value.data_mut();
            for i in 0..3 {
                w[i * 3 + i] = 1.0;
            }
        }
        let mut g = Graph::new();
        let xs = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -4.0, 5.0, 0.5]).unwrap();
        let x = g.constant(xs.clone());
        let y = lin.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).data(), xs.data());

        store.get_mut(lin.bias).value.data_mut().copy_from_slice(&[0.1, 0.2, 0.3]);
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 3]));
        let y = lin.forward(&mut g, &store, z).unwrap();
        assert_eq!(g.value(y).data(), &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);
    }

    #[test]
    fn linear_matches_naive_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, &mut rng, "l", 5, 4).unwrap();
        let xs: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 5], xs.clone()).unwrap());
        let y = lin.forward(&mut g, &store, x).unwrap();
        let mut expect = naive_matmul(&xs, store.value(lin.weight).data(), 3, 5, 4);
        for (i, e) in expect.iter_mut().enumerate() {
            *e += store.value(lin.bias).data()[i % 4];
        }
        for (a, b) in g.value(y).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, &mut rng, "l", 5, 4).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        assert!(lin.forward(&mut g, &store, x).is_err());
    }

    #[test]
    fn mlp_zero_weights_emit_final_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, &mut rng, "m", 4, &[6, 2], Activation::Relu).unwrap();
        for l in &mlp.layers {
            store.get_mut(l.weight).value.data_mut().fill(0.0);
        }
        let bias = store.value(mlp.layers[1].bias).data().to_vec();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[3, 4], 0.7));
        let y = mlp.forward(&mut g, &store, x).unwrap();
        for r in 0..3 {
            assert_eq!(g.value(y).row(r), bias.as_slice());
        }
        assert!(Mlp::new(&mut store, &mut rng, "e", 4, &[], Activation::Relu).is_err());
    }

    #[test]
    fn single_key_attention_returns_projected_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "a", 8, 2).unwrap();
        let mut g = Graph::new();
        let q = g.constant(uniform(&mut rng, &[5, 8], 1.0));
        let kv = g.constant(uniform(&mut rng, &[1, 8], 1.0));
        let (y, w) = mha.forward_with_weights(&mut g, &store, q, kv, kv).unwrap();
        for wn in w {
            assert!(g.value(wn).data().iter().all(|p| *p == 1.0));
        }
        let v = mha.v_proj.forward(&mut g, &store, kv).unwrap();
        let o = mha.out_proj.forward(&mut g, &store, v).unwrap();
        let expect = g.value(o).row(0).to_vec();
        for r in 0..5 {
            for (a, b) in g.value(y).row(r).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_invariant_to_key_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "a", 8, 4).unwrap();
        let kv = uniform(&mut rng, &[4, 8], 1.0);
        let perm = [2usize, 0, 3, 1];
        let mut g = Graph::new();
        let q = g.constant(uniform(&mut rng, &[3, 8], 1.0));
        let kvn = g.constant(kv);
        let kvp = g.gather_rows(kvn, &perm).unwrap();
        let a = mha.forward(&mut g, &store, q, kvn, kvn).unwrap();
        let b = mha.forward(&mut g, &store, q, kvp, kvp).unwrap();
        for (x, y) in g.value(a).data().iter().zip(g.value(b).data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let empty = g.constant(Tensor::zeros(&[0, 8]));
        assert!(mha.forward(&mut g, &store, q, empty, empty).is_err());
    }
}
