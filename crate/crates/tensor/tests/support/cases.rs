//! Gradient-check cases: every graph op and every layer, each over at least
//! 100 input coordinates.

use mapkit_tensor::{
    grad_check, param_grad_check, Activation, GradCheckConfig, GradCheckReport, Graph, LayerNorm, Linear, Mlp,
    MultiHeadAttention, NodeId, ParamStore, Result, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MAX_REL: f64 = 1e-4;
pub const MIN_COORDS: usize = 100;

type OpFn = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;
type ParamFn = Box<dyn Fn(&mut Graph, &ParamStore) -> Result<NodeId>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub f: OpFn,
}

pub struct ParamCase {
    pub name: &'static str,
    pub store: ParamStore,
    pub f: ParamFn,
}

impl OpCase {
    pub fn run(&self) -> GradCheckReport {
        grad_check(&self.f, &self.inputs, GradCheckConfig::default()).expect(self.name)
    }
}

impl ParamCase {
    pub fn run(&self) -> GradCheckReport {
        param_grad_check(&self.store, |_| true, &self.f, GradCheckConfig::default()).expect(self.name)
    }
}

/// Entries in ±[0.05, 1] so kinks at zero stay outside the stencil.
pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random linear functional of `y`, so every output entry gets its own weight.
fn project(g: &mut Graph, y: NodeId) -> Result<NodeId> {
    let shape = g.value(y).shape().to_vec();
    let seed = shape.iter().fold(17u64, |a, &d| a.wrapping_mul(31).wrapping_add(d as u64));
    let w = g.constant(rand_tensor(&shape, seed));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn case(name: &'static str, inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'static) -> OpCase {
    OpCase {
        name,
        inputs,
        f: Box::new(f),
    }
}

pub fn op_cases() -> Vec<OpCase> {
    let r = rand_tensor;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let bce_targets: Vec<f64> = (0..120).map(|i| [0.0, 1.0, 0.3][i % 3]).collect();
    let bce_weights: Vec<f64> = (0..120).map(|i| if i % 7 == 0 { 0.0 } else { 1.0 + (i % 3) as f64 }).collect();
    let focal_targets: Vec<usize> = (0..20).map(|_| rng.random_range(0..6)).collect();
    let b_near = {
        let a = r(&[1, 120], 40);
        let off = r(&[1, 120], 41);
        let data = a.data().iter().zip(off.data()).map(|(x, o)| x + 0.8 * o).collect();
        (a, Tensor::new(vec![1, 120], data).unwrap())
    };
    vec![
        case("matmul", vec![r(&[10, 12], 1), r(&[12, 8], 2)], |g, x| {
            let y = g.matmul(x[0], x[1])?;
            project(g, y)
        }),
        case("matmul_nt", vec![r(&[10, 6], 3), r(&[8, 6], 4)], |g, x| {
            let y = g.matmul_nt(x[0], x[1])?;
            project(g, y)
        }),
        case("transpose", vec![r(&[12, 10], 5)], |g, x| {
            let y = g.transpose(x[0])?;
            project(g, y)
        }),
        case("add", vec![r(&[10, 6], 6), r(&[10, 6], 7)], |g, x| {
            let y = g.add(x[0], x[1])?;
            project(g, y)
        }),
        case("sub", vec![r(&[10, 6], 8), r(&[10, 6], 9)], |g, x| {
            let y = g.sub(x[0], x[1])?;
            project(g, y)
        }),
        case("mul", vec![r(&[10, 6], 10), r(&[10, 6], 11)], |g, x| {
            let y = g.mul(x[0], x[1])?;
            project(g, y)
        }),
        case("add_row", vec![r(&[12, 10], 12), r(&[1, 10], 13)], |g, x| {
            let y = g.add_row(x[0], x[1])?;
            project(g, y)
        }),
        case("mul_row", vec![r(&[12, 10], 14), r(&[1, 10], 15)], |g, x| {
            let y = g.mul_row(x[0], x[1])?;
            project(g, y)
        }),
        case("scale", vec![r(&[12, 10], 16)], |g, x| {
            let y = g.scale(x[0], -2.5);
            project(g, y)
        }),
        case("add_scalar", vec![r(&[12, 10], 17)], |g, x| {
            let y = g.add_scalar(x[0], 0.7);
            let y = g.square(y);
            project(g, y)
        }),
        case("relu", vec![r(&[12, 10], 18)], |g, x| {
            let y = g.relu(x[0]);
            project(g, y)
        }),
        case("gelu", vec![r(&[12, 10], 19)], |g, x| {
            let y = g.gelu(x[0]);
            project(g, y)
        }),
        case("sigmoid", vec![r(&[12, 10], 20)], |g, x| {
            let y = g.sigmoid(x[0]);
            project(g, y)
        }),
        case("abs", vec![r(&[12, 10], 21)], |g, x| {
            let y = g.abs(x[0]);
            project(g, y)
        }),
        case("square", vec![r(&[12, 10], 22)], |g, x| {
            let y = g.square(x[0]);
            project(g, y)
        }),
        case("layer_norm", vec![r(&[10, 12], 23), r(&[1, 12], 24), r(&[1, 12], 25)], |g, x| {
            let y = g.layer_norm(x[0], x[1], x[2], 1e-5)?;
            project(g, y)
        }),
        case("softmax", vec![r(&[12, 10], 26)], |g, x| {
            let y = g.softmax(x[0]);
            project(g, y)
        }),
        case("concat_cols", vec![r(&[10, 6], 27), r(&[10, 5], 28)], |g, x| {
            let y = g.concat_cols(&[x[0], x[1]])?;
            project(g, y)
        }),
        case("concat_rows", vec![r(&[6, 10], 29), r(&[5, 10], 30)], |g, x| {
            let y = g.concat_rows(&[x[0], x[1]])?;
            project(g, y)
        }),
        case("slice_cols", vec![r(&[10, 12], 31)], |g, x| {
            let y = g.slice_cols(x[0], 3, 5)?;
            let y = g.square(y);
            project(g, y)
        }),
        case("slice_rows", vec![r(&[12, 10], 32)], |g, x| {
            let y = g.slice_rows(x[0], 2, 7)?;
            let y = g.square(y);
            project(g, y)
        }),
        case("gather_rows", vec![r(&[12, 10], 33)], |g, x| {
            let y = g.gather_rows(x[0], &[3, 0, 3, 11, 5, 3])?;
            let y = g.square(y);
            project(g, y)
        }),
        case("replace_rows", vec![r(&[12, 10], 34), r(&[1, 10], 35)], |g, x| {
            let mask: Vec<bool> = (0..12).map(|i| i % 4 == 1).collect();
            let y = g.replace_rows(x[0], x[1], &mask)?;
            let y = g.square(y);
            project(g, y)
        }),
        case("reshape", vec![r(&[12, 10], 36)], |g, x| {
            let y = g.reshape(x[0], &[10, 12])?;
            project(g, y)
        }),
        case("pair_add", vec![r(&[8, 7], 37), r(&[9, 7], 38)], |g, x| {
            let y = g.pair_add(x[0], x[1])?;
            let y = g.gelu(y);
            project(g, y)
        }),
        case("sincos", vec![r(&[12, 10], 39)], |g, x| {
            let y = g.sincos(x[0], &[1.0, 2.5]);
            project(g, y)
        }),
        case("sum", vec![r(&[12, 10], 42)], |g, x| {
            let y = g.square(x[0]);
            Ok(g.sum(y))
        }),
        case("mean", vec![r(&[12, 10], 43)], |g, x| {
            let y = g.square(x[0]);
            Ok(g.mean(y))
        }),
        case("mse", vec![r(&[12, 10], 44)], |g, x| g.mse(x[0], rand_tensor(&[12, 10], 45))),
        case("l1", vec![r(&[12, 10], 46)], |g, x| g.l1(x[0], rand_tensor(&[12, 10], 47), 7.0)),
        case("bce_with_logits", vec![r(&[12, 10], 48)], move |g, x| {
            g.bce_with_logits(x[0], &bce_targets, &bce_weights)
        }),
        case("focal", vec![r(&[20, 6], 49)], move |g, x| g.focal(x[0], &focal_targets, 0.25, 2.0)),
        case("p2p_iou_loss", vec![b_near.0, b_near.1], |g, x| g.p2p_iou_loss(x[0], x[1], 2.0)),
    ]
}

fn pcase(name: &'static str, store: ParamStore, f: impl Fn(&mut Graph, &ParamStore) -> Result<NodeId> + 'static) -> ParamCase {
    ParamCase {
        name,
        store,
        f: Box::new(f),
    }
}

/// Parameter gradients of each layer, plus gradients with respect to its
/// input with the parameters held fixed.
pub fn layer_cases() -> (Vec<ParamCase>, Vec<OpCase>) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut params = Vec::new();
    let mut inputs = Vec::new();

    let mut s = ParamStore::new();
    let lin = Linear::new(&mut s, &mut rng, "lin", 12, 9).unwrap();
    let x = rand_tensor(&[6, 12], 60);
    {
        let (lin, x) = (lin.clone(), x.clone());
        params.push(pcase("linear", s.clone(), move |g, st| {
            let xi = g.constant(x.clone());
            let y = lin.forward(g, st, xi)?;
            project(g, y)
        }));
    }
    inputs.push(case("linear/input", vec![rand_tensor(&[10, 12], 61)], move |g, xs| {
        let y = lin.forward(g, &s, xs[0])?;
        project(g, y)
    }));

    let mut s = ParamStore::new();
    let ln = LayerNorm::new(&mut s, "ln", 60).unwrap();
    for p in s.iter_mut() {
        p.value = rand_tensor(p.value.shape(), 62);
    }
    let x = rand_tensor(&[4, 60], 63);
    {
        let (ln, x) = (ln.clone(), x.clone());
        params.push(pcase("layer_norm", s.clone(), move |g, st| {
            let xi = g.constant(x.clone());
            let y = ln.forward(g, st, xi)?;
            project(g, y)
        }));
    }
    inputs.push(case("layer_norm/input", vec![x], move |g, xs| {
        let y = ln.forward(g, &s, xs[0])?;
        project(g, y)
    }));

    for (name, iname, act) in [
        ("mlp_gelu", "mlp_gelu/input", Activation::Gelu),
        ("mlp_relu", "mlp_relu/input", Activation::Relu),
    ] {
        let mut s = ParamStore::new();
        let mlp = Mlp::new(&mut s, &mut rng, "mlp", 8, &[10, 6], act).unwrap();
        let x = rand_tensor(&[5, 8], 64);
        {
            let (mlp, x) = (mlp.clone(), x.clone());
            params.push(pcase(name, s.clone(), move |g, st| {
                let xi = g.constant(x.clone());
                let y = mlp.forward(g, st, xi)?;
                project(g, y)
            }));
        }
        inputs.push(case(iname, vec![rand_tensor(&[13, 8], 65)], move |g, xs| {
            let y = mlp.forward(g, &s, xs[0])?;
            project(g, y)
        }));
    }

    let mut s = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut s, &mut rng, "mha", 8, 2).unwrap();
    let (q, kv) = (rand_tensor(&[5, 8], 66), rand_tensor(&[7, 8], 67));
    {
        let (mha, q, kv) = (mha.clone(), q.clone(), kv.clone());
        params.push(pcase("attention", s.clone(), move |g, st| {
            let qi = g.constant(q.clone());
            let ki = g.constant(kv.clone());
            let y = mha.forward(g, st, qi, ki, ki)?;
            project(g, y)
        }));
    }
    inputs.push(case("attention/input", vec![rand_tensor(&[6, 8], 68), rand_tensor(&[9, 8], 69)], move |g, xs| {
        let y = mha.forward(g, &s, xs[0], xs[1], xs[1])?;
        project(g, y)
    }));

    (params, inputs)
}
