//! Central finite-difference checking of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, NodeId};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Result, Tensor, TensorError};

/// Relative error denominator floor; below it the comparison is absolute.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Upper bound on checked coordinates across all inputs (all when fewer).
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares analytic gradients of a scalar function against central
/// differences `(f(x+ε) − f(x−ε)) / 2ε` on sampled coordinates.
///
/// `f` receives a fresh tape and one input node per tensor in `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-6..=1e-3).contains(&cfg.eps) {
        return Err(TensorError::Invalid(format!("gradcheck eps {} outside [1e-6, 1e-3]", cfg.eps)));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::inference();
        let ids: Vec<NodeId> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &ids)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let out = f(&mut g, &ids)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(inputs)
        .map(|(id, x)| grads.wrt(*id).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let total: usize = inputs.iter().map(Tensor::len).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let picks: Vec<usize> = if total <= cfg.max_coords {
        (0..total).collect()
    } else {
        let mut v = sample(&mut rng, total, cfg.max_coords).into_vec();
        v.sort_unstable();
        v
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_err = 0.0_f64;
    for flat in &picks {
        let (mut t, mut j) = (0, *flat);
        while j >= inputs[t].len() {
            j -= inputs[t].len();
            t += 1;
        }
        let x0 = work[t].data()[j];
        work[t].data_mut()[j] = x0 + cfg.eps;
        let up = eval(&work)?;
        work[t].data_mut()[j] = x0 - cfg.eps;
        let down = eval(&work)?;
        work[t].data_mut()[j] = x0;
        let numeric = (up - down) / (2.0 * cfg.eps);
        max_err = max_err.max(relative_error(analytic[t].data()[j], numeric));
    }
    Ok(GradCheckReport {
        max_rel_error: max_err,
        coords_checked: picks.len(),
    })
}

/// Like [`grad_check`] but over the coordinates of the stored parameters
/// whose names satisfy `select`. `f` builds the loss on the given tape.
pub fn param_grad_check<F>(
    store: &ParamStore,
    select: impl Fn(&str) -> bool,
    f: F,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    if !(1e-6..=1e-3).contains(&cfg.eps) {
        return Err(TensorError::Invalid(format!("gradcheck eps {} outside [1e-6, 1e-3]", cfg.eps)));
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let out = f(&mut g, s)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?;

    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| !p.frozen && select(&p.name))
        .map(|(id, _)| id)
        .collect();
    let coords: Vec<(ParamId, usize)> = ids
        .iter()
        .flat_map(|&id| (0..store.value(id).len()).map(move |j| (id, j)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let picks: Vec<usize> = if coords.len() <= cfg.max_coords {
        (0..coords.len()).collect()
    } else {
        let mut v = sample(&mut rng, coords.len(), cfg.max_coords).into_vec();
        v.sort_unstable();
        v
    };

    let mut work = store.clone();
    let mut max_err = 0.0_f64;
    for &k in &picks {
        let (id, j) = coords[k];
        let analytic = grads.param(id).map_or(0.0, |t| t.data()[j]);
        let x0 = work.value(id).data()[j];
        work.get_mut(id).value.data_mut()[j] = x0 + cfg.eps;
        let up = eval(&work)?;
        work.get_mut(id).value.data_mut()[j] = x0 - cfg.eps;
        let down = eval(&work)?;
        work.get_mut(id).value.data_mut()[j] = x0;
        max_err = max_err.max(relative_error(analytic, (up - down) / (2.0 * cfg.eps)));
    }
    Ok(GradCheckReport {
        max_rel_error: max_err,
        coords_checked: picks.len(),
    })
}
