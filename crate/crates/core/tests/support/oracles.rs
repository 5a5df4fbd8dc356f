//! Independent reference implementations used by the oracle tests.

use mapkit_core::bev::{BoxInput, ForwardOptions, Model, ModelConfig};
use mapkit_core::losses::{total_loss, CostWeights};
use mapkit_core::map_encoder::MapEncoderConfig;
use mapkit_core::pipeline::{lt_inputs, prepare_sample};
use mapkit_core::scene::{dist, Point};
use mapkit_core::scenegen::{generate_scene, GenConfig};
use mapkit_tensor::{param_grad_check, GradCheckConfig, GradCheckReport, ParamStore, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Minimum total over every injective pairing of the smaller side, summed in
/// row order.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    fn rec(i: usize, cost: &[Vec<f64>], used: &mut [bool], free_rows: usize, acc: f64, best: &mut f64) {
        let (n, m) = (cost.len(), used.len());
        if i == n {
            *best = best.min(acc);
            return;
        }
        let used_cols = used.iter().filter(|u| **u).count();
        // skipping row i is allowed only while enough rows stay unmatched
        if free_rows > 0 {
            rec(i + 1, cost, used, free_rows - 1, acc, best);
        }
        if used_cols < m {
            for j in 0..m {
                if !used[j] {
                    used[j] = true;
                    rec(i + 1, cost, used, free_rows, acc + cost[i][j], best);
                    used[j] = false;
                }
            }
        }
    }
    let mut best = f64::INFINITY;
    let mut used = vec![false; m];
    rec(0, cost, &mut used, n.saturating_sub(m), 0.0, &mut best);
    if n == 0 || m == 0 {
        0.0
    } else {
        best
    }
}

pub fn random_cost_matrix(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = rng.random_range(1..=6);
    let m = rng.random_range(1..=6);
    let integer = rng.random_bool(0.5);
    (0..n)
        .map(|_| {
            (0..m)
                .map(|_| if integer { rng.random_range(0..5) as f64 } else { rng.random_range(0.0..10.0) })
                .collect()
        })
        .collect()
}

/// Discrete Fréchet distance straight from its recursive definition.
pub fn frechet_recursive(a: &[Point], b: &[Point]) -> f64 {
    fn c(a: &[Point], b: &[Point], i: usize, j: usize) -> f64 {
        let d = dist(a[i], b[j]);
        match (i, j) {
            (0, 0) => d,
            (0, _) => c(a, b, 0, j - 1).max(d),
            (_, 0) => c(a, b, i - 1, 0).max(d),
            _ => c(a, b, i - 1, j).min(c(a, b, i - 1, j - 1)).min(c(a, b, i, j - 1)).max(d),
        }
    }
    c(a, b, a.len() - 1, b.len() - 1)
}

pub fn random_polyline(rng: &mut ChaCha8Rng) -> Vec<Point> {
    let n = rng.random_range(1..=8);
    (0..n).map(|_| [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)]).collect()
}

/// Half width large enough that no predicted point sits in the P2P clamp.
const WIDE_P2P: f64 = 200.0;

/// Keeps the loss near 1: central differences carry an absolute error of
/// roughly `|f| · 1e-11`, which would swamp near-zero gradient entries.
fn scaled(w: CostWeights, k: f64) -> CostWeights {
    CostWeights {
        cls: w.cls * k,
        pt: w.pt * k,
        iou: w.iou * k,
        topo: w.topo * k,
        aux: w.aux * k,
    }
}

/// Finite-difference check of the full model under each loss term alone.
pub fn model_term_reports() -> Vec<(&'static str, GradCheckReport)> {
    let cfg = ModelConfig {
        encoder: MapEncoderConfig {
            d_h: 8,
            layers: 1,
            heads: 2,
            ..MapEncoderConfig::default()
        },
        grid_nx: 4,
        grid_ny: 4,
        dec_layers: 1,
        n_area_queries: 3,
        n_lane_queries: 4,
        n_a: 6,
        n_s: 3,
        topo_hidden: 8,
        ..ModelConfig::default()
    };
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, &mut ChaCha8Rng::seed_from_u64(11), cfg).unwrap();
    let gen = GenConfig {
        lanes_min: 2,
        area_prob: 1.0,
        ..GenConfig::default()
    };
    let sample = prepare_sample(generate_scene(21, &gen).unwrap(), &model).unwrap();
    let (boxes, cols): (Vec<BoxInput>, _) = lt_inputs(&sample.scene, None, 0.5);
    let zero = CostWeights {
        cls: 0.0,
        pt: 0.0,
        iou: 0.0,
        topo: 0.0,
        aux: 0.0,
    };
    let terms: [(&'static str, CostWeights, fn(&str) -> bool); 6] = [
        ("classification", CostWeights { cls: 2.0, ..zero }, |n| !n.starts_with("topology_") && !n.starts_with("aux_seg")),
        ("point_l1", CostWeights { pt: 0.05, ..zero }, |n| !n.starts_with("topology_") && !n.starts_with("aux_seg")),
        ("p2p_iou", CostWeights { iou: 2.0, ..zero }, |n| !n.starts_with("topology_") && !n.starts_with("aux_seg")),
        ("topology", CostWeights { topo: 1.0, ..zero }, |_| true),
        ("aux_segmentation", CostWeights { aux: 1.0, ..zero }, |n| {
            ["bev", "fusion", "map_encoder", "aux_seg"].iter().any(|p| n.starts_with(p))
        }),
        ("total", scaled(CostWeights::default(), 0.01), |_| true),
    ];
    terms
        .into_iter()
        .map(|(name, w, select)| {
            let r = param_grad_check(
                &store,
                select,
                |g, st| {
                    let out = model.forward(g, st, &sample.gv, &boxes, ForwardOptions::default()).map_err(te)?;
                    Ok(total_loss(g, &out, &sample.targets, &cols, &w, WIDE_P2P).map_err(te)?.total)
                },
                GradCheckConfig::default(),
            )
            .unwrap();
            (name, r)
        })
        .collect()
}

fn te(e: impl std::fmt::Display) -> TensorError {
    TensorError::Invalid(e.to_string())
}
