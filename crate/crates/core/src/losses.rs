//! Matching costs, P2P IoU, focal classification, topology and segmentation
//! losses, and their weighted composition.

use mapkit_tensor::{Graph, NodeId, Tensor};

use crate::bev::{rasterize_foreground, row_points, BevGrid, ModelConfig, ModelOutputs, AREA_CLASSES, LANE_CLASSES};
use crate::error::{CoreError, CoreResult};
use crate::hungarian::{hungarian, Assignment};
use crate::scene::{dist, resample_points, resample_ring, Point, Scene};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeights {
    pub cls: f64,
    pub pt: f64,
    pub iou: f64,
    pub topo: f64,
    pub aux: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            pt: 5.0,
            iou: 2.0,
            topo: 1.0,
            aux: 1.0,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> CoreResult<()> {
        let all = [self.cls, self.pt, self.iou, self.topo, self.aux];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(CoreError::Config("loss weights must be finite and ≥ 0".into()));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(CoreError::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// Mean over points of `max(0, 2w − d) / (2w + d)`.
pub fn p2p_iou(a: &[Point], b: &[Point], w: f64) -> CoreResult<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(CoreError::Shape(format!("p2p_iou over {} vs {} points", a.len(), b.len())));
    }
    if !(w > 0.0) {
        return Err(CoreError::Config(format!("p2p half width {w} must be positive")));
    }
    let s: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| {
            let d = dist(*p, *q);
            (2.0 * w - d).max(0.0) / (2.0 * w + d)
        })
        .sum();
    Ok(s / a.len() as f64)
}

pub fn p2p_iou_loss(a: &[Point], b: &[Point], w: f64) -> CoreResult<f64> {
    Ok(1.0 - p2p_iou(a, b, w)?)
}

/// Mean over points of `|dx| + |dy|`.
pub fn mean_l1(a: &[Point], b: &[Point]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(p, q)| (p[0] - q[0]).abs() + (p[1] - q[1]).abs()).sum();
    s / a.len().max(1) as f64
}

fn geometry_cost(pred: &[Point], gt: &[Point], weights: &CostWeights, w: f64) -> CoreResult<f64> {
    Ok(weights.pt * mean_l1(pred, gt) + weights.iou * p2p_iou_loss(pred, gt, w)?)
}

/// Every rotation of the ring in both orientations; the identity comes first.
pub fn ring_alignments(ring: &[Point]) -> Vec<Vec<Point>> {
    let n = ring.len();
    let mut out = Vec::with_capacity(2 * n);
    for s in 0..n {
        out.push((0..n).map(|k| ring[(s + k) % n]).collect());
    }
    for s in 0..n {
        out.push((0..n).map(|k| ring[(s + n - k) % n]).collect());
    }
    out
}

/// Cost of pairing a prediction with a ground-truth instance, plus the gt
/// points in the order that achieved it. Closed chains try every cyclic
/// alignment; the first minimum wins.
pub fn match_cost(
    class_prob: f64,
    pred: &[Point],
    gt: &[Point],
    closed: bool,
    weights: &CostWeights,
    w: f64,
) -> CoreResult<(f64, Vec<Point>)> {
    if pred.len() != gt.len() {
        return Err(CoreError::Shape(format!("match_cost over {} vs {} points", pred.len(), gt.len())));
    }
    let cls = weights.cls * (1.0 - class_prob);
    if !closed {
        return Ok((cls + geometry_cost(pred, gt, weights, w)?, gt.to_vec()));
    }
    let mut best: Option<(f64, Vec<Point>)> = None;
    for cand in ring_alignments(gt) {
        let c = geometry_cost(pred, &cand, weights, w)?;
        if best.as_ref().is_none_or(|(b, _)| c < *b) {
            best = Some((c, cand));
        }
    }
    let (c, aligned) = best.expect("non-empty ring");
    Ok((cls + c, aligned))
}

/// Focal classification summed over rows; unmatched rows carry the
/// background index `n_classes`.
pub fn classification_loss(g: &mut Graph, logits: NodeId, targets: &[usize]) -> CoreResult<NodeId> {
    Ok(g.focal(logits, targets, FOCAL_ALPHA, FOCAL_GAMMA)?)
}

/// Mean BCE over every `(i, j)` pair of an `n × m` logit matrix. Row and
/// column assignments map prediction indices to gt indices; a pair is
/// positive only when both ends are matched and adjacent in the gt.
pub fn topology_loss(
    g: &mut Graph,
    logits: NodeId,
    gt_adj: &[Vec<bool>],
    rows: &[Option<usize>],
    cols: &[Option<usize>],
    skip_diagonal: bool,
) -> CoreResult<NodeId> {
    let v = g.value(logits);
    let (n, m) = (rows.len(), cols.len());
    if v.len() != n * m {
        return Err(CoreError::Shape(format!("topology logits {:?} vs {n} × {m}", v.shape())));
    }
    if n * m == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mut targets = Vec::with_capacity(n * m);
    let mut weights = Vec::with_capacity(n * m);
    for (i, r) in rows.iter().enumerate() {
        for (j, c) in cols.iter().enumerate() {
            let t = match (r, c) {
                (Some(a), Some(b)) => gt_adj.get(*a).and_then(|row| row.get(*b)).copied().unwrap_or(false),
                _ => false,
            };
            targets.push(if t { 1.0 } else { 0.0 });
            weights.push(if skip_diagonal && i == j { 0.0 } else { 1.0 });
        }
    }
    Ok(g.bce_with_logits(logits, &targets, &weights)?)
}

/// Ground truth resampled to the model's chain lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTargets {
    /// Per lane: centerline, left, right, each `n_s` points, concatenated.
    pub lanes: Vec<Vec<Point>>,
    pub areas: Vec<(Vec<Point>, usize)>,
    pub foreground: Vec<f64>,
    pub adj_ll: Vec<Vec<bool>>,
    pub adj_lt: Vec<Vec<bool>>,
}

impl SceneTargets {
    pub fn from_scene(scene: &Scene, cfg: &ModelConfig, grid: &BevGrid) -> CoreResult<Self> {
        let mut lanes = Vec::with_capacity(scene.lane_segments.len());
        for l in &scene.lane_segments {
            let mut pts = resample_points(l.centerline.points(), cfg.n_s)?;
            pts.extend(resample_points(l.left_boundary.points(), cfg.n_s)?);
            pts.extend(resample_points(l.right_boundary.points(), cfg.n_s)?);
            lanes.push(pts);
        }
        let mut areas = Vec::with_capacity(scene.areas.len());
        for a in &scene.areas {
            areas.push((resample_ring(&a.boundary, cfg.n_a)?, a.class_id));
        }
        Ok(Self {
            lanes,
            areas,
            foreground: rasterize_foreground(scene, grid),
            adj_ll: scene.adj_ll.clone(),
            adj_lt: scene.adj_lt.clone(),
        })
    }
}

/// Weighted loss terms as added into the total.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub pt: f64,
    pub iou: f64,
    pub topo_ll: f64,
    pub topo_lt: f64,
    pub aux: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: NodeId,
    pub breakdown: LossBreakdown,
    /// gt lane index per lane query.
    pub lane_match: Vec<Option<usize>>,
    pub area_match: Vec<Option<usize>>,
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

struct HeadLoss {
    cls: NodeId,
    pt: Option<NodeId>,
    iou: Option<NodeId>,
    matches: Vec<Option<usize>>,
}

/// Hungarian-matched set loss for one decoder head. `gts` holds each gt's
/// chain and class id.
#[allow(clippy::too_many_arguments)]
fn head_loss(
    g: &mut Graph,
    logits: NodeId,
    points: NodeId,
    gts: &[(&[Point], usize)],
    n_classes: usize,
    closed: bool,
    weights: &CostWeights,
    w: f64,
) -> CoreResult<HeadLoss> {
    let (lv, pv) = (g.value(logits).clone(), g.value(points).clone());
    let nq = lv.rows();
    if pv.rows() != nq {
        return Err(CoreError::Shape(format!("{nq} logit rows vs {} point rows", pv.rows())));
    }
    let probs: Vec<Vec<f64>> = (0..nq).map(|i| softmax_row(lv.row(i))).collect();
    let preds: Vec<Vec<Point>> = (0..nq).map(|i| row_points(pv.row(i))).collect();
    let mut cost = vec![vec![0.0; gts.len()]; nq];
    let mut aligned = vec![vec![Vec::new(); gts.len()]; nq];
    for i in 0..nq {
        for (k, (gt, cls)) in gts.iter().enumerate() {
            if *cls >= n_classes {
                return Err(CoreError::Config(format!("gt class {cls} out of range for {n_classes} classes")));
            }
            let (c, a) = match_cost(probs[i][*cls], &preds[i], gt, closed, weights, w)?;
            cost[i][k] = c;
            aligned[i][k] = a;
        }
    }
    let assignment: Assignment = hungarian(&cost);
    let matches = assignment.row_to_col(nq);
    let targets: Vec<usize> = matches.iter().map(|m| m.map_or(n_classes, |k| gts[k].1)).collect();
    let norm = gts.len().max(1) as f64;
    let focal = classification_loss(g, logits, &targets)?;
    let cls = g.scale(focal, 1.0 / norm);
    if assignment.pairs.is_empty() {
        return Ok(HeadLoss {
            cls,
            pt: None,
            iou: None,
            matches,
        });
    }
    let rows: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
    let target: Vec<f64> = assignment
        .pairs
        .iter()
        .flat_map(|&(i, k)| aligned[i][k].iter().flat_map(|p| [p[0], p[1]]))
        .collect();
    let n_pts = pv.cols() / 2;
    let matched = g.gather_rows(points, &rows)?;
    let target = Tensor::new(vec![rows.len(), pv.cols()], target)?;
    let pt = g.l1(matched, target.clone(), n_pts as f64 * norm)?;
    let t = g.constant(target);
    let iou = g.p2p_iou_loss(matched, t, w)?;
    let iou = g.scale(iou, rows.len() as f64 / norm);
    Ok(HeadLoss {
        cls,
        pt: Some(pt),
        iou: Some(iou),
        matches,
    })
}

fn weighted_sum(g: &mut Graph, parts: &[Option<NodeId>], w: f64) -> CoreResult<(Option<NodeId>, f64)> {
    let mut acc: Option<NodeId> = None;
    for p in parts.iter().flatten() {
        acc = Some(match acc {
            None => *p,
            Some(a) => g.add(a, *p)?,
        });
    }
    Ok(match acc {
        Some(a) if w != 0.0 => {
            let s = g.scale(a, w);
            (Some(s), g.value(s).item())
        }
        _ => (None, 0.0),
    })
}

/// Full training objective for one scene. `lt_columns` maps each traffic
/// column of `out.topo_lt` to a gt element index.
pub fn total_loss(
    g: &mut Graph,
    out: &ModelOutputs,
    targets: &SceneTargets,
    lt_columns: &[Option<usize>],
    weights: &CostWeights,
    half_width: f64,
) -> CoreResult<LossOutput> {
    weights.validate()?;
    let lane_gts: Vec<(&[Point], usize)> = targets.lanes.iter().map(|l| (l.as_slice(), 0)).collect();
    let lanes = head_loss(g, out.lane_logits, out.lane_points, &lane_gts, LANE_CLASSES, false, weights, half_width)?;
    let area_gts: Vec<(&[Point], usize)> = targets.areas.iter().map(|(r, c)| (r.as_slice(), *c)).collect();
    let areas = head_loss(g, out.area_logits, out.area_points, &area_gts, AREA_CLASSES, true, weights, half_width)?;

    let ll = topology_loss(g, out.topo_ll, &targets.adj_ll, &lanes.matches, &lanes.matches, true)?;
    let lt = topology_loss(g, out.topo_lt, &targets.adj_lt, &lanes.matches, lt_columns, false)?;
    let seg = match out.seg_logits {
        Some(s) if weights.aux != 0.0 => {
            let ones = vec![1.0; targets.foreground.len()];
            Some(g.bce_with_logits(s, &targets.foreground, &ones)?)
        }
        _ => None,
    };

    let (cls, cls_v) = weighted_sum(g, &[Some(lanes.cls), Some(areas.cls)], weights.cls)?;
    let (pt, pt_v) = weighted_sum(g, &[lanes.pt, areas.pt], weights.pt)?;
    let (iou, iou_v) = weighted_sum(g, &[lanes.iou, areas.iou], weights.iou)?;
    let (tll, tll_v) = weighted_sum(g, &[Some(ll)], weights.topo)?;
    let (tlt, tlt_v) = weighted_sum(g, &[Some(lt)], weights.topo)?;
    let (aux, aux_v) = weighted_sum(g, &[seg], weights.aux)?;
    let (total, _) = weighted_sum(g, &[cls, pt, iou, tll, tlt, aux], 1.0)?;
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    };
    let breakdown = LossBreakdown {
        cls: cls_v,
        pt: pt_v,
        iou: iou_v,
        topo_ll: tll_v,
        topo_lt: tlt_v,
        aux: aux_v,
        total: g.value(total).item(),
    };
    Ok(LossOutput {
        total,
        breakdown,
        lane_match: lanes.matches,
        area_match: areas.matches,
    })
}
