//! Polyline distances, dataset-level average precision for detections and
//! topology, and the OLUS aggregate.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::hungarian::hungarian;
use crate::scene::{dist, resample_points, resample_ring, Point, Scene};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("{name} = {value} outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("misaligned input: {0}")]
    Misaligned(String),
    #[error(transparent)]
    Scene(#[from] crate::scene::SceneError),
}

pub fn frechet_distance(a: &[Point], b: &[Point]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "frechet of an empty polyline");
    let m = b.len();
    let mut prev = vec![0.0; m];
    let mut cur = vec![0.0; m];
    for (i, pa) in a.iter().enumerate() {
        for (j, pb) in b.iter().enumerate() {
            let d = dist(*pa, *pb);
            cur[j] = match (i, j) {
                (0, 0) => d,
                (0, _) => d.max(cur[j - 1]),
                (_, 0) => d.max(prev[0]),
                _ => d.max(prev[j].min(prev[j - 1]).min(cur[j - 1])),
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m - 1]
}

/// `(mean_a min_b + mean_b min_a) / 2`.
pub fn chamfer_distance(a: &[Point], b: &[Point]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "chamfer of an empty point set");
    let one_way = |x: &[Point], y: &[Point]| {
        x.iter()
            .map(|p| y.iter().map(|q| dist(*p, *q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / x.len() as f64
    };
    (one_way(a, b) + one_way(b, a)) / 2.0
}

pub fn bbox_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// All-point interpolated AP of a ranked list of hit flags. Missed ground
/// truth counts through `n_gt`.
pub fn average_precision(ranked_hits: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(ranked_hits.len());
    let mut tp = 0usize;
    for (k, &hit) in ranked_hits.iter().enumerate() {
        tp += usize::from(hit);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    let mut best = 0.0_f64;
    let mut sum = 0.0;
    for k in (0..ranked_hits.len()).rev() {
        best = best.max(precision[k]);
        if ranked_hits[k] {
            sum += best;
        }
    }
    sum / n_gt as f64
}

/// Orders `(score, hit)` records by descending score; equal scores keep
/// insertion order.
fn ranked(mut records: Vec<(f64, bool)>) -> Vec<bool> {
    records.sort_by(|a, b| b.0.total_cmp(&a.0));
    records.into_iter().map(|r| r.1).collect()
}

/// Score-ordered greedy matching: each prediction takes the nearest unmatched
/// same-class ground truth within `tau`. Returns the gt index per prediction.
pub fn greedy_match(
    pred_scores: &[f64],
    pred_classes: &[usize],
    gt_classes: &[usize],
    distances: &[Vec<f64>],
    tau: f64,
) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..pred_scores.len()).collect();
    order.sort_by(|&a, &b| pred_scores[b].total_cmp(&pred_scores[a]));
    let mut taken = vec![false; gt_classes.len()];
    let mut out = vec![None; pred_scores.len()];
    for p in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, &gc) in gt_classes.iter().enumerate() {
            if taken[g] || gc != pred_classes[p] {
                continue;
            }
            let d = distances[p][g];
            if d <= tau && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((g, d));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            out[p] = Some(g);
        }
    }
    out
}

/// Accumulates per-class, per-threshold detection records across scenes.
#[derive(Debug, Clone)]
pub struct DetAccumulator {
    thresholds: Vec<f64>,
    records: Vec<BTreeMap<usize, Vec<(f64, bool)>>>,
    n_gt: BTreeMap<usize, usize>,
}

impl DetAccumulator {
    pub fn new(thresholds: &[f64]) -> Self {
        assert!(!thresholds.is_empty(), "at least one threshold");
        Self {
            thresholds: thresholds.to_vec(),
            records: vec![BTreeMap::new(); thresholds.len()],
            n_gt: BTreeMap::new(),
        }
    }

    /// `distances[p][g]` between prediction `p` and ground truth `g`.
    pub fn add_scene(&mut self, scores: &[f64], pred_classes: &[usize], gt_classes: &[usize], distances: &[Vec<f64>]) {
        for &c in gt_classes {
            *self.n_gt.entry(c).or_insert(0) += 1;
        }
        for (t, &tau) in self.thresholds.iter().enumerate() {
            let m = greedy_match(scores, pred_classes, gt_classes, distances, tau);
            for (p, hit) in m.iter().enumerate() {
                self.records[t]
                    .entry(pred_classes[p])
                    .or_default()
                    .push((scores[p], hit.is_some()));
            }
        }
    }

    /// Mean over thresholds of the AP averaged over classes present in gt.
    pub fn score(&self) -> f64 {
        let classes: Vec<usize> = self.n_gt.iter().filter(|(_, &n)| n > 0).map(|(&c, _)| c).collect();
        if classes.is_empty() {
            return 0.0;
        }
        let mut total = 0.0;
        for recs in &self.records {
            let per_class: f64 = classes
                .iter()
                .map(|c| {
                    let r = recs.get(c).cloned().unwrap_or_default();
                    average_precision(&ranked(r), self.n_gt[c])
                })
                .sum();
            total += per_class / classes.len() as f64;
        }
        total / self.thresholds.len() as f64
    }
}

/// One-scene convenience wrapper around [`DetAccumulator`].
pub fn det_score(
    scores: &[f64],
    pred_classes: &[usize],
    gt_classes: &[usize],
    distances: &[Vec<f64>],
    thresholds: &[f64],
) -> f64 {
    let mut acc = DetAccumulator::new(thresholds);
    acc.add_scene(scores, pred_classes, gt_classes, distances);
    acc.score()
}

pub fn det_t_score(pred: &[ScoredBox], gt: &[([f64; 4], usize)], iou_threshold: f64) -> f64 {
    let mut acc = DetAccumulator::new(&[1.0 - iou_threshold]);
    add_boxes(&mut acc, pred, gt);
    acc.score()
}

fn add_boxes(acc: &mut DetAccumulator, pred: &[ScoredBox], gt: &[([f64; 4], usize)]) {
    let d: Vec<Vec<f64>> = pred
        .iter()
        .map(|p| gt.iter().map(|g| 1.0 - bbox_iou(p.bbox, g.0)).collect())
        .collect();
    let scores: Vec<f64> = pred.iter().map(|p| p.score).collect();
    let pc: Vec<usize> = pred.iter().map(|p| p.class_id).collect();
    let gc: Vec<usize> = gt.iter().map(|g| g.1).collect();
    acc.add_scene(&scores, &pc, &gc, &d);
}

/// Edge-level AP of topology predictions projected through instance matchings.
#[derive(Debug, Clone, Default)]
pub struct TopAccumulator {
    records: Vec<(f64, bool)>,
    n_gt_edges: usize,
}

impl TopAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// `probs[i][j]` for predicted rows/cols; `row_match` / `col_match` map
    /// predictions to gt indices. With `skip_diagonal`, pairs `i == j` are
    /// ignored (lane–lane case).
    pub fn add_scene(
        &mut self,
        probs: &[Vec<f64>],
        gt_adj: &[Vec<bool>],
        row_match: &[Option<usize>],
        col_match: &[Option<usize>],
        skip_diagonal: bool,
    ) -> Result<(), MetricError> {
        if probs.len() != row_match.len() || probs.iter().any(|r| r.len() != col_match.len()) {
            return Err(MetricError::Misaligned("topology probabilities vs matching".into()));
        }
        self.n_gt_edges += gt_adj
            .iter()
            .enumerate()
            .map(|(a, r)| r.iter().enumerate().filter(|&(b, &e)| e && !(skip_diagonal && a == b)).count())
            .sum::<usize>();
        for (i, row) in probs.iter().enumerate() {
            for (j, &p) in row.iter().enumerate() {
                if skip_diagonal && i == j {
                    continue;
                }
                let hit = match (row_match[i], col_match[j]) {
                    (Some(a), Some(b)) => gt_adj[a][b],
                    _ => false,
                };
                self.records.push((p, hit));
            }
        }
        Ok(())
    }

    pub fn score(&self) -> f64 {
        if self.n_gt_edges == 0 {
            return 0.0;
        }
        average_precision(&ranked(self.records.clone()), self.n_gt_edges)
    }
}

pub fn top_score(
    probs: &[Vec<f64>],
    gt_adj: &[Vec<bool>],
    row_match: &[Option<usize>],
    col_match: &[Option<usize>],
    skip_diagonal: bool,
) -> Result<f64, MetricError> {
    let mut acc = TopAccumulator::new();
    acc.add_scene(probs, gt_adj, row_match, col_match, skip_diagonal)?;
    Ok(acc.score())
}

pub fn olus(det_l: f64, det_a: f64, det_t: f64, top_ll: f64, top_lt: f64) -> Result<f64, MetricError> {
    for (name, value) in [
        ("det_l", det_l),
        ("det_a", det_a),
        ("det_t", det_t),
        ("top_ll", top_ll),
        ("top_lt", top_lt),
    ] {
        if !(0.0..=1.0).contains(&value) {
            return Err(MetricError::OutOfRange { name, value });
        }
    }
    Ok((det_l + det_a + det_t + top_ll.sqrt() + top_lt.sqrt()) / 5.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub det_l: f64,
    pub det_a: f64,
    pub det_t: f64,
    pub top_ll: f64,
    pub top_lt: f64,
    pub olus: f64,
}

pub const REPORT_HEADER: &str = "det_l,det_a,det_t,top_ll,top_lt";

impl MetricReport {
    pub fn new(det_l: f64, det_a: f64, det_t: f64, top_ll: f64, top_lt: f64) -> Result<Self, MetricError> {
        Ok(Self {
            det_l,
            det_a,
            det_t,
            top_ll,
            top_lt,
            olus: olus(det_l, det_a, det_t, top_ll, top_lt)?,
        })
    }

    pub fn csv_header() -> String {
        format!("{REPORT_HEADER},olus")
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
            self.det_l, self.det_a, self.det_t, self.top_ll, self.top_lt, self.olus
        )
    }
}

// ---- scene-level evaluation ----

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredLane {
    pub centerline: Vec<Point>,
    pub left: Vec<Point>,
    pub right: Vec<Point>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredArea {
    pub ring: Vec<Point>,
    pub class_id: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub bbox: [f64; 4],
    pub class_id: usize,
    pub score: f64,
}

/// Everything the evaluator needs from one scene's inference.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScenePrediction {
    pub lanes: Vec<ScoredLane>,
    pub areas: Vec<ScoredArea>,
    pub traffic: Vec<ScoredBox>,
    /// `lanes × lanes` connection probabilities.
    pub adj_ll: Vec<Vec<f64>>,
    /// `lanes × traffic` association probabilities.
    pub adj_lt: Vec<Vec<f64>>,
}

impl ScenePrediction {
    /// Ground truth replayed as confident predictions.
    pub fn from_ground_truth(scene: &Scene) -> Self {
        let prob = |b: &bool| if *b { 1.0 } else { 0.0 };
        Self {
            lanes: scene
                .lane_segments
                .iter()
                .map(|l| ScoredLane {
                    centerline: l.centerline.points().to_vec(),
                    left: l.left_boundary.points().to_vec(),
                    right: l.right_boundary.points().to_vec(),
                    score: 1.0,
                })
                .collect(),
            areas: scene
                .areas
                .iter()
                .map(|a| ScoredArea {
                    ring: a.boundary.clone(),
                    class_id: a.class_id,
                    score: 1.0,
                })
                .collect(),
            traffic: scene
                .traffic_elements
                .iter()
                .map(|t| ScoredBox {
                    bbox: t.bbox,
                    class_id: t.class_id,
                    score: 1.0,
                })
                .collect(),
            adj_ll: scene.adj_ll.iter().map(|r| r.iter().map(prob).collect()).collect(),
            adj_lt: scene.adj_lt.iter().map(|r| r.iter().map(prob).collect()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub lane_thresholds: Vec<f64>,
    pub area_thresholds: Vec<f64>,
    pub iou_threshold: f64,
    /// Fréchet gate for pairing predicted and true lanes in topology scoring.
    pub topology_match_threshold: f64,
    pub lane_points: usize,
    pub area_points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            lane_thresholds: vec![1.0, 2.0, 3.0],
            area_thresholds: vec![0.5, 1.0, 1.5],
            iou_threshold: 0.5,
            topology_match_threshold: 3.0,
            lane_points: 10,
            area_points: 100,
        }
    }
}

/// Pairs predicted boxes with gt boxes by IoU ≥ threshold using Hungarian
/// assignment on `1 − IoU`.
pub fn match_boxes(pred: &[[f64; 4]], gt: &[[f64; 4]], iou_threshold: f64) -> Vec<Option<usize>> {
    let cost: Vec<Vec<f64>> = pred.iter().map(|p| gt.iter().map(|g| 1.0 - bbox_iou(*p, *g)).collect()).collect();
    let mut out = vec![None; pred.len()];
    for (p, g) in hungarian(&cost).pairs {
        if 1.0 - cost[p][g] >= iou_threshold {
            out[p] = Some(g);
        }
    }
    out
}

fn lane_distances(pred: &[ScoredLane], scene: &Scene, n: usize) -> Result<Vec<Vec<f64>>, MetricError> {
    let gts: Vec<Vec<Point>> = scene
        .lane_segments
        .iter()
        .map(|l| resample_points(l.centerline.points(), n))
        .collect::<Result<_, _>>()?;
    pred.iter()
        .map(|p| {
            let pc = resample_points(&p.centerline, n)?;
            Ok(gts.iter().map(|g| frechet_distance(&pc, g)).collect())
        })
        .collect()
}

fn area_distances(pred: &[ScoredArea], scene: &Scene, n: usize) -> Result<Vec<Vec<f64>>, MetricError> {
    let gts: Vec<Vec<Point>> = scene
        .areas
        .iter()
        .map(|a| resample_ring(&a.boundary, n))
        .collect::<Result<_, _>>()?;
    pred.iter()
        .map(|p| {
            let pr = resample_ring(&p.ring, n)?;
            Ok(gts.iter().map(|g| chamfer_distance(&pr, g)).collect())
        })
        .collect()
}

/// Dataset-level scores: matches from all scenes are pooled before AP.
pub fn evaluate(scenes: &[Scene], preds: &[ScenePrediction], cfg: &EvalConfig) -> Result<MetricReport, MetricError> {
    if scenes.len() != preds.len() {
        return Err(MetricError::Misaligned(format!(
            "{} scenes vs {} predictions",
            scenes.len(),
            preds.len()
        )));
    }
    let mut det_l = DetAccumulator::new(&cfg.lane_thresholds);
    let mut det_a = DetAccumulator::new(&cfg.area_thresholds);
    let mut det_t = DetAccumulator::new(&[1.0 - cfg.iou_threshold]);
    let mut top_ll = TopAccumulator::new();
    let mut top_lt = TopAccumulator::new();
    for (k, (scene, pred)) in scenes.iter().zip(preds).enumerate() {
        let nl = pred.lanes.len();
        if pred.adj_ll.len() != nl || pred.adj_lt.len() != nl {
            return Err(MetricError::Misaligned(format!("scene {k}: topology rows ≠ lane count")));
        }
        let ld = lane_distances(&pred.lanes, scene, cfg.lane_points)?;
        let lane_scores: Vec<f64> = pred.lanes.iter().map(|l| l.score).collect();
        let lane_classes = vec![0; nl];
        let gt_lane_classes: Vec<usize> = scene.lane_segments.iter().map(|l| l.class_id).collect();
        det_l.add_scene(&lane_scores, &lane_classes, &gt_lane_classes, &ld);

        let ad = area_distances(&pred.areas, scene, cfg.area_points)?;
        det_a.add_scene(
            &pred.areas.iter().map(|a| a.score).collect::<Vec<_>>(),
            &pred.areas.iter().map(|a| a.class_id).collect::<Vec<_>>(),
            &scene.areas.iter().map(|a| a.class_id).collect::<Vec<_>>(),
            &ad,
        );

        let gt_boxes: Vec<([f64; 4], usize)> = scene.traffic_elements.iter().map(|t| (t.bbox, t.class_id)).collect();
        add_boxes(&mut det_t, &pred.traffic, &gt_boxes);

        let lane_match = greedy_match(&lane_scores, &lane_classes, &gt_lane_classes, &ld, cfg.topology_match_threshold);
        top_ll.add_scene(&pred.adj_ll, &scene.adj_ll, &lane_match, &lane_match, true)?;
        let box_match = match_boxes(
            &pred.traffic.iter().map(|b| b.bbox).collect::<Vec<_>>(),
            &scene.traffic_elements.iter().map(|t| t.bbox).collect::<Vec<_>>(),
            cfg.iou_threshold,
        );
        top_lt.add_scene(&pred.adj_lt, &scene.adj_lt, &lane_match, &box_match, false)?;
    }
    MetricReport::new(det_l.score(), det_a.score(), det_t.score(), top_ll.score(), top_lt.score())
}
