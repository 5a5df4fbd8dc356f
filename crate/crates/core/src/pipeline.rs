//! Sample preparation, detection files, training loops and model evaluation.

use std::path::Path;

use mapkit_tensor::{AdamW, Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bev::{row_points, BoxInput, ForwardOptions, Model, AREA_CLASSES};
use crate::encoding::{build_graph_vector, GraphVector};
use crate::error::{CoreError, CoreResult};
use crate::losses::{total_loss, CostWeights, LossBreakdown, SceneTargets};
use crate::metrics::{evaluate, match_boxes, EvalConfig, MetricReport, ScenePrediction, ScoredArea, ScoredBox, ScoredLane};
use crate::scene::{crop_local_view, validate_bbox, Scene, SceneError, TRAFFIC_CLASS_COUNT};

/// One scene with its model input and resampled targets.
#[derive(Debug, Clone)]
pub struct Sample {
    pub scene: Scene,
    pub gv: GraphVector,
    pub targets: SceneTargets,
}

pub fn prepare_sample(scene: Scene, model: &Model) -> CoreResult<Sample> {
    let view = crop_local_view(&scene.sd_map, scene.ego, model.cfg.extent);
    let gv = build_graph_vector(&view, &model.cfg.encoding, model.cfg.encoder.n_points)?;
    let targets = SceneTargets::from_scene(&scene, &model.cfg, &model.grid)?;
    Ok(Sample { scene, gv, targets })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DetectionRecord {
    bbox: [f64; 4],
    class_id: usize,
    score: f64,
}

/// Reads a JSON array with one array of `{bbox, class_id, score}` per frame.
pub fn load_detections(path: &Path) -> CoreResult<Vec<Vec<ScoredBox>>> {
    let text = std::fs::read_to_string(path).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let frames: Vec<Vec<DetectionRecord>> = serde_json::from_str(&text).map_err(SceneError::Parse)?;
    let mut out = Vec::with_capacity(frames.len());
    for (f, frame) in frames.into_iter().enumerate() {
        let mut boxes = Vec::with_capacity(frame.len());
        for (k, d) in frame.into_iter().enumerate() {
            let ctx = |msg: String| CoreError::Config(format!("frame {f} detection {k}: {msg}"));
            validate_bbox(d.bbox).map_err(|e| ctx(e.to_string()))?;
            if d.class_id >= TRAFFIC_CLASS_COUNT {
                return Err(ctx(format!("class_id {} out of range", d.class_id)));
            }
            if !(0.0..=1.0).contains(&d.score) {
                return Err(ctx(format!("score {} outside [0, 1]", d.score)));
            }
            boxes.push(ScoredBox {
                bbox: d.bbox,
                class_id: d.class_id,
                score: d.score,
            });
        }
        out.push(boxes);
    }
    Ok(out)
}

pub fn detections_to_json(frames: &[Vec<ScoredBox>]) -> String {
    let recs: Vec<Vec<DetectionRecord>> = frames
        .iter()
        .map(|f| {
            f.iter()
                .map(|b| DetectionRecord {
                    bbox: b.bbox,
                    class_id: b.class_id,
                    score: b.score,
                })
                .collect()
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&recs).expect("serializable");
    s.push('\n');
    s
}

pub fn write_detections(frames: &[Vec<ScoredBox>], path: &Path) -> CoreResult<()> {
    std::fs::write(path, detections_to_json(frames)).map_err(|source| {
        SceneError::Io {
            path: path.display().to_string(),
            source,
        }
        .into()
    })
}

fn gt_boxes(scene: &Scene) -> Vec<BoxInput> {
    scene
        .traffic_elements
        .iter()
        .map(|t| BoxInput {
            bbox: t.bbox,
            class_id: t.class_id,
        })
        .collect()
}

fn det_boxes(dets: &[ScoredBox]) -> Vec<BoxInput> {
    dets.iter()
        .map(|d| BoxInput {
            bbox: d.bbox,
            class_id: d.class_id,
        })
        .collect()
}

/// Traffic boxes fed to the lane–traffic head and the gt element behind each.
pub fn lt_inputs(scene: &Scene, dets: Option<&[ScoredBox]>, iou: f64) -> (Vec<BoxInput>, Vec<Option<usize>>) {
    match dets {
        None => {
            let b = gt_boxes(scene);
            let cols = (0..b.len()).map(Some).collect();
            (b, cols)
        }
        Some(d) => {
            let pred: Vec<[f64; 4]> = d.iter().map(|x| x.bbox).collect();
            let gt: Vec<[f64; 4]> = scene.traffic_elements.iter().map(|t| t.bbox).collect();
            (det_boxes(d), match_boxes(&pred, &gt, iou))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub forward: ForwardOptions,
    pub weights: CostWeights,
    pub half_width: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 12,
            lr: 2e-4,
            seed: 0,
            forward: ForwardOptions::default(),
            weights: CostWeights::default(),
            half_width: 1.0,
        }
    }
}

impl TrainOptions {
    /// Loss weights with the aux term zeroed when the aux head is off.
    pub fn effective_weights(&self) -> CostWeights {
        let mut w = self.weights;
        if !self.forward.aux {
            w.aux = 0.0;
        }
        w
    }
}

/// One optimizer step on one scene.
pub fn train_step(
    model: &Model,
    store: &mut ParamStore,
    opt: &mut AdamW,
    sample: &Sample,
    dets: Option<&[ScoredBox]>,
    opts: &TrainOptions,
) -> CoreResult<LossBreakdown> {
    let (boxes, cols) = lt_inputs(&sample.scene, dets, EvalConfig::default().iou_threshold);
    let mut g = Graph::new();
    let out = model.forward(&mut g, store, &sample.gv, &boxes, opts.forward)?;
    let loss = total_loss(&mut g, &out, &sample.targets, &cols, &opts.effective_weights(), opts.half_width)?;
    let breakdown = loss.breakdown;
    if !breakdown.total.is_finite() {
        return Err(CoreError::Config(format!("non-finite training loss {}", breakdown.total)));
    }
    store.zero_grad();
    g.backward(loss.total)?.accumulate_into(store);
    opt.step(store)?;
    Ok(breakdown)
}

/// One pass over `samples` in an order shuffled by `(seed, epoch)`; returns
/// the mean breakdown.
pub fn train_epoch(
    model: &Model,
    store: &mut ParamStore,
    opt: &mut AdamW,
    samples: &[Sample],
    dets: Option<&[Vec<ScoredBox>]>,
    opts: &TrainOptions,
    epoch: usize,
) -> CoreResult<LossBreakdown> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_0000);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    let mut mean = LossBreakdown::default();
    for &i in &order {
        let b = train_step(model, store, opt, &samples[i], dets.map(|d| d[i].as_slice()), opts)?;
        mean.cls += b.cls;
        mean.pt += b.pt;
        mean.iou += b.iou;
        mean.topo_ll += b.topo_ll;
        mean.topo_lt += b.topo_lt;
        mean.aux += b.aux;
        mean.total += b.total;
    }
    let n = samples.len().max(1) as f64;
    Ok(LossBreakdown {
        cls: mean.cls / n,
        pt: mean.pt / n,
        iou: mean.iou / n,
        topo_ll: mean.topo_ll / n,
        topo_lt: mean.topo_lt / n,
        aux: mean.aux / n,
        total: mean.total / n,
    })
}

/// Mean loss over `samples` without updating anything.
pub fn mean_loss(
    model: &Model,
    store: &ParamStore,
    samples: &[Sample],
    dets: Option<&[Vec<ScoredBox>]>,
    opts: &TrainOptions,
) -> CoreResult<f64> {
    let mut acc = 0.0;
    for (i, s) in samples.iter().enumerate() {
        let (boxes, cols) = lt_inputs(&s.scene, dets.map(|d| d[i].as_slice()), EvalConfig::default().iou_threshold);
        let mut g = Graph::inference();
        let out = model.forward(&mut g, store, &s.gv, &boxes, opts.forward)?;
        acc += total_loss(&mut g, &out, &s.targets, &cols, &opts.effective_weights(), opts.half_width)?
            .breakdown
            .total;
    }
    Ok(acc / samples.len().max(1) as f64)
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn matrix(t: &Tensor, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|i| (0..cols).map(|j| sigmoid(t.data()[i * cols + j])).collect()).collect()
}

/// Inference on one scene; every query becomes a scored prediction.
pub fn predict(
    model: &Model,
    store: &ParamStore,
    gv: &GraphVector,
    detections: &[ScoredBox],
    forward: ForwardOptions,
) -> CoreResult<ScenePrediction> {
    let boxes = det_boxes(detections);
    let mut g = Graph::inference();
    let fwd = ForwardOptions { aux: false, ..forward };
    let out = model.forward(&mut g, store, gv, &boxes, fwd)?;
    let n_s = model.cfg.n_s;
    let lane_logits = g.value(out.lane_logits);
    let lane_points = g.value(out.lane_points);
    let lanes: Vec<ScoredLane> = (0..lane_logits.rows())
        .map(|i| {
            let pts = row_points(lane_points.row(i));
            ScoredLane {
                centerline: pts[..n_s].to_vec(),
                left: pts[n_s..2 * n_s].to_vec(),
                right: pts[2 * n_s..].to_vec(),
                score: softmax(lane_logits.row(i))[0],
            }
        })
        .collect();
    let area_logits = g.value(out.area_logits);
    let area_points = g.value(out.area_points);
    let areas = (0..area_logits.rows())
        .map(|i| {
            let p = softmax(area_logits.row(i));
            let (class_id, score) = p[..AREA_CLASSES]
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best });
            ScoredArea {
                ring: row_points(area_points.row(i)),
                class_id,
                score,
            }
        })
        .collect();
    let n = lanes.len();
    Ok(ScenePrediction {
        adj_ll: matrix(g.value(out.topo_ll), n, n),
        adj_lt: matrix(g.value(out.topo_lt), n, boxes.len()),
        lanes,
        areas,
        traffic: detections.to_vec(),
    })
}

pub fn evaluate_model(
    model: &Model,
    store: &ParamStore,
    samples: &[Sample],
    dets: &[Vec<ScoredBox>],
    forward: ForwardOptions,
    cfg: &EvalConfig,
) -> CoreResult<MetricReport> {
    if dets.len() != samples.len() {
        return Err(CoreError::Config(format!("{} detection frames for {} scenes", dets.len(), samples.len())));
    }
    let mut preds = Vec::with_capacity(samples.len());
    for (s, d) in samples.iter().zip(dets) {
        preds.push(predict(model, store, &s.gv, d, forward)?);
    }
    let scenes: Vec<Scene> = samples.iter().map(|s| s.scene.clone()).collect();
    Ok(evaluate(&scenes, &preds, cfg)?)
}

/// Freezes everything outside the topology heads.
pub fn freeze_backbone(store: &mut ParamStore) {
    store.freeze_where(|n| !is_topology_param(n));
}

pub fn is_topology_param(name: &str) -> bool {
    name.starts_with("topology_")
}
