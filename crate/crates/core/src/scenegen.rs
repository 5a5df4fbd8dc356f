//! Deterministic synthetic scenes, SD-map degradation, a simulated traffic
//! detector and class-balance resampling weights.
//!
//! Every scene draws from `ChaCha8Rng::seed_from_u64(seed)`: stream 0 builds
//! the scene and its SD map, stream 1 drives the simulated detector.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::metrics::ScoredBox;
use crate::scene::{
    dist, round_sig9, AreaInstance, Extent, LaneSegment, Point, Polyline, Pose2D, Scene, SceneError, SdMap,
    TrafficElement, AREA_PED_CROSSING, AREA_ROAD_BOUNDARY, CONNECT_EPS, IMAGE_HEIGHT, IMAGE_WIDTH, SD_CLASS_COUNT,
    TRAFFIC_CLASS_COUNT,
};

pub const LANE_WIDTH: f64 = 3.5;
/// Relative frequency of each traffic-element class; the tail is rare.
pub const TRAFFIC_CLASS_WEIGHTS: [f64; TRAFFIC_CLASS_COUNT] =
    [20.0, 17.0, 14.0, 11.0, 9.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0, 1.0];
const ROAD_CLASS_WEIGHTS: [f64; SD_CLASS_COUNT] = [1.0, 2.0, 4.0, 4.0, 3.0, 1.0, 0.5];
const WINDOW_MARGIN: f64 = 1.0;
const POINT_SPACING: f64 = 2.0;
const MIN_SEGMENT: f64 = 8.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    pub n_scenes: usize,
    /// The last `n_eval` scenes form the held-out split.
    pub n_eval: usize,
    pub lanes_min: usize,
    pub lanes_max: usize,
    pub area_prob: f64,
    pub traffic_min: usize,
    pub traffic_max: usize,
    pub sd_noise: f64,
    pub sd_stride: usize,
    pub extent: Extent,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_scenes: 130,
            n_eval: 30,
            lanes_min: 1,
            lanes_max: 3,
            area_prob: 0.6,
            traffic_min: 1,
            traffic_max: 4,
            sd_noise: 1.0,
            sd_stride: 3,
            extent: Extent::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::Invalid(format!("generator config: {m}")));
        if self.lanes_min > self.lanes_max || self.traffic_min > self.traffic_max {
            return bad("empty range");
        }
        if !(0.0..=1.0).contains(&self.area_prob) {
            return bad("area_prob outside [0, 1]");
        }
        if !(self.sd_noise >= 0.0) || self.sd_stride == 0 {
            return bad("sd_noise must be ≥ 0 and sd_stride ≥ 1");
        }
        if self.n_eval > self.n_scenes {
            return bad("n_eval exceeds n_scenes");
        }
        if !(self.extent.half_x > 0.0 && self.extent.half_y > 0.0) {
            return bad("extent must be positive");
        }
        Ok(())
    }

    pub fn scene_seed(&self, index: usize) -> u64 {
        self.seed.wrapping_add(index as u64)
    }

    pub fn split(&self, index: usize) -> &'static str {
        if index + self.n_eval >= self.n_scenes {
            "eval"
        } else {
            "train"
        }
    }
}

/// Constant-curvature road reference line through `(0, y0)` with heading
/// `theta` there.
#[derive(Debug, Clone, Copy)]
struct Road {
    y0: f64,
    theta: f64,
    kappa: f64,
}

impl Road {
    fn point(&self, s: f64, offset: f64) -> Point {
        let h = self.theta + self.kappa * s;
        let (x, y) = if self.kappa.abs() < 1e-9 {
            (s * self.theta.cos(), self.y0 + s * self.theta.sin())
        } else {
            (
                (h.sin() - self.theta.sin()) / self.kappa,
                self.y0 - (h.cos() - self.theta.cos()) / self.kappa,
            )
        };
        [x - offset * h.sin(), y + offset * h.cos()]
    }
}

fn quantize(p: Point) -> Point {
    [round_sig9(p[0]), round_sig9(p[1])]
}

fn sample_path(f: impl Fn(f64) -> Point, s0: f64, s1: f64) -> Vec<Point> {
    let n = (((s1 - s0) / POINT_SPACING).round() as usize).max(1) + 1;
    (0..n)
        .map(|k| quantize(f(s0 + (s1 - s0) * k as f64 / (n - 1) as f64)))
        .collect()
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Builds a lane segment whose centerline follows `offset(s)` on the road.
fn lane_segment(road: &Road, s0: f64, s1: f64, offset: impl Fn(f64) -> f64, reverse: bool) -> Result<LaneSegment, SceneError> {
    let mut c = sample_path(|s| road.point(s, offset(s)), s0, s1);
    let mut l = sample_path(|s| road.point(s, offset(s) + LANE_WIDTH / 2.0), s0, s1);
    let mut r = sample_path(|s| road.point(s, offset(s) - LANE_WIDTH / 2.0), s0, s1);
    if reverse {
        c.reverse();
        l.reverse();
        r.reverse();
        std::mem::swap(&mut l, &mut r);
    }
    Ok(LaneSegment {
        centerline: Polyline::new(c, 0)?,
        left_boundary: Polyline::new(l, 0)?,
        right_boundary: Polyline::new(r, 0)?,
        class_id: 0,
    })
}

fn inside(ext: &Extent, p: Point) -> bool {
    p[0].abs() <= ext.half_x - WINDOW_MARGIN && p[1].abs() <= ext.half_y - WINDOW_MARGIN
}

/// Longest run of `s` around 0 where every lane boundary stays in the window.
fn road_span(road: &Road, outer: f64, ext: &Extent) -> Option<(f64, f64)> {
    let ok = |s: f64| inside(ext, road.point(s, outer)) && inside(ext, road.point(s, -outer));
    if !ok(0.0) {
        return None;
    }
    let step = 0.25;
    let reach = 2.0 * (ext.half_x + ext.half_y);
    let mut hi = 0.0;
    while hi + step <= reach && ok(hi + step) {
        hi += step;
    }
    let mut lo = 0.0;
    while lo - step >= -reach && ok(lo - step) {
        lo -= step;
    }
    Some((lo, hi))
}

fn connectivity(lanes: &[LaneSegment]) -> Vec<Vec<bool>> {
    (0..lanes.len())
        .map(|i| {
            (0..lanes.len())
                .map(|j| i != j && dist(lanes[i].centerline.last(), lanes[j].centerline.first()) <= CONNECT_EPS)
                .collect()
        })
        .collect()
}

/// Pixel position of the element governing a lane that ends at `end`.
pub fn element_anchor(end: Point) -> [f64; 2] {
    [IMAGE_WIDTH / 2.0 - 25.0 * end[1], IMAGE_HEIGHT / 2.0 - 10.0 * end[0]]
}

fn clamp_box(cx: f64, cy: f64, w: f64, h: f64) -> [f64; 4] {
    let x0 = (cx - w / 2.0).clamp(0.0, IMAGE_WIDTH - w);
    let y0 = (cy - h / 2.0).clamp(0.0, IMAGE_HEIGHT - h);
    [round_sig9(x0), round_sig9(y0), round_sig9(x0 + w), round_sig9(y0 + h)]
}

fn ring_inside(ring: &[Point], ext: &Extent) -> bool {
    ring.iter().all(|p| inside(ext, *p))
}

/// One scene in the ego frame; its SD map is stored in the world frame.
pub fn generate_scene(seed: u64, cfg: &GenConfig) -> Result<Scene, SceneError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext = cfg.extent;
    let ego = Pose2D::new(
        round_sig9(rng.random_range(-500.0..500.0)),
        round_sig9(rng.random_range(-500.0..500.0)),
        round_sig9(rng.random_range(-3.1..3.1)),
    )?;
    let n_lanes = rng.random_range(cfg.lanes_min..=cfg.lanes_max);
    let mut lanes: Vec<LaneSegment> = Vec::new();
    let mut areas: Vec<AreaInstance> = Vec::new();
    let mut road_class = 0;

    if n_lanes > 0 {
        road_class = WeightedIndex::new(ROAD_CLASS_WEIGHTS).expect("weights").sample(&mut rng);
        let outer = n_lanes as f64 * LANE_WIDTH / 2.0;
        let lim = (ext.half_y - WINDOW_MARGIN - outer - 2.0).max(0.0);
        let road = Road {
            y0: rng.random_range(-lim.min(10.0)..=lim.min(10.0)),
            theta: rng.random_range(-0.35..0.35),
            kappa: rng.random_range(-0.012..0.012),
        };
        let reverse = rng.random_bool(0.5);
        let (lo, hi) = road_span(&road, outer, &ext).ok_or_else(|| SceneError::Invalid("road leaves window".into()))?;
        let offsets: Vec<f64> = (0..n_lanes)
            .map(|j| (j as f64 - (n_lanes as f64 - 1.0) / 2.0) * LANE_WIDTH)
            .collect();

        let max_segments = (((hi - lo) / MIN_SEGMENT) as usize).clamp(1, 3);
        let n_seg = rng.random_range(1..=max_segments);
        let mut cuts = vec![lo];
        for k in 1..n_seg {
            let base = lo + (hi - lo) * k as f64 / n_seg as f64;
            let jitter = ((hi - lo) / n_seg as f64 - MIN_SEGMENT).max(0.0) / 3.0;
            cuts.push(base + rng.random_range(-jitter..=jitter));
        }
        cuts.push(hi);

        for &o in &offsets {
            for k in 0..n_seg {
                lanes.push(lane_segment(&road, cuts[k], cuts[k + 1], |_| o, reverse)?);
            }
        }
        // a lane change that starts where one lane segment ends and joins
        // its neighbor at the next cut
        if n_lanes >= 2 && n_seg >= 2 && rng.random_bool(0.4) {
            let k = rng.random_range(0..n_seg - 1);
            let from = rng.random_range(0..n_lanes);
            let to = if from == 0 {
                1
            } else if from == n_lanes - 1 || rng.random_bool(0.5) {
                from - 1
            } else {
                from + 1
            };
            let (a, b) = (cuts[k + 1], cuts[k + 2]);
            let (o0, o1) = (offsets[from], offsets[to]);
            let shift = move |s: f64| o0 + (o1 - o0) * smoothstep((s - a) / (b - a));
            if reverse {
                let (a, b) = (cuts[k], cuts[k + 1]);
                let back = move |s: f64| o1 + (o0 - o1) * smoothstep((s - a) / (b - a));
                lanes.push(lane_segment(&road, a, b, back, true)?);
            } else {
                lanes.push(lane_segment(&road, a, b, shift, false)?);
            }
        }

        if rng.random_bool(cfg.area_prob) && hi - lo > 12.0 {
            let s = rng.random_range(lo + 4.0..hi - 4.0);
            let half_len = 2.0;
            let w = outer + 1.0;
            let ring = vec![
                quantize(road.point(s - half_len, -w)),
                quantize(road.point(s + half_len, -w)),
                quantize(road.point(s + half_len, w)),
                quantize(road.point(s - half_len, w)),
            ];
            if ring_inside(&ring, &ext) {
                areas.push(AreaInstance::new(ring, AREA_PED_CROSSING)?);
            }
        }
        if rng.random_bool(cfg.area_prob) && hi - lo > 20.0 {
            let s = rng.random_range(lo + 8.0..hi - 8.0);
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let (a, b) = (rng.random_range(4.0..8.0), rng.random_range(1.0..2.5));
            let centre_offset = side * (outer + 1.5 + b);
            let ring: Vec<Point> = (0..8)
                .map(|k| {
                    let phi = k as f64 * std::f64::consts::PI / 4.0;
                    quantize(road.point(s + a * phi.cos(), centre_offset + b * phi.sin()))
                })
                .collect();
            if ring_inside(&ring, &ext) {
                areas.push(AreaInstance::new(ring, AREA_ROAD_BOUNDARY)?);
            }
        }
    }

    let adj_ll = connectivity(&lanes);
    let n_traffic = rng.random_range(cfg.traffic_min..=cfg.traffic_max);
    let class_dist = WeightedIndex::new(TRAFFIC_CLASS_WEIGHTS).expect("weights");
    let jitter = Normal::new(0.0, 10.0).expect("sigma");
    let mut traffic = Vec::with_capacity(n_traffic);
    let mut adj_lt = vec![vec![false; n_traffic]; lanes.len()];
    for t in 0..n_traffic {
        let (w, h) = (rng.random_range(30.0..70.0), rng.random_range(30.0..90.0));
        let (cx, cy) = if lanes.is_empty() {
            (rng.random_range(0.0..IMAGE_WIDTH), rng.random_range(0.0..IMAGE_HEIGHT))
        } else {
            let lane = rng.random_range(0..lanes.len());
            adj_lt[lane][t] = true;
            let a = element_anchor(lanes[lane].centerline.last());
            (a[0] + jitter.sample(&mut rng), a[1] + jitter.sample(&mut rng))
        };
        let class = class_dist.sample(&mut rng);
        traffic.push(TrafficElement::new(clamp_box(cx, cy, w, h), class)?);
    }

    let mut scene = Scene {
        sd_map: SdMap::empty(),
        lane_segments: lanes,
        areas,
        traffic_elements: traffic,
        adj_ll,
        adj_lt,
        ego,
    };
    scene.sd_map = degrade_to_sdmap(&scene, cfg.sd_noise, cfg.sd_stride, road_class, &mut rng)?;
    scene.validate()?;
    Ok(scene)
}

/// Subsamples each ego-frame centerline (keeping its last point), perturbs
/// it with i.i.d. Gaussian noise and moves it into the world frame.
pub fn degrade_to_sdmap(scene: &Scene, sigma: f64, stride: usize, road_class: usize, rng: &mut impl Rng) -> Result<SdMap, SceneError> {
    if !(sigma >= 0.0) || stride == 0 {
        return Err(SceneError::Invalid("sd degradation needs σ ≥ 0 and stride ≥ 1".into()));
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| SceneError::Invalid(e.to_string()))?;
    let mut lines = Vec::with_capacity(scene.lane_segments.len());
    for lane in &scene.lane_segments {
        let pts = lane.centerline.points();
        let mut idx: Vec<usize> = (0..pts.len()).step_by(stride).collect();
        if idx.last() != Some(&(pts.len() - 1)) {
            idx.push(pts.len() - 1);
        }
        let mut out: Vec<Point> = Vec::with_capacity(idx.len());
        for i in idx {
            let (dx, dy) = if sigma > 0.0 {
                (noise.sample(rng), noise.sample(rng))
            } else {
                (0.0, 0.0)
            };
            let p = scene.ego.to_world([pts[i][0] + dx, pts[i][1] + dy]);
            let p = quantize(p);
            if out.last().is_none_or(|q| dist(*q, p) > 1e-6) {
                out.push(p);
            }
        }
        if out.len() < 2 {
            out = vec![quantize(scene.ego.to_world(pts[0])), quantize(scene.ego.to_world(pts[pts.len() - 1]))];
        }
        lines.push(Polyline::new(out, road_class)?);
    }
    Ok(SdMap {
        lines,
        class_count: SD_CLASS_COUNT,
    })
}

/// Simulated traffic detector: drops, jitters and hallucinates boxes.
pub fn simulate_detections(scene: &Scene, seed: u64) -> Vec<ScoredBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let jitter = Normal::new(0.0, 4.0).expect("sigma");
    let mut out = Vec::new();
    for t in &scene.traffic_elements {
        if rng.random_bool(0.1) {
            continue;
        }
        let b = t.bbox;
        let (w, h) = (b[2] - b[0], b[3] - b[1]);
        let cx = (b[0] + b[2]) / 2.0 + jitter.sample(&mut rng);
        let cy = (b[1] + b[3]) / 2.0 + jitter.sample(&mut rng);
        out.push(ScoredBox {
            bbox: clamp_box(cx, cy, w, h),
            class_id: t.class_id,
            score: round_sig9(rng.random_range(0.5..1.0)),
        });
    }
    if rng.random_bool(0.3) {
        let (w, h) = (rng.random_range(30.0..70.0), rng.random_range(30.0..90.0));
        let (cx, cy) = (rng.random_range(0.0..IMAGE_WIDTH), rng.random_range(0.0..IMAGE_HEIGHT));
        out.push(ScoredBox {
            bbox: clamp_box(cx, cy, w, h),
            class_id: rng.random_range(0..TRAFFIC_CLASS_COUNT),
            score: round_sig9(rng.random_range(0.0..0.5)),
        });
    }
    out
}

/// Scene weight = max over its element classes of `1/√frequency`, scaled so
/// the weights average to 1; scenes without elements keep weight 1.
pub fn compute_resampling_weights(scenes: &[Scene]) -> Result<Vec<f64>, SceneError> {
    if scenes.is_empty() {
        return Err(SceneError::Invalid("resampling weights need at least one scene".into()));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for s in scenes {
        for t in &s.traffic_elements {
            *counts.entry(t.class_id).or_insert(0) += 1;
        }
    }
    let total: usize = counts.values().sum();
    let raw: Vec<Option<f64>> = scenes
        .iter()
        .map(|s| {
            s.traffic_elements
                .iter()
                .map(|t| 1.0 / (counts[&t.class_id] as f64 / total as f64).sqrt())
                .fold(None, |acc: Option<f64>, w| Some(acc.map_or(w, |a| a.max(w))))
        })
        .collect();
    let present: Vec<f64> = raw.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        1.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(raw.into_iter().map(|w| w.map_or(1.0, |w| w / mean)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{crop_local_view, scene_from_json, scene_to_json};

    #[test]
    fn deterministic_bytes() {
        let cfg = GenConfig::default();
        for seed in 0..5 {
            let a = scene_to_json(&generate_scene(seed, &cfg).unwrap());
            let b = scene_to_json(&generate_scene(seed, &cfg).unwrap());
            assert_eq!(a, b);
        }
    }

    #[test]
    fn write_load_write_is_byte_stable() {
        let cfg = GenConfig::default();
        for seed in 0..20 {
            let s = generate_scene(seed, &cfg).unwrap();
            let text = scene_to_json(&s);
            let back = scene_from_json(&text).unwrap();
            assert_eq!(back, s, "seed {seed}");
            assert_eq!(scene_to_json(&back), text);
        }
    }

    #[test]
    fn generated_edges_respect_connection_rule() {
        let cfg = GenConfig::default();
        let mut edges = 0;
        for seed in 0..50 {
            let s = generate_scene(seed, &cfg).unwrap();
            for (i, row) in s.adj_ll.iter().enumerate() {
                for (j, &e) in row.iter().enumerate() {
                    if e {
                        edges += 1;
                        let d = dist(s.lane_segments[i].centerline.last(), s.lane_segments[j].centerline.first());
                        assert!(d <= CONNECT_EPS);
                    }
                }
            }
            for l in &s.lane_segments {
                for p in l.centerline.points() {
                    assert!(cfg.extent.contains(*p, 0.0));
                }
            }
        }
        assert!(edges > 20, "corpus should contain connections, got {edges}");
    }

    #[test]
    fn zero_lane_range_gives_empty_lanes() {
        let cfg = GenConfig {
            lanes_min: 0,
            lanes_max: 0,
            ..GenConfig::default()
        };
        let s = generate_scene(9, &cfg).unwrap();
        assert!(s.lane_segments.is_empty() && s.adj_ll.is_empty() && s.sd_map.lines.is_empty());
        assert!(s.adj_lt.is_empty());
    }

    #[test]
    fn noiseless_degradation_reproduces_centerlines() {
        let cfg = GenConfig {
            sd_noise: 0.0,
            sd_stride: 1,
            ..GenConfig::default()
        };
        let s = generate_scene(3, &cfg).unwrap();
        assert_eq!(s.sd_map.lines.len(), s.lane_segments.len());
        let view = crop_local_view(&s.sd_map, s.ego, Extent::default());
        for (v, l) in view.lines.iter().zip(&s.lane_segments) {
            assert_eq!(v.len(), l.centerline.len());
            for (p, q) in v.points().iter().zip(l.centerline.points()) {
                assert!(dist(*p, *q) < 1e-5);
            }
        }
    }

    #[test]
    fn degradation_displacement_matches_rayleigh_mean() {
        let sigma = 0.8;
        let base = generate_scene(1, &GenConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (mut total, mut n) = (0.0, 0usize);
        for _ in 0..200 {
            let sd = degrade_to_sdmap(&base, sigma, 1, 0, &mut rng).unwrap();
            for (line, lane) in sd.lines.iter().zip(&base.lane_segments) {
                for (p, q) in line.points().iter().zip(lane.centerline.points()) {
                    total += dist(base.ego.to_ego(*p), *q);
                    n += 1;
                }
            }
        }
        let mean = total / n as f64;
        let want = sigma * (std::f64::consts::PI / 2.0).sqrt();
        assert!((mean - want).abs() < 0.1 * want, "{mean} vs {want}");
    }

    fn scene_with_classes(classes: &[usize]) -> Scene {
        let mut s = Scene::empty();
        s.traffic_elements = classes
            .iter()
            .map(|&c| TrafficElement::new([10.0, 10.0, 50.0, 50.0], c).unwrap())
            .collect();
        s
    }

    #[test]
    fn rare_class_scene_gets_top_weight() {
        let mut corpus: Vec<Scene> = (0..8).map(|_| scene_with_classes(&[0, 1])).collect();
        corpus.push(scene_with_classes(&[0, 12]));
        corpus.push(Scene::empty());
        let w = compute_resampling_weights(&corpus).unwrap();
        let max = w.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(w[8], max);
        assert!(w.iter().all(|&x| x > 0.0));
        assert!((w.iter().sum::<f64>() / w.len() as f64 - 1.0).abs() < 1e-12);
        assert_eq!(w[9], 1.0);
    }

    #[test]
    fn identical_scenes_weigh_one() {
        let corpus: Vec<Scene> = (0..5).map(|_| scene_with_classes(&[2, 3])).collect();
        for w in compute_resampling_weights(&corpus).unwrap() {
            assert!((w - 1.0).abs() < 1e-12);
        }
    }
}
