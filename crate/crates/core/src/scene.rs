//! Scene domain types, scene-file I/O, ego-frame cropping and arc-length
//! resampling of polylines.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point = [f64; 2];

/// Road classes of the SD map prior: motorway, trunk, primary, secondary,
/// residential, service, pedestrian.
pub const SD_CLASS_COUNT: usize = 7;
pub const TRAFFIC_CLASS_COUNT: usize = 13;
/// Virtual front image plane, pixels.
pub const IMAGE_WIDTH: f64 = 1550.0;
pub const IMAGE_HEIGHT: f64 = 2480.0;
/// Maximum end→start gap for a lane–lane connection, meters.
pub const CONNECT_EPS: f64 = 0.5;
pub const AREA_PED_CROSSING: usize = 0;
pub const AREA_ROAD_BOUNDARY: usize = 1;
pub const AREA_CLASS_COUNT: usize = 2;
pub const LANE_CLASS_COUNT: usize = 1;

const MIN_STEP: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed scene file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scene: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> SceneError {
    SceneError::Invalid(msg.into())
}

pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

/// Wraps an angle into `(−π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

impl Pose2D {
    pub const IDENTITY: Pose2D = Pose2D { x: 0.0, y: 0.0, yaw: 0.0 };

    pub fn new(x: f64, y: f64, yaw: f64) -> Result<Self, SceneError> {
        if !x.is_finite() || !y.is_finite() || !yaw.is_finite() {
            return Err(invalid("pose must be finite"));
        }
        Ok(Self {
            x,
            y,
            yaw: normalize_angle(yaw),
        })
    }

    /// World point → ego frame: translate by −(x, y), then rotate by −yaw.
    pub fn to_ego(&self, p: Point) -> Point {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }

    /// Ego point → world frame.
    pub fn to_world(&self, p: Point) -> Point {
        let (s, c) = self.yaw.sin_cos();
        [c * p[0] - s * p[1] + self.x, s * p[0] + c * p[1] + self.y]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    points: Vec<Point>,
    pub class_id: usize,
}

impl Polyline {
    pub fn new(points: Vec<Point>, class_id: usize) -> Result<Self, SceneError> {
        if points.len() < 2 {
            return Err(invalid(format!("polyline needs ≥ 2 points, got {}", points.len())));
        }
        if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(invalid("polyline has non-finite coordinates"));
        }
        for (i, w) in points.windows(2).enumerate() {
            if dist(w[0], w[1]) <= MIN_STEP {
                return Err(invalid(format!("polyline repeats point {i}")));
            }
        }
        Ok(Self { points, class_id })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn first(&self) -> Point {
        self.points[0]
    }

    pub fn last(&self) -> Point {
        self.points[self.points.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn length(&self) -> f64 {
        polyline_length(&self.points)
    }
}

pub fn polyline_length(points: &[Point]) -> f64 {
    points.windows(2).map(|w| dist(w[0], w[1])).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdMap {
    pub lines: Vec<Polyline>,
    pub class_count: usize,
}

impl SdMap {
    pub fn empty() -> Self {
        Self {
            lines: Vec::new(),
            class_count: SD_CLASS_COUNT,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaneSegment {
    pub centerline: Polyline,
    pub left_boundary: Polyline,
    pub right_boundary: Polyline,
    pub class_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AreaInstance {
    /// Closed ring; the closing edge back to the first vertex is implicit.
    pub boundary: Vec<Point>,
    pub class_id: usize,
}

/// Shoelace area; positive for counter-clockwise rings.
pub fn signed_area(ring: &[Point]) -> f64 {
    let n = ring.len();
    (0..n)
        .map(|i| {
            let (a, b) = (ring[i], ring[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum::<f64>()
        / 2.0
}

impl AreaInstance {
    pub fn new(boundary: Vec<Point>, class_id: usize) -> Result<Self, SceneError> {
        if boundary.len() < 3 {
            return Err(invalid("area ring needs ≥ 3 vertices"));
        }
        if dist(boundary[0], boundary[boundary.len() - 1]) <= MIN_STEP {
            return Err(invalid("area ring repeats its first vertex as last"));
        }
        for w in boundary.windows(2) {
            if dist(w[0], w[1]) <= MIN_STEP {
                return Err(invalid("area ring repeats a vertex"));
            }
        }
        if signed_area(&boundary).abs() <= 1e-12 {
            return Err(invalid("area ring has zero area"));
        }
        if class_id >= AREA_CLASS_COUNT {
            return Err(invalid(format!("area class {class_id} out of range")));
        }
        Ok(Self { boundary, class_id })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrafficElement {
    /// `[x_min, y_min, x_max, y_max]` in image pixels.
    pub bbox: [f64; 4],
    pub class_id: usize,
}

impl TrafficElement {
    pub fn new(bbox: [f64; 4], class_id: usize) -> Result<Self, SceneError> {
        validate_bbox(bbox)?;
        if class_id >= TRAFFIC_CLASS_COUNT {
            return Err(invalid(format!("traffic class {class_id} out of range")));
        }
        Ok(Self { bbox, class_id })
    }
}

pub fn validate_bbox(b: [f64; 4]) -> Result<(), SceneError> {
    if !(b[0] < b[2] && b[1] < b[3]) {
        return Err(invalid(format!("bbox {b:?} is not ordered")));
    }
    if b[0] < 0.0 || b[1] < 0.0 || b[2] > IMAGE_WIDTH || b[3] > IMAGE_HEIGHT {
        return Err(invalid(format!("bbox {b:?} leaves the image")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub sd_map: SdMap,
    pub lane_segments: Vec<LaneSegment>,
    pub areas: Vec<AreaInstance>,
    pub traffic_elements: Vec<TrafficElement>,
    pub adj_ll: Vec<Vec<bool>>,
    pub adj_lt: Vec<Vec<bool>>,
    pub ego: Pose2D,
}

impl Scene {
    pub fn empty() -> Self {
        Self {
            sd_map: SdMap::empty(),
            lane_segments: Vec::new(),
            areas: Vec::new(),
            traffic_elements: Vec::new(),
            adj_ll: Vec::new(),
            adj_lt: Vec::new(),
            ego: Pose2D::IDENTITY,
        }
    }

    /// Checks the cross-field invariants and reports the first violation.
    pub fn validate(&self) -> Result<(), SceneError> {
        for (i, l) in self.sd_map.lines.iter().enumerate() {
            if l.class_id >= self.sd_map.class_count {
                return Err(invalid(format!("sd_map line {i} class {} ≥ {}", l.class_id, self.sd_map.class_count)));
            }
        }
        let n = self.lane_segments.len();
        let m = self.traffic_elements.len();
        if self.adj_ll.len() != n || self.adj_ll.iter().any(|r| r.len() != n) {
            return Err(invalid(format!("adj_ll must be {n}×{n}")));
        }
        if self.adj_lt.len() != n || self.adj_lt.iter().any(|r| r.len() != m) {
            return Err(invalid(format!("adj_lt must be {n}×{m}")));
        }
        for i in 0..n {
            if self.adj_ll[i][i] {
                return Err(invalid(format!("adj_ll diagonal set at {i}")));
            }
            for j in 0..n {
                if self.adj_ll[i][j] {
                    let gap = dist(self.lane_segments[i].centerline.last(), self.lane_segments[j].centerline.first());
                    if gap > CONNECT_EPS {
                        return Err(invalid(format!("adj_ll[{i}][{j}] joins lanes {gap:.3} m apart")));
                    }
                }
            }
        }
        for (i, l) in self.lane_segments.iter().enumerate() {
            if l.class_id >= LANE_CLASS_COUNT {
                return Err(invalid(format!("lane {i} class {} out of range", l.class_id)));
            }
        }
        Ok(())
    }
}

// ---- cropping and resampling ----

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extent {
    pub half_x: f64,
    pub half_y: f64,
}

impl Default for Extent {
    fn default() -> Self {
        Self {
            half_x: 50.0,
            half_y: 25.0,
        }
    }
}

impl Extent {
    pub fn contains(&self, p: Point, tol: f64) -> bool {
        p[0].abs() <= self.half_x + tol && p[1].abs() <= self.half_y + tol
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalView {
    pub lines: Vec<Polyline>,
    pub extent: Extent,
}

/// Liang–Barsky clip of segment `a→b` to the window; returns the surviving
/// parameter interval.
fn clip_segment(a: Point, b: Point, ext: Extent) -> Option<(f64, f64)> {
    let d = [b[0] - a[0], b[1] - a[1]];
    let (mut t0, mut t1) = (0.0_f64, 1.0_f64);
    let checks = [
        (-d[0], a[0] + ext.half_x),
        (d[0], ext.half_x - a[0]),
        (-d[1], a[1] + ext.half_y),
        (d[1], ext.half_y - a[1]),
    ];
    for (p, q) in checks {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    (t0 <= t1).then_some((t0, t1))
}

fn lerp(a: Point, b: Point, t: f64) -> Point {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]
}

fn clamp_to(p: Point, ext: Extent) -> Point {
    [p[0].clamp(-ext.half_x, ext.half_x), p[1].clamp(-ext.half_y, ext.half_y)]
}

/// Clips an ego-frame polyline to the window, splitting it where it leaves
/// and re-enters. Pieces with fewer than two distinct points are dropped.
pub fn clip_polyline(points: &[Point], class_id: usize, ext: Extent) -> Vec<Polyline> {
    let mut out = Vec::new();
    let mut run: Vec<Point> = Vec::new();
    let flush = |run: &mut Vec<Point>, out: &mut Vec<Polyline>| {
        if run.len() >= 2 {
            if let Ok(pl) = Polyline::new(std::mem::take(run), class_id) {
                out.push(pl);
            }
        }
        run.clear();
    };
    for w in points.windows(2) {
        let Some((t0, t1)) = clip_segment(w[0], w[1], ext) else {
            flush(&mut run, &mut out);
            continue;
        };
        let p_in = if t0 == 0.0 { w[0] } else { clamp_to(lerp(w[0], w[1], t0), ext) };
        let p_out = if t1 == 1.0 { w[1] } else { clamp_to(lerp(w[0], w[1], t1), ext) };
        if dist(p_in, p_out) <= MIN_STEP {
            if t1 < 1.0 {
                flush(&mut run, &mut out);
            }
            continue;
        }
        match run.last() {
            Some(&last) if t0 == 0.0 && last == w[0] => {}
            _ => {
                flush(&mut run, &mut out);
                run.push(p_in);
            }
        }
        run.push(p_out);
        if t1 < 1.0 {
            flush(&mut run, &mut out);
        }
    }
    flush(&mut run, &mut out);
    out
}

/// Moves every map line into the ego frame and clips it to the window.
pub fn crop_local_view(map: &SdMap, ego: Pose2D, extent: Extent) -> LocalView {
    let lines = map
        .lines
        .iter()
        .flat_map(|l| {
            let pts: Vec<Point> = l.points().iter().map(|p| ego.to_ego(*p)).collect();
            clip_polyline(&pts, l.class_id, extent)
        })
        .collect();
    LocalView { lines, extent }
}

fn sample_at(points: &[Point], cum: &[f64], s: f64) -> Point {
    let seg = match cum.binary_search_by(|c| c.partial_cmp(&s).expect("finite arc length")) {
        Ok(i) => return points[i],
        Err(i) => i.clamp(1, points.len() - 1) - 1,
    };
    let len = cum[seg + 1] - cum[seg];
    lerp(points[seg], points[seg + 1], (s - cum[seg]) / len)
}

fn cumulative(points: &[Point]) -> Vec<f64> {
    let mut cum = Vec::with_capacity(points.len());
    let mut acc = 0.0;
    cum.push(0.0);
    for w in points.windows(2) {
        acc += dist(w[0], w[1]);
        cum.push(acc);
    }
    cum
}

/// `n` points at equal arc-length spacing; endpoints are kept exactly.
pub fn resample_points(points: &[Point], n: usize) -> Result<Vec<Point>, SceneError> {
    if n < 2 {
        return Err(invalid("resampling needs n ≥ 2"));
    }
    if points.len() < 2 {
        return Err(invalid("resampling needs ≥ 2 points"));
    }
    let cum = cumulative(points);
    let total = cum[cum.len() - 1];
    if total <= 0.0 {
        return Err(invalid("cannot resample a zero-length polyline"));
    }
    let mut out = Vec::with_capacity(n);
    out.push(points[0]);
    for k in 1..n - 1 {
        out.push(sample_at(points, &cum, total * k as f64 / (n - 1) as f64));
    }
    out.push(points[points.len() - 1]);
    Ok(out)
}

pub fn resample_polyline(line: &Polyline, n: usize) -> Result<Polyline, SceneError> {
    Polyline::new(resample_points(line.points(), n)?, line.class_id)
}

/// Starts a ring at its lowest `(x, y)` vertex and orients it counter-clockwise,
/// so equal rings with different vertex labelings compare equal.
pub fn canonical_ring(ring: &[Point]) -> Vec<Point> {
    let mut pts = ring.to_vec();
    if signed_area(&pts) < 0.0 {
        pts.reverse();
    }
    let start = (0..pts.len())
        .min_by(|&a, &b| pts[a].partial_cmp(&pts[b]).expect("finite ring"))
        .unwrap_or(0);
    pts.rotate_left(start);
    pts
}

/// `n` points at equal perimeter spacing around the canonical ring.
pub fn resample_ring(ring: &[Point], n: usize) -> Result<Vec<Point>, SceneError> {
    if ring.len() < 3 || n < 3 {
        return Err(invalid("ring resampling needs ≥ 3 vertices and n ≥ 3"));
    }
    let mut closed = canonical_ring(ring);
    closed.push(closed[0]);
    let cum = cumulative(&closed);
    let total = cum[cum.len() - 1];
    if total <= 0.0 {
        return Err(invalid("degenerate ring"));
    }
    Ok((0..n)
        .map(|k| sample_at(&closed, &cum, total * k as f64 / n as f64))
        .collect())
}

// ---- file schema ----

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LineRecord {
    class_id: usize,
    points: Vec<Point>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SdMapRecord {
    class_count: usize,
    lines: Vec<LineRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LaneRecord {
    class_id: usize,
    centerline: Vec<Point>,
    left_boundary: Vec<Point>,
    right_boundary: Vec<Point>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AreaRecord {
    class_id: usize,
    boundary: Vec<Point>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrafficRecord {
    class_id: usize,
    bbox: [f64; 4],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneRecord {
    sd_map: SdMapRecord,
    lane_segments: Vec<LaneRecord>,
    areas: Vec<AreaRecord>,
    traffic_elements: Vec<TrafficRecord>,
    adj_ll: Vec<Vec<u8>>,
    adj_lt: Vec<Vec<u8>>,
    ego: Pose2D,
}

/// Rounds to 9 significant digits, the precision of scene files.
pub fn round_sig9(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.8e}").parse().expect("formatted float parses")
}

fn round_pts(pts: &[Point]) -> Vec<Point> {
    pts.iter().map(|p| [round_sig9(p[0]), round_sig9(p[1])]).collect()
}

fn adj_from(rows: &[Vec<u8>], name: &str) -> Result<Vec<Vec<bool>>, SceneError> {
    rows.iter()
        .map(|r| {
            r.iter()
                .map(|&v| match v {
                    0 => Ok(false),
                    1 => Ok(true),
                    other => Err(invalid(format!("{name} entry {other} is not 0/1"))),
                })
                .collect()
        })
        .collect()
}

fn adj_to(rows: &[Vec<bool>]) -> Vec<Vec<u8>> {
    rows.iter().map(|r| r.iter().map(|&b| u8::from(b)).collect()).collect()
}

pub fn scene_from_json(text: &str) -> Result<Scene, SceneError> {
    let rec: SceneRecord = serde_json::from_str(text)?;
    let lines = rec
        .sd_map
        .lines
        .into_iter()
        .enumerate()
        .map(|(i, l)| Polyline::new(l.points, l.class_id).map_err(|e| invalid(format!("sd_map line {i}: {e}"))))
        .collect::<Result<_, _>>()?;
    let lane_segments = rec
        .lane_segments
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            let wrap = |e: SceneError| invalid(format!("lane segment {i}: {e}"));
            Ok(LaneSegment {
                centerline: Polyline::new(l.centerline, l.class_id).map_err(wrap)?,
                left_boundary: Polyline::new(l.left_boundary, l.class_id).map_err(wrap)?,
                right_boundary: Polyline::new(l.right_boundary, l.class_id).map_err(wrap)?,
                class_id: l.class_id,
            })
        })
        .collect::<Result<_, SceneError>>()?;
    let areas = rec
        .areas
        .into_iter()
        .enumerate()
        .map(|(i, a)| AreaInstance::new(a.boundary, a.class_id).map_err(|e| invalid(format!("area {i}: {e}"))))
        .collect::<Result<_, _>>()?;
    let traffic_elements = rec
        .traffic_elements
        .into_iter()
        .enumerate()
        .map(|(i, t)| TrafficElement::new(t.bbox, t.class_id).map_err(|e| invalid(format!("traffic element {i}: {e}"))))
        .collect::<Result<_, _>>()?;
    let scene = Scene {
        sd_map: SdMap {
            lines,
            class_count: rec.sd_map.class_count,
        },
        lane_segments,
        areas,
        traffic_elements,
        adj_ll: adj_from(&rec.adj_ll, "adj_ll")?,
        adj_lt: adj_from(&rec.adj_lt, "adj_lt")?,
        ego: Pose2D::new(rec.ego.x, rec.ego.y, rec.ego.yaw)?,
    };
    scene.validate()?;
    Ok(scene)
}

/// Pretty JSON with every number rounded to 9 significant digits.
pub fn scene_to_json(scene: &Scene) -> String {
    let rec = SceneRecord {
        sd_map: SdMapRecord {
            class_count: scene.sd_map.class_count,
            lines: scene
                .sd_map
                .lines
                .iter()
                .map(|l| LineRecord {
                    class_id: l.class_id,
                    points: round_pts(l.points()),
                })
                .collect(),
        },
        lane_segments: scene
            .lane_segments
            .iter()
            .map(|l| LaneRecord {
                class_id: l.class_id,
                centerline: round_pts(l.centerline.points()),
                left_boundary: round_pts(l.left_boundary.points()),
                right_boundary: round_pts(l.right_boundary.points()),
            })
            .collect(),
        areas: scene
            .areas
            .iter()
            .map(|a| AreaRecord {
                class_id: a.class_id,
                boundary: round_pts(&a.boundary),
            })
            .collect(),
        traffic_elements: scene
            .traffic_elements
            .iter()
            .map(|t| TrafficRecord {
                class_id: t.class_id,
                bbox: t.bbox.map(round_sig9),
            })
            .collect(),
        adj_ll: adj_to(&scene.adj_ll),
        adj_lt: adj_to(&scene.adj_lt),
        ego: Pose2D {
            x: round_sig9(scene.ego.x),
            y: round_sig9(scene.ego.y),
            yaw: round_sig9(scene.ego.yaw),
        },
    };
    let mut s = serde_json::to_string_pretty(&rec).expect("scene serializes");
    s.push('\n');
    s
}

pub fn load_scene(path: &Path) -> Result<Scene, SceneError> {
    let text = fs::read_to_string(path).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })?;
    scene_from_json(&text)
}

pub fn write_scene(scene: &Scene, path: &Path) -> Result<(), SceneError> {
    fs::write(path, scene_to_json(scene)).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pl(pts: &[Point]) -> Polyline {
        Polyline::new(pts.to_vec(), 0).unwrap()
    }

    #[test]
    fn polyline_invariants() {
        assert!(Polyline::new(vec![[0.0, 0.0]], 0).is_err());
        assert!(Polyline::new(vec![[0.0, 0.0], [0.0, 0.0]], 0).is_err());
        assert!(Polyline::new(vec![[0.0, 0.0], [1.0, 0.0]], 0).is_ok());
    }

    #[test]
    fn pose_normalizes_yaw() {
        let p = Pose2D::new(0.0, 0.0, 3.0 * PI).unwrap();
        assert!((p.yaw - PI).abs() < 1e-12);
        let q = Pose2D::new(0.0, 0.0, -PI).unwrap();
        assert!((q.yaw - PI).abs() < 1e-12);
    }

    #[test]
    fn quarter_turn_rotation() {
        let p = Pose2D::new(0.0, 0.0, PI / 2.0).unwrap();
        let e = p.to_ego([0.0, 1.0]);
        assert!((e[0] - 1.0).abs() < 1e-15 && e[1].abs() < 1e-15);
    }

    #[test]
    fn identity_crop_keeps_inside_line() {
        let map = SdMap {
            lines: vec![pl(&[[-3.0, 1.0], [4.0, 2.0], [6.0, -2.0]])],
            class_count: 7,
        };
        let v = crop_local_view(&map, Pose2D::IDENTITY, Extent::default());
        assert_eq!(v.lines, map.lines);
    }

    #[test]
    fn translated_crop_clips_at_window_edges() {
        let map = SdMap {
            lines: vec![pl(&[[0.0, 0.0], [30.0, 0.0]])],
            class_count: 7,
        };
        let ego = Pose2D::new(10.0, 0.0, 0.0).unwrap();
        let ext = Extent { half_x: 5.0, half_y: 5.0 };
        let v = crop_local_view(&map, ego, ext);
        assert_eq!(v.lines.len(), 1);
        assert_eq!(v.lines[0].points(), &[[-5.0, 0.0], [5.0, 0.0]]);
    }

    #[test]
    fn crossing_line_is_split() {
        // leaves through the top edge and comes back
        let pts = [[-4.0, 0.0], [0.0, 10.0], [4.0, 0.0]];
        let pieces = clip_polyline(&pts, 2, Extent { half_x: 5.0, half_y: 5.0 });
        assert_eq!(pieces.len(), 2);
        assert!(pieces.iter().all(|p| p.class_id == 2));
        assert!((pieces[0].last()[1] - 5.0).abs() < 1e-12);
        assert!((pieces[1].first()[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn resample_straight_eleven() {
        let r = resample_polyline(&pl(&[[0.0, 0.0], [10.0, 0.0]]), 11).unwrap();
        for (k, p) in r.points().iter().enumerate() {
            assert!((p[0] - k as f64).abs() < 1e-12 && p[1] == 0.0);
        }
    }

    #[test]
    fn resample_l_shape() {
        let r = resample_polyline(&pl(&[[0.0, 0.0], [4.0, 0.0], [4.0, 4.0]]), 5).unwrap();
        let want = [[0.0, 0.0], [2.0, 0.0], [4.0, 0.0], [4.0, 2.0], [4.0, 4.0]];
        for (a, b) in r.points().iter().zip(want) {
            assert!(dist(*a, b) < 1e-12, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn resample_two_is_endpoints() {
        let line = pl(&[[1.0, 2.0], [3.0, 5.0], [-1.0, 7.5]]);
        let r = resample_polyline(&line, 2).unwrap();
        assert_eq!(r.points(), &[line.first(), line.last()]);
        assert!(resample_points(&[[0.0, 0.0], [0.0, 0.0]], 3).is_err());
    }

    #[test]
    fn ring_resampling_ignores_labeling() {
        let sq = [[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0]];
        let a = resample_ring(&sq, 12).unwrap();
        let mut rotated = sq.to_vec();
        rotated.rotate_left(2);
        rotated.reverse();
        assert_eq!(a, resample_ring(&rotated, 12).unwrap());
    }

    #[test]
    fn empty_scene_round_trips() {
        let s = Scene::empty();
        assert_eq!(scene_from_json(&scene_to_json(&s)).unwrap(), s);
    }

    #[test]
    fn wrong_adjacency_shape_rejected() {
        let text = r#"{"sd_map":{"class_count":7,"lines":[]},"lane_segments":[],"areas":[],
            "traffic_elements":[],"adj_ll":[[0]],"adj_lt":[],"ego":{"x":0,"y":0,"yaw":0}}"#;
        let err = scene_from_json(text).unwrap_err().to_string();
        assert!(err.contains("adj_ll"), "{err}");
        assert!(matches!(scene_from_json("{not json"), Err(SceneError::Parse(_))));
    }

    #[test]
    fn sig9_rounding_is_stable() {
        for v in [1.0 / 3.0, -123456.789123, 1e-7 * PI, 42.0] {
            let r = round_sig9(v);
            assert_eq!(r, round_sig9(r));
            assert!((r - v).abs() <= v.abs() * 1e-8);
        }
    }

    fn arb_line() -> impl Strategy<Value = Vec<Point>> {
        proptest::collection::vec((-80.0..80.0f64, -60.0..60.0f64), 2..8)
            .prop_map(|v| v.into_iter().map(|(x, y)| [x, y]).collect())
            .prop_filter("distinct consecutive", |v: &Vec<Point>| v.windows(2).all(|w| dist(w[0], w[1]) > 1e-3))
    }

    proptest! {
        #[test]
        fn crop_is_equivariant(line in arb_line(), x in -30.0..30.0f64, y in -30.0..30.0f64, yaw in -3.1..3.1f64) {
            let ego = Pose2D::new(x, y, yaw).unwrap();
            let map = SdMap { lines: vec![pl(&line)], class_count: 7 };
            let ext = Extent::default();
            let direct = crop_local_view(&map, ego, ext);
            let moved: Vec<Point> = line.iter().map(|p| ego.to_ego(*p)).collect();
            let moved_map = SdMap { lines: vec![pl(&moved)], class_count: 7 };
            let via_identity = crop_local_view(&moved_map, Pose2D::IDENTITY, ext);
            prop_assert_eq!(direct.lines.len(), via_identity.lines.len());
            for (a, b) in direct.lines.iter().zip(&via_identity.lines) {
                prop_assert_eq!(a.len(), b.len());
                for (p, q) in a.points().iter().zip(b.points()) {
                    prop_assert!(dist(*p, *q) <= 1e-9);
                }
            }
            for l in &direct.lines {
                for p in l.points() {
                    prop_assert!(ext.contains(*p, 1e-6));
                }
            }
        }

        #[test]
        fn resample_is_idempotent(
            start in (-50.0..50.0f64, -50.0..50.0f64),
            headings in proptest::collection::vec(-3.1..3.1f64, 1..20),
            step in 0.1..5.0f64,
        ) {
            // equal chord lengths make the line already equally spaced
            let mut pts = vec![[start.0, start.1]];
            for h in &headings {
                let last = pts[pts.len() - 1];
                pts.push([last[0] + step * h.cos(), last[1] + step * h.sin()]);
            }
            let line = pl(&pts);
            let again = resample_polyline(&line, pts.len()).unwrap();
            for (p, q) in line.points().iter().zip(again.points()) {
                prop_assert!(dist(*p, *q) <= 1e-9);
            }
        }
    }
}
