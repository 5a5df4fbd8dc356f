//! BEV query grid, SD-map fusion, instance decoders, auxiliary segmentation
//! and the two topology heads, plus the foreground rasterizer used as the
//! segmentation target.

use mapkit_tensor::{Activation, Graph, LayerNorm, Linear, Mlp, MultiHeadAttention, NodeId, ParamId, ParamStore, Tensor};
use rand::Rng;

use crate::encoding::{sincos_encode_point, EncodingConfig, GraphVector};
use crate::error::{CoreError, CoreResult};
use crate::map_encoder::{MapEncoder, MapEncoderConfig};
use crate::scene::{validate_bbox, Extent, Point, Scene, IMAGE_HEIGHT, IMAGE_WIDTH, TRAFFIC_CLASS_COUNT};

pub const AREA_CLASSES: usize = 2;
pub const LANE_CLASSES: usize = 1;

/// Axis-aligned cell layout over the local-view window. Cell `(ix, iy)` has
/// flat index `iy * nx + ix`; `ix` runs along x.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevGrid {
    pub nx: usize,
    pub ny: usize,
    pub extent: Extent,
}

impl BevGrid {
    pub fn new(nx: usize, ny: usize, extent: Extent) -> CoreResult<Self> {
        if nx == 0 || ny == 0 {
            return Err(CoreError::Config("BEV grid needs at least one cell".into()));
        }
        Ok(Self { nx, ny, extent })
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn cell_size(&self) -> (f64, f64) {
        (
            2.0 * self.extent.half_x / self.nx as f64,
            2.0 * self.extent.half_y / self.ny as f64,
        )
    }

    /// `[x_min, y_min, x_max, y_max]` of a cell in meters.
    pub fn cell_bounds(&self, ix: usize, iy: usize) -> [f64; 4] {
        let (sx, sy) = self.cell_size();
        let x0 = -self.extent.half_x + ix as f64 * sx;
        let y0 = -self.extent.half_y + iy as f64 * sy;
        [x0, y0, x0 + sx, y0 + sy]
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> Point {
        let b = self.cell_bounds(ix, iy);
        [(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0]
    }
}

/// Liang–Barsky test: does segment `a→b` touch the closed box?
fn segment_touches_box(a: Point, b: Point, r: [f64; 4]) -> bool {
    let d = [b[0] - a[0], b[1] - a[1]];
    let (mut t0, mut t1) = (0.0_f64, 1.0_f64);
    for (p, q) in [
        (-d[0], a[0] - r[0]),
        (d[0], r[2] - a[0]),
        (-d[1], a[1] - r[1]),
        (d[1], r[3] - a[1]),
    ] {
        if p == 0.0 {
            if q < 0.0 {
                return false;
            }
        } else {
            let t = q / p;
            if p < 0.0 {
                t0 = t0.max(t);
            } else {
                t1 = t1.min(t);
            }
        }
    }
    t0 <= t1
}

/// Even–odd ray casting.
pub fn point_in_polygon(p: Point, ring: &[Point]) -> bool {
    let mut inside = false;
    let n = ring.len();
    for i in 0..n {
        let (a, b) = (ring[i], ring[(i + n - 1) % n]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Foreground target: a cell is 1 when any lane polyline passes through it
/// or its center lies inside an area.
pub fn rasterize_foreground(scene: &Scene, grid: &BevGrid) -> Vec<f64> {
    let mut out = vec![0.0; grid.cells()];
    let (sx, sy) = grid.cell_size();
    let ext = grid.extent;
    let index_range = |lo: f64, hi: f64, origin: f64, size: f64, n: usize| {
        let a = ((lo - origin) / size).floor().max(0.0) as usize;
        let b = (((hi - origin) / size).floor().max(0.0) as usize).min(n - 1);
        (a.min(n - 1), b)
    };
    for lane in &scene.lane_segments {
        for line in [&lane.centerline, &lane.left_boundary, &lane.right_boundary] {
            for w in line.points().windows(2) {
                let (x0, x1) = index_range(w[0][0].min(w[1][0]), w[0][0].max(w[1][0]), -ext.half_x, sx, grid.nx);
                let (y0, y1) = index_range(w[0][1].min(w[1][1]), w[0][1].max(w[1][1]), -ext.half_y, sy, grid.ny);
                // the neighbors catch segments lying exactly on a cell edge
                for iy in y0.saturating_sub(1)..=(y1 + 1).min(grid.ny - 1) {
                    for ix in x0.saturating_sub(1)..=(x1 + 1).min(grid.nx - 1) {
                        if segment_touches_box(w[0], w[1], grid.cell_bounds(ix, iy)) {
                            out[iy * grid.nx + ix] = 1.0;
                        }
                    }
                }
            }
        }
    }
    for area in &scene.areas {
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                if point_in_polygon(grid.cell_center(ix, iy), &area.boundary) {
                    out[iy * grid.nx + ix] = 1.0;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: MapEncoderConfig,
    pub encoding: EncodingConfig,
    pub grid_nx: usize,
    pub grid_ny: usize,
    pub extent: Extent,
    pub dec_layers: usize,
    pub n_area_queries: usize,
    pub n_lane_queries: usize,
    pub n_a: usize,
    pub n_s: usize,
    pub topo_hidden: usize,
    /// Frequency bank for traffic-box corners in normalized image units.
    pub box_encoding: EncodingConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: MapEncoderConfig::default(),
            encoding: EncodingConfig::default(),
            grid_nx: 100,
            grid_ny: 50,
            extent: Extent::default(),
            dec_layers: 2,
            n_area_queries: 20,
            n_lane_queries: 30,
            n_a: 20,
            n_s: 10,
            topo_hidden: 64,
            box_encoding: EncodingConfig {
                k: 8,
                l: 2.0,
                c: TRAFFIC_CLASS_COUNT,
            },
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> CoreResult<BevGrid> {
        BevGrid::new(self.grid_nx, self.grid_ny, self.extent)
    }

    pub fn validate(&self) -> CoreResult<()> {
        self.encoder.validate()?;
        self.encoding.validate()?;
        self.box_encoding.validate()?;
        if self.encoder.dim != self.encoding.dim() {
            return Err(CoreError::Config(format!(
                "encoder input width {} ≠ encoding width {}",
                self.encoder.dim,
                self.encoding.dim()
            )));
        }
        if self.dec_layers == 0 || self.n_area_queries == 0 || self.n_lane_queries == 0 {
            return Err(CoreError::Config("decoders need ≥ 1 layer and ≥ 1 query".into()));
        }
        if self.n_a < 3 || self.n_s < 2 || self.topo_hidden == 0 {
            return Err(CoreError::Config("chains need n_a ≥ 3, n_s ≥ 2".into()));
        }
        self.grid()?;
        Ok(())
    }

    pub fn d_h(&self) -> usize {
        self.encoder.d_h
    }

    pub fn lane_width(&self) -> usize {
        3 * self.n_s * 2
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    ffn: Mlp,
}

/// Learnable instance queries refined by self-attention, cross-attention
/// over BEV cells and a feed-forward layer, all pre-norm.
#[derive(Debug, Clone)]
pub struct InstanceDecoder {
    queries: ParamId,
    memory_ln: LayerNorm,
    layers: Vec<DecoderLayer>,
    final_ln: LayerNorm,
    pub cls: Linear,
    pub reg: Mlp,
    pub anchors: ParamId,
    n_queries: usize,
}

fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..=bound)).collect()).expect("shape")
}

impl InstanceDecoder {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cfg: &ModelConfig,
        n_queries: usize,
        n_classes: usize,
        chain_width: usize,
        anchors: Tensor,
    ) -> CoreResult<Self> {
        let d = cfg.d_h();
        let heads = cfg.encoder.heads;
        let queries = store.add(format!("{name}.queries"), uniform_tensor(rng, &[n_queries, d], (1.0 / d as f64).sqrt()))?;
        let memory_ln = LayerNorm::new(store, &format!("{name}.memory_ln"), d)?;
        let mut layers = Vec::with_capacity(cfg.dec_layers);
        for l in 0..cfg.dec_layers {
            let p = format!("{name}.layer{l}");
            layers.push(DecoderLayer {
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), d)?,
                self_attn: MultiHeadAttention::new(store, rng, &format!("{p}.self_attn"), d, heads)?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), d)?,
                cross_attn: MultiHeadAttention::new(store, rng, &format!("{p}.cross_attn"), d, heads)?,
                ln3: LayerNorm::new(store, &format!("{p}.ln3"), d)?,
                ffn: Mlp::new(store, rng, &format!("{p}.ffn"), d, &[2 * d, d], Activation::Gelu)?,
            });
        }
        let final_ln = LayerNorm::new(store, &format!("{name}.final_ln"), d)?;
        let cls = Linear::new(store, rng, &format!("{name}.cls"), d, n_classes + 1)?;
        let reg = Mlp::new(store, rng, &format!("{name}.reg"), d, &[d, chain_width], Activation::Relu)?;
        reg.zero_last(store);
        let anchors = store.add(format!("{name}.anchors"), anchors)?;
        Ok(Self {
            queries,
            memory_ln,
            layers,
            final_ln,
            cls,
            reg,
            anchors,
            n_queries,
        })
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    /// Returns `(features, logits, points)`; points are in meters.
    fn forward(&self, g: &mut Graph, store: &ParamStore, bev: NodeId, scale: NodeId) -> CoreResult<(NodeId, NodeId, NodeId)> {
        let memory = self.memory_ln.forward(g, store, bev)?;
        let mut q = g.param(store, self.queries);
        for l in &self.layers {
            let n = l.ln1.forward(g, store, q)?;
            let a = l.self_attn.forward(g, store, n, n, n)?;
            q = g.add(q, a)?;
            let n = l.ln2.forward(g, store, q)?;
            let c = l.cross_attn.forward(g, store, n, memory, memory)?;
            q = g.add(q, c)?;
            let n = l.ln3.forward(g, store, q)?;
            let f = l.ffn.forward(g, store, n)?;
            q = g.add(q, f)?;
        }
        let feats = self.final_ln.forward(g, store, q)?;
        let logits = self.cls.forward(g, store, feats)?;
        let offsets = self.reg.forward(g, store, feats)?;
        let anchors = g.param(store, self.anchors);
        let chain = g.add(anchors, offsets)?;
        let points = g.mul_row(chain, scale)?;
        Ok((feats, logits, points))
    }
}

/// Pairwise MLP `relu(src_i + dst_j) → hidden → 1` evaluated for every pair.
#[derive(Debug, Clone)]
pub struct PairHead {
    pub src: Linear,
    pub dst: Linear,
    pub out: Mlp,
}

impl PairHead {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d_src: usize, d_dst: usize, hidden: usize) -> CoreResult<Self> {
        Ok(Self {
            src: Linear::new(store, rng, &format!("{name}.src"), d_src, hidden)?,
            dst: Linear::new(store, rng, &format!("{name}.dst"), d_dst, hidden)?,
            out: Mlp::new(store, rng, &format!("{name}.out"), hidden, &[hidden, 1], Activation::Relu)?,
        })
    }

    /// `n × m` logits for `a: n × d_src`, `b: m × d_dst`.
    fn forward(&self, g: &mut Graph, store: &ParamStore, a: NodeId, b: NodeId) -> CoreResult<NodeId> {
        let (n, m) = (g.value(a).rows(), g.value(b).rows());
        if n == 0 || m == 0 {
            return Ok(g.constant(Tensor::zeros(&[n, m])));
        }
        let pa = self.src.forward(g, store, a)?;
        let pb = self.dst.forward(g, store, b)?;
        let h = g.pair_add(pa, pb)?;
        let h = g.relu(h);
        let o = self.out.forward(g, store, h)?;
        Ok(g.reshape(o, &[n, m])?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub fusion: bool,
    pub aux: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self { fusion: true, aux: true }
    }
}

/// A traffic box fed to the lane–traffic head: ground truth during training,
/// detections during fine-tuning and evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxInput {
    pub bbox: [f64; 4],
    pub class_id: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ModelOutputs {
    pub bev: NodeId,
    pub area_features: NodeId,
    pub area_logits: NodeId,
    /// `n_area_queries × 2·n_a`, meters.
    pub area_points: NodeId,
    pub lane_features: NodeId,
    pub lane_logits: NodeId,
    /// `n_lane_queries × 6·n_s`: centerline, left, right, meters.
    pub lane_points: NodeId,
    pub seg_logits: Option<NodeId>,
    pub topo_ll: NodeId,
    pub topo_lt: NodeId,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub grid: BevGrid,
    pub encoder: MapEncoder,
    bev_queries: ParamId,
    bev_pos: Linear,
    cell_codes: Tensor,
    fusion_q_ln: LayerNorm,
    fusion_kv_ln: LayerNorm,
    fusion_attn: MultiHeadAttention,
    fusion_ffn_ln: LayerNorm,
    fusion_ffn: Mlp,
    pub area_decoder: InstanceDecoder,
    pub lane_decoder: InstanceDecoder,
    aux_seg: Mlp,
    pub topology_ll: PairHead,
    pub topology_lt: PairHead,
}

fn lane_anchors(rng: &mut impl Rng, cfg: &ModelConfig) -> Tensor {
    let (n, ns) = (cfg.n_lane_queries, cfg.n_s);
    let half_lane = 1.75 / cfg.extent.half_y;
    let mut data = Vec::with_capacity(n * 6 * ns);
    for q in 0..n {
        let c = [rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7)];
        let dir = if q % 2 == 0 { 1.0 } else { -1.0 };
        for side in [0.0, 1.0, -1.0] {
            for k in 0..ns {
                let t = k as f64 / (ns - 1) as f64 - 0.5;
                data.push(c[0] + dir * 0.3 * t);
                data.push(c[1] + dir * side * half_lane);
            }
        }
    }
    Tensor::new(vec![n, 6 * ns], data).expect("anchor shape")
}

fn area_anchors(rng: &mut impl Rng, cfg: &ModelConfig) -> Tensor {
    let (n, na) = (cfg.n_area_queries, cfg.n_a);
    let (rx, ry) = (3.0 / cfg.extent.half_x, 3.0 / cfg.extent.half_y);
    let mut data = Vec::with_capacity(n * 2 * na);
    for _ in 0..n {
        let c = [rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7)];
        for k in 0..na {
            let phi = std::f64::consts::TAU * k as f64 / na as f64;
            data.push(c[0] + rx * phi.cos());
            data.push(c[1] + ry * phi.sin());
        }
    }
    Tensor::new(vec![n, 2 * na], data).expect("anchor shape")
}

/// Normalized corners then sincos, followed by the class one-hot.
pub fn encode_box(b: &BoxInput, enc: &EncodingConfig) -> CoreResult<Vec<f64>> {
    validate_bbox(b.bbox)?;
    if b.class_id >= TRAFFIC_CLASS_COUNT {
        return Err(CoreError::Config(format!("traffic class {} out of range", b.class_id)));
    }
    let bb = b.bbox;
    let mut out = sincos_encode_point([bb[0] / IMAGE_WIDTH, bb[1] / IMAGE_HEIGHT], enc);
    out.extend(sincos_encode_point([bb[2] / IMAGE_WIDTH, bb[3] / IMAGE_HEIGHT], enc));
    out.extend((0..TRAFFIC_CLASS_COUNT).map(|c| if c == b.class_id { 1.0 } else { 0.0 }));
    Ok(out)
}

impl Model {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: ModelConfig) -> CoreResult<Self> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        let d = cfg.d_h();
        let heads = cfg.encoder.heads;
        let encoder = MapEncoder::new(store, rng, cfg.encoder)?;
        let bev_queries = store.add("bev.queries", uniform_tensor(rng, &[grid.cells(), d], (1.0 / d as f64).sqrt()))?;
        let pos_w = cfg.encoding.d_pos();
        let bev_pos = Linear::new(store, rng, "bev.pos", pos_w, d)?;
        let mut codes = Vec::with_capacity(grid.cells() * pos_w);
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                codes.extend(sincos_encode_point(grid.cell_center(ix, iy), &cfg.encoding));
            }
        }
        let cell_codes = Tensor::new(vec![grid.cells(), pos_w], codes)?;
        let fusion_q_ln = LayerNorm::new(store, "fusion.q_ln", d)?;
        let fusion_kv_ln = LayerNorm::new(store, "fusion.kv_ln", d)?;
        let fusion_attn = MultiHeadAttention::new(store, rng, "fusion.attn", d, heads)?;
        let fusion_ffn_ln = LayerNorm::new(store, "fusion.ffn_ln", d)?;
        let fusion_ffn = Mlp::new(store, rng, "fusion.ffn", d, &[2 * d, d], Activation::Gelu)?;
        let aa = area_anchors(rng, &cfg);
        let area_decoder = InstanceDecoder::new(store, rng, "area_decoder", &cfg, cfg.n_area_queries, AREA_CLASSES, 2 * cfg.n_a, aa)?;
        let la = lane_anchors(rng, &cfg);
        let lane_decoder =
            InstanceDecoder::new(store, rng, "lane_decoder", &cfg, cfg.n_lane_queries, LANE_CLASSES, cfg.lane_width(), la)?;
        let aux_seg = Mlp::new(store, rng, "aux_seg", d, &[(d / 2).max(1), 1], Activation::Relu)?;
        let end_w = d + cfg.encoding.d_pos();
        let box_w = 2 * cfg.box_encoding.d_pos() + TRAFFIC_CLASS_COUNT;
        let topology_ll = PairHead::new(store, rng, "topology_ll", end_w, end_w, cfg.topo_hidden)?;
        let topology_lt = PairHead::new(store, rng, "topology_lt", end_w, box_w, cfg.topo_hidden)?;
        Ok(Self {
            cfg,
            grid,
            encoder,
            bev_queries,
            bev_pos,
            cell_codes,
            fusion_q_ln,
            fusion_kv_ln,
            fusion_attn,
            fusion_ffn_ln,
            fusion_ffn,
            area_decoder,
            lane_decoder,
            aux_seg,
            topology_ll,
            topology_lt,
        })
    }

    /// Learnable grid plus a projection of each cell center's encoding.
    pub fn bev_grid(&self, g: &mut Graph, store: &ParamStore) -> CoreResult<NodeId> {
        let q = g.param(store, self.bev_queries);
        let codes = g.constant(self.cell_codes.clone());
        let pos = self.bev_pos.forward(g, store, codes)?;
        Ok(g.add(q, pos)?)
    }

    /// BEV cells query the map tokens through one attention block with a
    /// residual; without tokens the grid passes through unchanged.
    pub fn fuse_sdmap(&self, g: &mut Graph, store: &ParamStore, bev: NodeId, map_features: Option<NodeId>) -> CoreResult<NodeId> {
        let Some(mf) = map_features else {
            return Ok(bev);
        };
        if g.value(mf).rows() == 0 {
            return Ok(bev);
        }
        let q = self.fusion_q_ln.forward(g, store, bev)?;
        let kv = self.fusion_kv_ln.forward(g, store, mf)?;
        let a = self.fusion_attn.forward(g, store, q, kv, kv)?;
        let x = g.add(bev, a)?;
        let n = self.fusion_ffn_ln.forward(g, store, x)?;
        let f = self.fusion_ffn.forward(g, store, n)?;
        Ok(g.add(x, f)?)
    }

    fn scale_row(&self, g: &mut Graph, width: usize) -> NodeId {
        let e = self.cfg.extent;
        let row: Vec<f64> = (0..width).map(|i| if i % 2 == 0 { e.half_x } else { e.half_y }).collect();
        g.constant(Tensor::new(vec![width], row).expect("scale row"))
    }

    pub fn decode_areas(&self, g: &mut Graph, store: &ParamStore, bev: NodeId) -> CoreResult<(NodeId, NodeId, NodeId)> {
        let s = self.scale_row(g, 2 * self.cfg.n_a);
        self.area_decoder.forward(g, store, bev, s)
    }

    pub fn decode_lanesegments(&self, g: &mut Graph, store: &ParamStore, bev: NodeId) -> CoreResult<(NodeId, NodeId, NodeId)> {
        let s = self.scale_row(g, self.cfg.lane_width());
        self.lane_decoder.forward(g, store, bev, s)
    }

    pub fn aux_bev_segmentation(&self, g: &mut Graph, store: &ParamStore, bev: NodeId) -> CoreResult<NodeId> {
        Ok(self.aux_seg.forward(g, store, bev)?)
    }

    fn with_points(&self, g: &mut Graph, features: NodeId, points: &[Point]) -> CoreResult<NodeId> {
        let w = self.cfg.encoding.d_pos();
        let codes: Vec<f64> = points.iter().flat_map(|p| sincos_encode_point(*p, &self.cfg.encoding)).collect();
        let c = g.constant(Tensor::new(vec![points.len(), w], codes)?);
        Ok(g.concat_cols(&[features, c])?)
    }

    /// Logit `(i, j)` scores "lane i flows into lane j" from both features,
    /// i's end point and j's start point.
    pub fn topology_ll(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: NodeId,
        starts: &[Point],
        ends: &[Point],
    ) -> CoreResult<NodeId> {
        if g.value(features).rows() == 0 {
            return Ok(g.constant(Tensor::zeros(&[0, 0])));
        }
        let a = self.with_points(g, features, ends)?;
        let b = self.with_points(g, features, starts)?;
        self.topology_ll.forward(g, store, a, b)
    }

    /// Logit `(i, j)` scores "traffic element j governs lane i".
    pub fn topology_lt(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: NodeId,
        ends: &[Point],
        boxes: &[BoxInput],
    ) -> CoreResult<NodeId> {
        let n = g.value(features).rows();
        if n == 0 || boxes.is_empty() {
            return Ok(g.constant(Tensor::zeros(&[n, boxes.len()])));
        }
        let a = self.with_points(g, features, ends)?;
        let w = 2 * self.cfg.box_encoding.d_pos() + TRAFFIC_CLASS_COUNT;
        let mut codes = Vec::with_capacity(boxes.len() * w);
        for b in boxes {
            codes.extend(encode_box(b, &self.cfg.box_encoding)?);
        }
        let b = g.constant(Tensor::new(vec![boxes.len(), w], codes)?);
        self.topology_lt.forward(g, store, a, b)
    }

    /// End-to-end forward for one scene.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        gv: &GraphVector,
        boxes: &[BoxInput],
        opts: ForwardOptions,
    ) -> CoreResult<ModelOutputs> {
        let mut bev = self.bev_grid(g, store)?;
        if opts.fusion {
            let mf = self.encoder.forward(g, store, gv, None)?;
            bev = self.fuse_sdmap(g, store, bev, mf)?;
        }
        let (area_features, area_logits, area_points) = self.decode_areas(g, store, bev)?;
        let (lane_features, lane_logits, lane_points) = self.decode_lanesegments(g, store, bev)?;
        let seg_logits = if opts.aux {
            Some(self.aux_bev_segmentation(g, store, bev)?)
        } else {
            None
        };
        let (starts, ends) = lane_endpoints(g.value(lane_points), self.cfg.n_s);
        let topo_ll = self.topology_ll(g, store, lane_features, &starts, &ends)?;
        let topo_lt = self.topology_lt(g, store, lane_features, &ends, boxes)?;
        Ok(ModelOutputs {
            bev,
            area_features,
            area_logits,
            area_points,
            lane_features,
            lane_logits,
            lane_points,
            seg_logits,
            topo_ll,
            topo_lt,
        })
    }
}

/// Start and end of every predicted centerline.
pub fn lane_endpoints(points: &Tensor, n_s: usize) -> (Vec<Point>, Vec<Point>) {
    (0..points.rows())
        .map(|i| {
            let r = points.row(i);
            ([r[0], r[1]], [r[2 * (n_s - 1)], r[2 * (n_s - 1) + 1]])
        })
        .unzip()
}

/// Splits a flat `x0, y0, x1, y1, …` row into points.
pub fn row_points(row: &[f64]) -> Vec<Point> {
    row.chunks(2).map(|c| [c[0], c[1]]).collect()
}
