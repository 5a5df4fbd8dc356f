//! Transformer encoder over SD-map lines and its two pretraining objectives.

use std::collections::BTreeMap;
use std::path::Path;

use mapkit_tensor::{
    Activation, AdamW, Checkpoint, Graph, LayerNorm, Linear, Mlp, MultiHeadAttention, NodeId, ParamId, ParamStore,
    Tensor,
};
use rand::seq::{index::sample, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoding::GraphVector;
use crate::error::{CoreError, CoreResult};

pub const PREFIX: &str = "map_encoder.";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapEncoderConfig {
    pub d_h: usize,
    pub layers: usize,
    pub heads: usize,
    pub n_points: usize,
    /// Per-point input width.
    pub dim: usize,
}

impl Default for MapEncoderConfig {
    fn default() -> Self {
        Self {
            d_h: 64,
            layers: 2,
            heads: 4,
            n_points: 11,
            dim: 39,
        }
    }
}

impl MapEncoderConfig {
    pub fn validate(&self) -> CoreResult<()> {
        if self.layers == 0 || self.heads == 0 || self.d_h % self.heads != 0 || self.n_points < 2 {
            return Err(CoreError::Config(format!("invalid map encoder config {self:?}")));
        }
        Ok(())
    }

    pub fn line_width(&self) -> usize {
        self.n_points * self.dim
    }

    /// Echoed into checkpoints and checked on load.
    pub fn header(&self) -> BTreeMap<String, String> {
        [
            ("encoder.d_h", self.d_h),
            ("encoder.layers", self.layers),
            ("encoder.heads", self.heads),
            ("encoder.n_points", self.n_points),
            ("encoder.dim", self.dim),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    ffn: Mlp,
}

#[derive(Debug, Clone)]
pub struct MapEncoder {
    pub cfg: MapEncoderConfig,
    input: Linear,
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    mask_token: ParamId,
}

impl MapEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: MapEncoderConfig) -> CoreResult<Self> {
        cfg.validate()?;
        let input = Linear::new(store, rng, "map_encoder.input", cfg.line_width(), cfg.d_h)?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("map_encoder.block{l}");
            blocks.push(Block {
                ln1: LayerNorm::new(store, &format!("{p}.ln1"), cfg.d_h)?,
                attn: MultiHeadAttention::new(store, rng, &format!("{p}.attn"), cfg.d_h, cfg.heads)?,
                ln2: LayerNorm::new(store, &format!("{p}.ln2"), cfg.d_h)?,
                ffn: Mlp::new(store, rng, &format!("{p}.ffn"), cfg.d_h, &[2 * cfg.d_h, cfg.d_h], Activation::Gelu)?,
            });
        }
        let final_ln = LayerNorm::new(store, "map_encoder.final_ln", cfg.d_h)?;
        let bound = (1.0 / cfg.d_h as f64).sqrt();
        let token: Vec<f64> = (0..cfg.d_h).map(|_| rng.random_range(-bound..=bound)).collect();
        let mask_token = store.add("map_encoder.mask_token", Tensor::new(vec![1, cfg.d_h], token)?)?;
        Ok(Self {
            cfg,
            input,
            blocks,
            final_ln,
            mask_token,
        })
    }

    fn check(&self, gv: &GraphVector) -> CoreResult<()> {
        if gv.n_points != self.cfg.n_points || gv.dim != self.cfg.dim {
            return Err(CoreError::Config(format!(
                "graph vector {:?} does not fit encoder (n_points {}, dim {})",
                gv.shape(),
                self.cfg.n_points,
                self.cfg.dim
            )));
        }
        Ok(())
    }

    /// `N_l × D_h` map features, or `None` for an empty view. Rows flagged in
    /// `mask` are replaced by the learned mask token after projection.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        gv: &GraphVector,
        mask: Option<&[bool]>,
    ) -> CoreResult<Option<NodeId>> {
        self.check(gv)?;
        if gv.n_lines == 0 {
            return Ok(None);
        }
        let x = g.constant(Tensor::new(vec![gv.n_lines, gv.line_width()], gv.data.clone())?);
        let mut h = self.input.forward(g, store, x)?;
        if let Some(mask) = mask {
            let token = g.param(store, self.mask_token);
            h = g.replace_rows(h, token, mask)?;
        }
        for b in &self.blocks {
            let n = b.ln1.forward(g, store, h)?;
            let a = b.attn.forward(g, store, n, n, n)?;
            h = g.add(h, a)?;
            let n = b.ln2.forward(g, store, h)?;
            let f = b.ffn.forward(g, store, n)?;
            h = g.add(h, f)?;
        }
        Ok(Some(self.final_ln.forward(g, store, h)?))
    }
}

/// Inference-only map features; an empty view gives a `0 × D_h` tensor.
pub fn encode_map(enc: &MapEncoder, store: &ParamStore, gv: &GraphVector) -> CoreResult<Tensor> {
    let mut g = Graph::inference();
    match enc.forward(&mut g, store, gv, None)? {
        Some(n) => Ok(g.value(n).clone()),
        None => Ok(Tensor::zeros(&[0, enc.cfg.d_h])),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 2e-4,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub store: ParamStore,
    pub encoder: MapEncoder,
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
}

enum Objective {
    Reconstruct,
    Masked(f64),
}

fn pretrain(views: &[GraphVector], cfg: MapEncoderConfig, opts: PretrainOptions, obj: Objective) -> CoreResult<PretrainOutcome> {
    let usable: Vec<&GraphVector> = views.iter().filter(|v| v.n_lines > 0).collect();
    if usable.is_empty() {
        return Err(CoreError::Config("pretraining needs at least one non-empty view".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut store = ParamStore::new();
    let encoder = MapEncoder::new(&mut store, &mut rng, cfg)?;
    let decoder = Mlp::new(
        &mut store,
        &mut rng,
        "pretrain_decoder",
        cfg.d_h,
        &[cfg.d_h, cfg.line_width()],
        Activation::Relu,
    )?;
    decoder.zero_last(&mut store);
    let mut opt = AdamW::new(opts.lr);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    let mut step_losses = Vec::new();
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let gv = usable[i];
            let (mask, rows): (Option<Vec<bool>>, Vec<usize>) = match obj {
                Objective::Reconstruct => (None, (0..gv.n_lines).collect()),
                Objective::Masked(ratio) => {
                    let k = ((ratio * gv.n_lines as f64).ceil() as usize).clamp(1, gv.n_lines);
                    let mut idx = sample(&mut rng, gv.n_lines, k).into_vec();
                    idx.sort_unstable();
                    let mut m = vec![false; gv.n_lines];
                    for &j in &idx {
                        m[j] = true;
                    }
                    (Some(m), idx)
                }
            };
            let mut g = Graph::new();
            let feats = encoder
                .forward(&mut g, &store, gv, mask.as_deref())?
                .expect("usable views are non-empty");
            let picked = if rows.len() == gv.n_lines { feats } else { g.gather_rows(feats, &rows)? };
            let recon = decoder.forward(&mut g, &store, picked)?;
            let target: Vec<f64> = rows.iter().flat_map(|&j| gv.line(j).iter().copied()).collect();
            let loss = g.mse(recon, Tensor::new(vec![rows.len(), gv.line_width()], target)?)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(CoreError::Config(format!("pretraining loss became {value}")));
            }
            store.zero_grad();
            g.backward(loss)?.accumulate_into(&mut store);
            opt.step(&mut store)?;
            step_losses.push(value);
            total += value;
        }
        epoch_losses.push(total / usable.len() as f64);
    }
    Ok(PretrainOutcome {
        store,
        encoder,
        epoch_losses,
        step_losses,
    })
}

/// Encoder plus a small decoder trained to reproduce every line's input
/// embedding block under mean squared error.
pub fn pretrain_autoencoder(views: &[GraphVector], cfg: MapEncoderConfig, opts: PretrainOptions) -> CoreResult<PretrainOutcome> {
    pretrain(views, cfg, opts, Objective::Reconstruct)
}

/// Masks `⌈ratio · N_l⌉` whole lines per view and reconstructs only those.
pub fn pretrain_mae(
    views: &[GraphVector],
    cfg: MapEncoderConfig,
    mask_ratio: f64,
    opts: PretrainOptions,
) -> CoreResult<PretrainOutcome> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(CoreError::Config(format!("mask_ratio {mask_ratio} must lie in (0, 1)")));
    }
    pretrain(views, cfg, opts, Objective::Masked(mask_ratio))
}

pub fn save_encoder(store: &ParamStore, cfg: &MapEncoderConfig, path: &Path) -> CoreResult<()> {
    Checkpoint::capture(store, cfg.header(), |n| n.starts_with(PREFIX)).save(path)?;
    Ok(())
}

/// Loads `map_encoder.*` weights into `store` after checking the header.
pub fn load_encoder(store: &mut ParamStore, cfg: &MapEncoderConfig, path: &Path) -> CoreResult<usize> {
    let ck = Checkpoint::load(path)?;
    ck.check_config(&cfg.header())?;
    if let Some(p) = ck.params.iter().find(|p| !p.name.starts_with(PREFIX)) {
        return Err(CoreError::Config(format!("`{}` is not an encoder parameter", p.name)));
    }
    Ok(ck.apply(store)?)
}
