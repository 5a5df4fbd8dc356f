//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mapkit_core::bev::{ForwardOptions, ModelConfig};
use mapkit_core::encoding::EncodingConfig;
use mapkit_core::losses::CostWeights;
use mapkit_core::map_encoder::{MapEncoderConfig, PretrainOptions};
use mapkit_core::pipeline::TrainOptions;
use mapkit_core::scene::Extent;
use mapkit_core::scenegen::GenConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub label: String,
    pub seed: u64,

    pub data_dir: String,
    pub data_seed: u64,
    pub n_scenes: usize,
    pub n_eval: usize,
    pub lanes_min: usize,
    pub lanes_max: usize,
    pub area_prob: f64,
    pub traffic_min: usize,
    pub traffic_max: usize,
    pub sd_noise: f64,
    pub sd_stride: usize,
    pub half_x: f64,
    pub half_y: f64,

    pub d_h: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub n_points: usize,
    pub freq_k: usize,
    pub freq_l: f64,
    pub grid_nx: usize,
    pub grid_ny: usize,
    pub dec_layers: usize,
    pub n_area_queries: usize,
    pub n_lane_queries: usize,
    pub n_a: usize,
    pub n_s: usize,
    pub topo_hidden: usize,

    pub lambda_cls: f64,
    pub lambda_pt: f64,
    pub lambda_iou: f64,
    pub lambda_topo: f64,
    pub lambda_aux: f64,
    pub p2p_half_width: f64,

    pub lr: f64,
    pub epochs: usize,
    pub sdmap_fusion: bool,
    pub aux_head: bool,
    /// Encoder checkpoint loaded before training; empty means random init.
    pub pretrained_encoder: String,

    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub mask_ratio: f64,

    pub finetune_lr: f64,
    pub finetune_epochs: usize,
    /// External detections file; empty means the built-in simulator.
    pub detections: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let gen = GenConfig::default();
        let model = ModelConfig::default();
        let w = CostWeights::default();
        Self {
            label: "default".into(),
            seed: 0,
            data_dir: "data".into(),
            data_seed: gen.seed,
            n_scenes: gen.n_scenes,
            n_eval: gen.n_eval,
            lanes_min: gen.lanes_min,
            lanes_max: gen.lanes_max,
            area_prob: gen.area_prob,
            traffic_min: gen.traffic_min,
            traffic_max: gen.traffic_max,
            sd_noise: gen.sd_noise,
            sd_stride: gen.sd_stride,
            half_x: gen.extent.half_x,
            half_y: gen.extent.half_y,
            d_h: model.encoder.d_h,
            encoder_layers: model.encoder.layers,
            heads: model.encoder.heads,
            n_points: model.encoder.n_points,
            freq_k: model.encoding.k,
            freq_l: model.encoding.l,
            grid_nx: model.grid_nx,
            grid_ny: model.grid_ny,
            dec_layers: model.dec_layers,
            n_area_queries: model.n_area_queries,
            n_lane_queries: model.n_lane_queries,
            n_a: model.n_a,
            n_s: model.n_s,
            topo_hidden: model.topo_hidden,
            lambda_cls: w.cls,
            lambda_pt: w.pt,
            lambda_iou: w.iou,
            lambda_topo: w.topo,
            lambda_aux: w.aux,
            p2p_half_width: 1.0,
            lr: 2e-4,
            epochs: 12,
            sdmap_fusion: true,
            aux_head: true,
            pretrained_encoder: String::new(),
            pretrain_epochs: 5,
            pretrain_lr: 2e-4,
            mask_ratio: 0.3,
            finetune_lr: 4e-4,
            finetune_epochs: 4,
            detections: String::new(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.gen_config().validate()?;
        self.model_config().validate()?;
        self.weights().validate()?;
        for (name, v) in [
            ("lr", self.lr),
            ("pretrain_lr", self.pretrain_lr),
            ("finetune_lr", self.finetune_lr),
            ("p2p_half_width", self.p2p_half_width),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                bail!("`{name}` must be positive, got {v}");
            }
        }
        if self.label.is_empty() || self.label.contains([',', '\n', '\r']) {
            bail!("`label` must be non-empty without commas or newlines");
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            bail!("`mask_ratio` must lie in (0, 1), got {}", self.mask_ratio);
        }
        Ok(())
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            seed: self.data_seed,
            n_scenes: self.n_scenes,
            n_eval: self.n_eval,
            lanes_min: self.lanes_min,
            lanes_max: self.lanes_max,
            area_prob: self.area_prob,
            traffic_min: self.traffic_min,
            traffic_max: self.traffic_max,
            sd_noise: self.sd_noise,
            sd_stride: self.sd_stride,
            extent: self.extent(),
        }
    }

    pub fn extent(&self) -> Extent {
        Extent {
            half_x: self.half_x,
            half_y: self.half_y,
        }
    }

    pub fn encoder_config(&self) -> MapEncoderConfig {
        MapEncoderConfig {
            d_h: self.d_h,
            layers: self.encoder_layers,
            heads: self.heads,
            n_points: self.n_points,
            dim: self.encoding().dim(),
        }
    }

    pub fn encoding(&self) -> EncodingConfig {
        EncodingConfig {
            k: self.freq_k,
            l: self.freq_l,
            ..EncodingConfig::default()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder_config(),
            encoding: self.encoding(),
            grid_nx: self.grid_nx,
            grid_ny: self.grid_ny,
            extent: self.extent(),
            dec_layers: self.dec_layers,
            n_area_queries: self.n_area_queries,
            n_lane_queries: self.n_lane_queries,
            n_a: self.n_a,
            n_s: self.n_s,
            topo_hidden: self.topo_hidden,
            ..ModelConfig::default()
        }
    }

    pub fn weights(&self) -> CostWeights {
        CostWeights {
            cls: self.lambda_cls,
            pt: self.lambda_pt,
            iou: self.lambda_iou,
            topo: self.lambda_topo,
            aux: self.lambda_aux,
        }
    }

    pub fn forward(&self) -> ForwardOptions {
        ForwardOptions {
            fusion: self.sdmap_fusion,
            aux: self.aux_head,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            lr: self.lr,
            seed: self.seed,
            forward: self.forward(),
            weights: self.weights(),
            half_width: self.p2p_half_width,
        }
    }

    pub fn pretrain_options(&self) -> PretrainOptions {
        PretrainOptions {
            epochs: self.pretrain_epochs,
            lr: self.pretrain_lr,
            seed: self.seed,
        }
    }

    pub fn pretrained_encoder(&self) -> Option<PathBuf> {
        (!self.pretrained_encoder.is_empty()).then(|| PathBuf::from(&self.pretrained_encoder))
    }

    pub fn detections(&self) -> Option<PathBuf> {
        (!self.detections.is_empty()).then(|| PathBuf::from(&self.detections))
    }
}
