//! The six subcommands as library functions over a resolved [`RunConfig`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use mapkit_core::bev::{Model, ModelConfig};
use mapkit_core::encoding::{build_graph_vector, GraphVector};
use mapkit_core::losses::LossBreakdown;
use mapkit_core::map_encoder::{load_encoder, pretrain_autoencoder, pretrain_mae, save_encoder};
use mapkit_core::metrics::{evaluate, EvalConfig, MetricReport, ScenePrediction, ScoredBox};
use mapkit_core::pipeline::{
    evaluate_model, freeze_backbone, is_topology_param, load_detections, mean_loss, prepare_sample, train_epoch,
    Sample,
};
use mapkit_core::scene::{crop_local_view, load_scene, scene_to_json, Scene};
use mapkit_core::scenegen::{generate_scene, simulate_detections};
use mapkit_tensor::{AdamW, Checkpoint, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.csv";
pub const CORPUS_HASH: &str = "corpus.sha256";
pub const CONFIG_ECHO: &str = "config.toml";
pub const METRICS: &str = "metrics.csv";
pub const LOSSES: &str = "losses.csv";
pub const MODEL: &str = "model.json";
pub const ENCODER: &str = "encoder.json";
pub const PRETRAIN_LOSSES: &str = "pretrain_loss.csv";
pub const EVAL: &str = "eval.csv";
pub const REPORT: &str = "report.csv";
pub const FINGERPRINTS: &str = "fingerprints.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PretrainMode {
    Ae,
    Mae,
}

/// Where a command writes and whether it may overwrite.
#[derive(Debug, Clone)]
pub struct Output {
    pub dir: PathBuf,
    pub force: bool,
    pub verbose: bool,
}

impl Output {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            force: false,
            verbose: false,
        }
    }

    pub fn forced(mut self) -> Self {
        self.force = true;
        self
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Creates the directory, refusing a non-empty one unless forced.
    fn prepare(&self) -> Result<()> {
        if self.dir.exists() {
            let occupied = fs::read_dir(&self.dir)
                .with_context(|| format!("reading {}", self.dir.display()))?
                .next()
                .is_some();
            if occupied && !self.force {
                bail!("output directory {} is not empty; pass --force to overwrite", self.dir.display());
            }
        }
        fs::create_dir_all(&self.dir).with_context(|| format!("creating {}", self.dir.display()))
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("{}", msg.as_ref());
        }
    }
}

// ---- corpus ----

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub index: usize,
    pub seed: u64,
    pub split: String,
    pub path: String,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub rows: Vec<ManifestRow>,
    pub scenes: Vec<Scene>,
}

impl Corpus {
    pub fn indices(&self, split: &str) -> Vec<usize> {
        self.rows.iter().filter(|r| r.split == split).map(|r| r.index).collect()
    }
}

fn manifest_text(rows: &[ManifestRow]) -> String {
    let mut s = String::from("index,seed,split,path\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.index, r.seed, r.split, r.path).unwrap();
    }
    s
}

/// Writes `n_scenes` scene files, the manifest and the corpus hash; returns
/// the hash.
pub fn gen_data(cfg: &RunConfig, out: &Output) -> Result<String> {
    out.prepare()?;
    let gen = cfg.gen_config();
    gen.validate()?;
    let scene_dir = out.path("scenes");
    if scene_dir.exists() {
        fs::remove_dir_all(&scene_dir).with_context(|| format!("clearing {}", scene_dir.display()))?;
    }
    fs::create_dir_all(&scene_dir)?;
    let mut rows = Vec::with_capacity(gen.n_scenes);
    let mut bodies = Vec::with_capacity(gen.n_scenes);
    for i in 0..gen.n_scenes {
        let seed = gen.scene_seed(i);
        let scene = generate_scene(seed, &gen).with_context(|| format!("scene {i} (seed {seed})"))?;
        let path = format!("scenes/scene_{i:04}.json");
        let body = scene_to_json(&scene);
        out.write(&path, &body)?;
        bodies.push(body);
        rows.push(ManifestRow {
            index: i,
            seed,
            split: gen.split(i).to_string(),
            path,
        });
    }
    let manifest = manifest_text(&rows);
    out.write(MANIFEST, &manifest)?;
    let mut h = Sha256::new();
    h.update(manifest.as_bytes());
    for b in &bodies {
        h.update(b.as_bytes());
    }
    let hash = format!("{:x}", h.finalize());
    out.write(CORPUS_HASH, &format!("{hash}\n"))?;
    out.log(format!("wrote {} scenes to {}", gen.n_scenes, out.dir.display()));
    Ok(hash)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath)
        .with_context(|| format!("missing corpus: cannot read {} (run gen-data first)", mpath.display()))?;
    let mut lines = text.lines();
    ensure!(lines.next() == Some("index,seed,split,path"), "{}: unexpected header", mpath.display());
    let mut rows = Vec::new();
    let mut scenes = Vec::new();
    for (k, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        ensure!(f.len() == 4, "{} line {}: expected 4 fields", mpath.display(), k + 2);
        let row = ManifestRow {
            index: f[0].parse().with_context(|| format!("{} line {}: index", mpath.display(), k + 2))?,
            seed: f[1].parse().with_context(|| format!("{} line {}: seed", mpath.display(), k + 2))?,
            split: f[2].to_string(),
            path: f[3].to_string(),
        };
        ensure!(row.index == k, "{} line {}: index out of order", mpath.display(), k + 2);
        ensure!(
            row.split == "train" || row.split == "eval",
            "{} line {}: split `{}`",
            mpath.display(),
            k + 2,
            row.split
        );
        scenes.push(load_scene(&dir.join(&row.path))?);
        rows.push(row);
    }
    Ok(Corpus { rows, scenes })
}

/// One detection frame per manifest row, from `file` or the simulator.
pub fn corpus_detections(corpus: &Corpus, file: Option<&Path>) -> Result<Vec<Vec<ScoredBox>>> {
    match file {
        Some(p) => {
            let frames = load_detections(p).with_context(|| format!("detections {}", p.display()))?;
            ensure!(
                frames.len() == corpus.rows.len(),
                "detections {}: {} frames for {} scenes",
                p.display(),
                frames.len(),
                corpus.rows.len()
            );
            Ok(frames)
        }
        None => Ok(corpus
            .rows
            .iter()
            .zip(&corpus.scenes)
            .map(|(r, s)| simulate_detections(s, r.seed))
            .collect()),
    }
}

fn pick<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

// ---- models ----

pub fn model_header(cfg: &ModelConfig) -> BTreeMap<String, String> {
    let mut h = cfg.encoder.header();
    for (k, v) in [
        ("model.grid_nx", cfg.grid_nx.to_string()),
        ("model.grid_ny", cfg.grid_ny.to_string()),
        ("model.half_x", cfg.extent.half_x.to_string()),
        ("model.half_y", cfg.extent.half_y.to_string()),
        ("model.freq_k", cfg.encoding.k.to_string()),
        ("model.freq_l", cfg.encoding.l.to_string()),
        ("model.dec_layers", cfg.dec_layers.to_string()),
        ("model.n_area_queries", cfg.n_area_queries.to_string()),
        ("model.n_lane_queries", cfg.n_lane_queries.to_string()),
        ("model.n_a", cfg.n_a.to_string()),
        ("model.n_s", cfg.n_s.to_string()),
        ("model.topo_hidden", cfg.topo_hidden.to_string()),
    ] {
        h.insert(k.to_string(), v);
    }
    h
}

pub fn build_model(cfg: &RunConfig) -> Result<(Model, ParamStore)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Model::new(&mut store, &mut rng, cfg.model_config())?;
    Ok((model, store))
}

pub fn save_model(model: &Model, store: &ParamStore, path: &Path) -> Result<()> {
    Checkpoint::capture(store, model_header(&model.cfg), |_| true).save(path)?;
    Ok(())
}

/// Rebuilds the model described by `cfg` and fills it from a checkpoint that
/// must cover every parameter.
pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<(Model, ParamStore)> {
    let (model, mut store) = build_model(cfg)?;
    let ck = Checkpoint::load(path).with_context(|| format!("checkpoint {}", path.display()))?;
    ck.check_config(&model_header(&model.cfg))
        .with_context(|| format!("checkpoint {}", path.display()))?;
    let n = ck.apply(&mut store).with_context(|| format!("checkpoint {}", path.display()))?;
    if n != store.len() {
        let stored: std::collections::BTreeSet<&str> = ck.params.iter().map(|p| p.name.as_str()).collect();
        let missing = store
            .iter()
            .map(|(_, p)| p.name.as_str())
            .find(|n| !stored.contains(n))
            .unwrap_or("?");
        bail!("checkpoint {}: field `{missing}` is missing", path.display());
    }
    Ok((model, store))
}

fn samples(model: &Model, corpus: &Corpus, idx: &[usize]) -> Result<Vec<Sample>> {
    idx.iter()
        .map(|&i| prepare_sample(corpus.scenes[i].clone(), model).map_err(Into::into))
        .collect()
}

fn metrics_csv(rows: &[(usize, MetricReport)]) -> String {
    let mut s = format!("epoch,{}\n", MetricReport::csv_header());
    for (e, r) in rows {
        writeln!(s, "{e},{}", r.csv_row()).unwrap();
    }
    s
}

fn losses_csv(rows: &[(usize, LossBreakdown, f64)]) -> String {
    let mut s = String::from("epoch,cls,pt,iou,topo_ll,topo_lt,aux,total,eval_total\n");
    for (e, b, ev) in rows {
        writeln!(
            s,
            "{e},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            b.cls, b.pt, b.iou, b.topo_ll, b.topo_lt, b.aux, b.total, ev
        )
        .unwrap();
    }
    s
}

// ---- pretrain ----

#[derive(Debug, Clone)]
pub struct PretrainSummary {
    pub epoch_losses: Vec<f64>,
    pub checkpoint: PathBuf,
}

pub fn train_views(cfg: &RunConfig, corpus: &Corpus) -> Result<Vec<GraphVector>> {
    let enc = cfg.encoding();
    corpus
        .indices("train")
        .into_iter()
        .map(|i| {
            let s = &corpus.scenes[i];
            let view = crop_local_view(&s.sd_map, s.ego, cfg.extent());
            Ok(build_graph_vector(&view, &enc, cfg.n_points)?)
        })
        .collect()
}

pub fn pretrain(cfg: &RunConfig, mode: PretrainMode, out: &Output) -> Result<PretrainSummary> {
    cfg.validate()?;
    let corpus = load_corpus(Path::new(&cfg.data_dir))?;
    out.prepare()?;
    out.write(CONFIG_ECHO, &cfg.to_toml())?;
    let views = train_views(cfg, &corpus)?;
    let ecfg = cfg.encoder_config();
    let res = match mode {
        PretrainMode::Ae => pretrain_autoencoder(&views, ecfg, cfg.pretrain_options())?,
        PretrainMode::Mae => pretrain_mae(&views, ecfg, cfg.mask_ratio, cfg.pretrain_options())?,
    };
    let mut log = String::from("epoch,loss\n");
    for (e, l) in res.epoch_losses.iter().enumerate() {
        writeln!(log, "{},{l}", e + 1).unwrap();
        out.log(format!("pretrain epoch {} loss {l:.6}", e + 1));
    }
    out.write(PRETRAIN_LOSSES, &log)?;
    let checkpoint = out.path(ENCODER);
    save_encoder(&res.store, &ecfg, &checkpoint)?;
    Ok(PretrainSummary {
        epoch_losses: res.epoch_losses,
        checkpoint,
    })
}

// ---- train ----

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub metrics: Vec<MetricReport>,
    pub losses: Vec<LossBreakdown>,
    pub eval_losses: Vec<f64>,
    pub checkpoint: PathBuf,
}

impl TrainSummary {
    pub fn final_metrics(&self) -> MetricReport {
        *self.metrics.last().expect("at least one epoch")
    }

    pub fn final_loss(&self) -> f64 {
        self.losses.last().map_or(f64::NAN, |b| b.total)
    }
}

pub fn train(cfg: &RunConfig, out: &Output) -> Result<TrainSummary> {
    cfg.validate()?;
    ensure!(cfg.epochs > 0, "`epochs` must be at least 1");
    let corpus = load_corpus(Path::new(&cfg.data_dir))?;
    let (model, mut store) = build_model(cfg)?;
    if let Some(p) = cfg.pretrained_encoder() {
        load_encoder(&mut store, &model.cfg.encoder, &p)
            .with_context(|| format!("pretrained encoder {} does not fit this model", p.display()))?;
    }
    out.prepare()?;
    out.write(CONFIG_ECHO, &cfg.to_toml())?;
    let (train_idx, eval_idx) = (corpus.indices("train"), corpus.indices("eval"));
    ensure!(!train_idx.is_empty(), "corpus has no train scenes");
    let train_set = samples(&model, &corpus, &train_idx)?;
    let eval_set = samples(&model, &corpus, &eval_idx)?;
    let eval_dets = pick(&corpus_detections(&corpus, cfg.detections().as_deref())?, &eval_idx);
    let opts = cfg.train_options();
    let ecfg = EvalConfig::default();
    let mut opt = AdamW::new(opts.lr);
    let (mut mrows, mut lrows) = (Vec::new(), Vec::new());
    for epoch in 1..=opts.epochs {
        let b = train_epoch(&model, &mut store, &mut opt, &train_set, None, &opts, epoch)?;
        let ev = mean_loss(&model, &store, &eval_set, None, &opts)?;
        let m = evaluate_model(&model, &store, &eval_set, &eval_dets, opts.forward, &ecfg)?;
        out.log(format!("epoch {epoch} loss {:.4} eval {ev:.4} | {}", b.total, m.csv_row()));
        mrows.push((epoch, m));
        lrows.push((epoch, b, ev));
        out.write(METRICS, &metrics_csv(&mrows))?;
        out.write(LOSSES, &losses_csv(&lrows))?;
    }
    let checkpoint = out.path(MODEL);
    save_model(&model, &store, &checkpoint)?;
    Ok(TrainSummary {
        metrics: mrows.into_iter().map(|(_, m)| m).collect(),
        eval_losses: lrows.iter().map(|r| r.2).collect(),
        losses: lrows.into_iter().map(|(_, b, _)| b).collect(),
        checkpoint,
    })
}

// ---- topology fine-tune ----

#[derive(Debug, Clone)]
pub struct FinetuneSummary {
    pub before: MetricReport,
    pub after: MetricReport,
    pub frozen_before: String,
    pub frozen_after: String,
    pub checkpoint: PathBuf,
}

/// Trains only the topology heads on detector boxes; everything else is
/// frozen and its fingerprint is compared before and after.
pub fn finetune_topology(
    cfg: &RunConfig,
    checkpoint: &Path,
    detections: Option<&Path>,
    out: &Output,
) -> Result<FinetuneSummary> {
    cfg.validate()?;
    let corpus = load_corpus(Path::new(&cfg.data_dir))?;
    let (model, mut store) = load_model(cfg, checkpoint)?;
    out.prepare()?;
    out.write(CONFIG_ECHO, &cfg.to_toml())?;
    let file = detections.map(Path::to_path_buf).or_else(|| cfg.detections());
    let frames = corpus_detections(&corpus, file.as_deref())?;
    out.log(match &file {
        Some(p) => format!("detections from {}", p.display()),
        None => "detections from the built-in simulator".to_string(),
    });
    let (train_idx, eval_idx) = (corpus.indices("train"), corpus.indices("eval"));
    let train_set = samples(&model, &corpus, &train_idx)?;
    let eval_set = samples(&model, &corpus, &eval_idx)?;
    let train_dets = pick(&frames, &train_idx);
    let eval_dets = pick(&frames, &eval_idx);

    freeze_backbone(&mut store);
    ensure!(store.trainable_count() > 0, "model has no topology parameters");
    let frozen = |n: &str| !is_topology_param(n);
    let frozen_before = store.fingerprint(frozen);
    let opts = mapkit_core::pipeline::TrainOptions {
        lr: cfg.finetune_lr,
        epochs: cfg.finetune_epochs,
        ..cfg.train_options()
    };
    let ecfg = EvalConfig::default();
    let before = evaluate_model(&model, &store, &eval_set, &eval_dets, opts.forward, &ecfg)?;
    let mut opt = AdamW::new(opts.lr);
    let (mut mrows, mut lrows) = (vec![(0, before)], Vec::new());
    for epoch in 1..=opts.epochs {
        let b = train_epoch(&model, &mut store, &mut opt, &train_set, Some(&train_dets), &opts, epoch)?;
        let ev = mean_loss(&model, &store, &eval_set, Some(&eval_dets), &opts)?;
        let m = evaluate_model(&model, &store, &eval_set, &eval_dets, opts.forward, &ecfg)?;
        out.log(format!("finetune epoch {epoch} loss {:.4} | {}", b.total, m.csv_row()));
        mrows.push((epoch, m));
        lrows.push((epoch, b, ev));
    }
    let frozen_after = store.fingerprint(frozen);
    out.write(FINGERPRINTS, &format!("before {frozen_before}\nafter {frozen_after}\n"))?;
    ensure!(
        frozen_before == frozen_after,
        "frozen parameters changed during topology fine-tuning ({frozen_before} -> {frozen_after})"
    );
    out.write(METRICS, &metrics_csv(&mrows))?;
    out.write(LOSSES, &losses_csv(&lrows))?;
    let path = out.path(MODEL);
    save_model(&model, &store, &path)?;
    Ok(FinetuneSummary {
        before,
        after: mrows.last().expect("has before row").1,
        frozen_before,
        frozen_after,
        checkpoint: path,
    })
}

// ---- eval ----

/// Scores the held-out split; `oracle` replays ground truth instead of
/// running a model.
pub fn eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    oracle: bool,
    detections: Option<&Path>,
    out: &Output,
) -> Result<MetricReport> {
    cfg.validate()?;
    let corpus = load_corpus(Path::new(&cfg.data_dir))?;
    let eval_idx = corpus.indices("eval");
    let ecfg = EvalConfig::default();
    let report = if oracle {
        let scenes = pick(&corpus.scenes, &eval_idx);
        let preds: Vec<ScenePrediction> = scenes.iter().map(ScenePrediction::from_ground_truth).collect();
        evaluate(&scenes, &preds, &ecfg)?
    } else {
        let Some(ck) = checkpoint else {
            bail!("eval needs --checkpoint or --oracle");
        };
        let (model, store) = load_model(cfg, ck)?;
        let file = detections.map(Path::to_path_buf).or_else(|| cfg.detections());
        let frames = pick(&corpus_detections(&corpus, file.as_deref())?, &eval_idx);
        let eval_set = samples(&model, &corpus, &eval_idx)?;
        evaluate_model(&model, &store, &eval_set, &frames, cfg.forward(), &ecfg)?
    };
    out.prepare()?;
    out.write(CONFIG_ECHO, &cfg.to_toml())?;
    out.write(EVAL, &format!("{}\n{}\n", MetricReport::csv_header(), report.csv_row()))?;
    Ok(report)
}

// ---- report ----

/// One row per run: the config label and the run's final metric row.
pub fn report(runs: &[PathBuf], out: &Output) -> Result<String> {
    ensure!(!runs.is_empty(), "report needs at least one run directory");
    let mut rows = Vec::with_capacity(runs.len());
    for dir in runs {
        let cfg = RunConfig::load(&dir.join(CONFIG_ECHO))?;
        let (name, skip) = if dir.join(METRICS).exists() { (METRICS, 1) } else { (EVAL, 0) };
        let p = dir.join(name);
        let text = fs::read_to_string(&p).with_context(|| format!("run {}: no metrics", dir.display()))?;
        let last = text.lines().skip(1).last().with_context(|| format!("{}: no rows", p.display()))?;
        let values: Vec<&str> = last.split(',').skip(skip).collect();
        ensure!(values.len() == 6, "{}: expected 6 metric columns", p.display());
        rows.push((cfg.label, dir.display().to_string(), values.join(",")));
    }
    rows.sort();
    let mut s = format!("label,{}\n", MetricReport::csv_header());
    for (label, _, v) in &rows {
        writeln!(s, "{label},{v}").unwrap();
    }
    out.prepare()?;
    out.write(REPORT, &s)?;
    Ok(s)
}
