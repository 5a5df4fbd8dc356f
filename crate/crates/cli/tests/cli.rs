use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output as ProcOutput};
use std::time::Instant;

use mapkit::commands::{self, Output, PretrainMode, CORPUS_HASH, EVAL, MANIFEST, METRICS, MODEL};
use mapkit::RunConfig;
use mapkit_core::metrics::olus;
use mapkit_tensor::Checkpoint;
use tempfile::TempDir;

const DEFAULT_CORPUS_HASH: &str = "1ff51369302e68369dfa18fb510ba69eb5e451d2787d40e8bf0d64d7e746063b";

fn smoke(dir: &Path) -> RunConfig {
    let text = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.toml")).unwrap();
    let mut cfg = RunConfig::parse(&text).unwrap();
    cfg.data_dir = dir.join("data").display().to_string();
    cfg
}

fn with_corpus(cfg: &RunConfig) {
    commands::gen_data(cfg, &Output::new(&cfg.data_dir)).unwrap();
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, cfg.to_toml()).unwrap();
    p
}

fn mapkit(args: &[&str]) -> ProcOutput {
    Command::new(env!("CARGO_BIN_EXE_mapkit")).args(args).arg("-q").output().unwrap()
}

fn stderr(o: &ProcOutput) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn default_corpus_is_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("corpus");
    let o = mapkit(&["gen-data", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), DEFAULT_CORPUS_HASH);
    assert_eq!(fs::read_to_string(out.join(CORPUS_HASH)).unwrap().trim(), DEFAULT_CORPUS_HASH);
    assert_eq!(fs::read_to_string(out.join(MANIFEST)).unwrap().lines().count(), 131);
}

#[test]
fn gen_data_refuses_existing_dir_and_handles_zero_scenes() {
    let tmp = TempDir::new().unwrap();
    let cfg = RunConfig {
        n_scenes: 0,
        n_eval: 0,
        ..RunConfig::default()
    };
    let conf = write_config(tmp.path(), &cfg);
    let out = tmp.path().join("c");
    assert!(mapkit(&["--config", s(&conf), "gen-data", "--out", s(&out)]).status.success());
    assert_eq!(fs::read_to_string(out.join(MANIFEST)).unwrap(), "index,seed,split,path\n");

    let again = mapkit(&["--config", s(&conf), "gen-data", "--out", s(&out)]);
    assert!(!again.status.success());
    assert!(stderr(&again).contains("--force"), "{}", stderr(&again));
    assert!(mapkit(&["--config", s(&conf), "gen-data", "--out", s(&out), "--force"]).status.success());
}

#[test]
fn invalid_config_exits_nonzero_naming_the_key() {
    let tmp = TempDir::new().unwrap();
    for (text, key) in [("mask_ratio = 0.0\n", "mask_ratio"), ("epochz = 2\n", "epochz"), ("lr = -1.0\n", "lr")] {
        let p = tmp.path().join("bad.toml");
        fs::write(&p, text).unwrap();
        let o = mapkit(&["--config", s(&p), "pretrain", "mae"]);
        assert!(!o.status.success());
        assert!(stderr(&o).contains(key), "{key}: {}", stderr(&o));
    }
}

#[test]
fn missing_corpus_is_reported() {
    let tmp = TempDir::new().unwrap();
    let cfg = smoke(tmp.path());
    let conf = write_config(tmp.path(), &cfg);
    let o = mapkit(&["--config", s(&conf), "train", "--out", s(&tmp.path().join("r"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("missing corpus"), "{}", stderr(&o));
}

#[test]
fn ae_pretraining_lowers_loss_and_feeds_training() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = RunConfig {
        data_dir: tmp.path().join("full").display().to_string(),
        d_h: 16,
        encoder_layers: 1,
        heads: 2,
        pretrain_epochs: 3,
        pretrain_lr: 1e-3,
        ..RunConfig::default()
    };
    with_corpus(&cfg);
    let p = commands::pretrain(&cfg, PretrainMode::Ae, &Output::new(tmp.path().join("ae"))).unwrap();
    assert!(p.epoch_losses.iter().all(|l| l.is_finite()));
    assert!(p.epoch_losses.last() < p.epoch_losses.first(), "{:?}", p.epoch_losses);
    let log = fs::read_to_string(tmp.path().join("ae/pretrain_loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);

    let small = smoke(tmp.path());
    cfg = RunConfig {
        data_dir: small.data_dir.clone(),
        pretrained_encoder: p.checkpoint.display().to_string(),
        d_h: 16,
        encoder_layers: 1,
        heads: 2,
        ..small.clone()
    };
    with_corpus(&small);
    commands::train(&cfg, &Output::new(tmp.path().join("t"))).unwrap();

    let wide = RunConfig { d_h: 32, ..cfg };
    let err = format!("{:#}", commands::train(&wide, &Output::new(tmp.path().join("w"))).unwrap_err());
    assert!(err.contains("d_h"), "{err}");
}

#[test]
fn mae_pretraining_runs() {
    let tmp = TempDir::new().unwrap();
    let cfg = smoke(tmp.path());
    with_corpus(&cfg);
    let conf = write_config(tmp.path(), &cfg);
    let out = tmp.path().join("mae");
    let o = mapkit(&["--config", s(&conf), "pretrain", "mae", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("encoder.json").exists());
}

#[test]
fn smoke_train_is_fast_and_deterministic() {
    let tmp = TempDir::new().unwrap();
    let cfg = smoke(tmp.path());
    with_corpus(&cfg);
    let conf = write_config(tmp.path(), &cfg);
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let t = Instant::now();
        let o = mapkit(&["--config", s(&conf), "train", "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(t.elapsed().as_secs() < 60);
        csvs.push(fs::read(out.join(METRICS)).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    let text = String::from_utf8(csvs[0].clone()).unwrap();
    assert_eq!(text.lines().next(), Some("epoch,det_l,det_a,det_t,top_ll,top_lt,olus"));
    assert_eq!(text.lines().count(), 1 + cfg.epochs);
}

#[test]
fn config_echo_reproduces_the_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = smoke(tmp.path());
    with_corpus(&cfg);
    let first = tmp.path().join("first");
    commands::train(&cfg, &Output::new(&first)).unwrap();
    let echo = first.join("config.toml");
    assert_eq!(RunConfig::load(&echo).unwrap(), cfg);
    let second = tmp.path().join("second");
    let o = mapkit(&["--config", s(&echo), "train", "--out", s(&second)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(first.join(METRICS)).unwrap(), fs::read(second.join(METRICS)).unwrap());
}

#[test]
fn fusion_and_aux_toggles_run_end_to_end() {
    let tmp = TempDir::new().unwrap();
    let cfg = smoke(tmp.path());
    with_corpus(&cfg);
    let conf = write_config(tmp.path(), &cfg);
    let out = tmp.path().join("off");
    let o = mapkit(&[
        "--config",
        s(&conf),
        "train",
        "--sdmap-fusion",
        "off",
        "--aux-head",
        "off",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let echo = RunConfig::load(&out.join("config.toml")).unwrap();
    assert!(!echo.sdmap_fusion && !echo.aux_head);
    let losses = fs::read_to_string(out.join("losses.csv")).unwrap();
    let aux: Vec<f64> = losses.lines().skip(1).map(|l| l.split(',').nth(6).unwrap().parse().unwrap()).collect();
    assert!(aux.iter().all(|&a| a == 0.0), "{losses}");
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("det_l,det_a,det_t,top_ll,top_lt,olus"));
}

#[test]
fn finetune_freezes_backbone_with_stub_or_file_detections() {
    let tmp = TempDir::new().unwrap();
    let cfg = smoke(tmp.path());
    with_corpus(&cfg);
    let run = tmp.path().join("run");
    let ck = commands::train(&cfg, &Output::new(&run)).unwrap().checkpoint;

    let stub = commands::finetune_topology(&cfg, &ck, None, &Output::new(tmp.path().join("ft"))).unwrap();
    assert_eq!(stub.frozen_before, stub.frozen_after);

    let corpus = commands::load_corpus(Path::new(&cfg.data_dir)).unwrap();
    let frames = commands::corpus_detections(&corpus, None).unwrap();
    let det_path = tmp.path().join("dets.json");
    mapkit_core::pipeline::write_detections(&frames, &det_path).unwrap();
    let conf = write_config(tmp.path(), &cfg);
    let out = tmp.path().join("ft2");
    let o = mapkit(&[
        "--config",
        s(&conf),
        "finetune-topology",
        "--checkpoint",
        s(&ck),
        "--detections",
        s(&det_path),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(out.join(METRICS)).unwrap(), fs::read(tmp.path().join("ft").join(METRICS)).unwrap());
    let fp = fs::read_to_string(out.join("fingerprints.txt")).unwrap();
    let h: Vec<&str> = fp.lines().map(|l| l.split(' ').nth(1).unwrap()).collect();
    assert_eq!(h[0], h[1]);

    let before = Checkpoint::load(&ck).unwrap();
    let after = Checkpoint::load(&out.join(MODEL)).unwrap();
    let mut changed = 0;
    for (a, b) in before.params.iter().zip(&after.params) {
        assert_eq!(a.name, b.name);
        if a.values != b.values {
            assert!(a.name.starts_with("topology_"), "{} moved", a.name);
            changed += 1;
        }
    }
    assert!(changed > 0);

    fs::write(&det_path, "[[{\"bbox\": [0, 0, 10, 10], \"class_id\": 99, \"score\": 0.5}]]").unwrap();
    let o = mapkit(&[
        "--config",
        s(&conf),
        "finetune-topology",
        "--checkpoint",
        s(&ck),
        "--detections",
        s(&det_path),
        "--out",
        s(&tmp.path().join("ft3")),
    ]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("class_id"), "{}", stderr(&o));
}

#[test]
fn eval_oracle_and_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let cfg = RunConfig {
        n_scenes: 24,
        n_eval: 20,
        ..smoke(tmp.path())
    };
    with_corpus(&cfg);
    let conf = write_config(tmp.path(), &cfg);
    let o = mapkit(&["--config", s(&conf), "eval", "--oracle", "--out", s(&tmp.path().join("oracle"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout).into_owned();
    assert_eq!(stdout.lines().nth(1), Some("1.0000,1.0000,1.0000,1.0000,1.0000,1.0000"));

    let run = tmp.path().join("run");
    let ck = commands::train(&cfg, &Output::new(&run)).unwrap().checkpoint;
    let out = tmp.path().join("eval");
    let o = mapkit(&["--config", s(&conf), "eval", "--checkpoint", s(&ck), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(out.join(EVAL)).unwrap();
    let v: Vec<f64> = text.lines().nth(1).unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert!((olus(v[0], v[1], v[2], v[3], v[4]).unwrap() - v[5]).abs() <= 5e-5, "{text}");

    let o = mapkit(&["--config", s(&conf), "eval", "--out", s(&tmp.path().join("none"))]);
    assert!(!o.status.success());
}

#[test]
fn malformed_checkpoint_names_the_field() {
    let tmp = TempDir::new().unwrap();
    let cfg = smoke(tmp.path());
    with_corpus(&cfg);
    let ck = commands::train(&cfg, &Output::new(tmp.path().join("run"))).unwrap().checkpoint;
    let conf = write_config(tmp.path(), &cfg);

    let mut bad = Checkpoint::load(&ck).unwrap();
    let name = bad.params[3].name.clone();
    bad.params[3].values.pop();
    let truncated = tmp.path().join("truncated.json");
    bad.save(&truncated).unwrap();

    let mut bad = Checkpoint::load(&ck).unwrap();
    let dropped = bad.params.remove(5).name;
    let missing = tmp.path().join("missing.json");
    bad.save(&missing).unwrap();

    let mut bad = Checkpoint::load(&ck).unwrap();
    bad.config.insert("model.n_s".into(), "99".into());
    let header = tmp.path().join("header.json");
    bad.save(&header).unwrap();

    let garbage = tmp.path().join("garbage.json");
    fs::write(&garbage, "{\"format\": \"mapkit-checkpoint\", \"version\": 1}").unwrap();

    for (path, field) in [
        (&truncated, name.as_str()),
        (&missing, dropped.as_str()),
        (&header, "model.n_s"),
        (&garbage, "config"),
    ] {
        let o = mapkit(&["--config", s(&conf), "eval", "--checkpoint", s(path), "--out", s(&tmp.path().join("e"))]);
        assert!(!o.status.success());
        assert!(stderr(&o).contains(field), "{field}: {}", stderr(&o));
    }
}

fn fake_run(dir: &Path, label: &str, row: &str) {
    fs::create_dir_all(dir).unwrap();
    let cfg = RunConfig {
        label: label.into(),
        ..RunConfig::default()
    };
    fs::write(dir.join("config.toml"), cfg.to_toml()).unwrap();
    fs::write(
        dir.join(METRICS),
        format!("epoch,det_l,det_a,det_t,top_ll,top_lt,olus\n1,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000\n2,{row}\n"),
    )
    .unwrap();
}

#[test]
fn report_matches_golden_and_sorts_by_label() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("runs/1");
    let b = tmp.path().join("runs/2");
    fake_run(&a, "with-map-encoder", "0.3500,0.2400,0.4000,0.2900,0.2100,0.4000");
    fake_run(&b, "resnet-baseline", "0.2900,0.2000,0.3600,0.2600,0.2100,0.3610");
    let out = tmp.path().join("report");
    let o = mapkit(&["report", s(&a), s(&b), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let golden = include_str!("golden/report.csv");
    assert_eq!(String::from_utf8_lossy(&o.stdout), golden);
    assert_eq!(fs::read_to_string(out.join("report.csv")).unwrap(), golden);

    let single = commands::report(&[a], &Output::new(tmp.path().join("single"))).unwrap();
    assert_eq!(single.lines().count(), 2);
}
