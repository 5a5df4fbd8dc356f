use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use mapkit::commands::{self, Output, PretrainMode};
use mapkit::RunConfig;
use mapkit_core::metrics::MetricReport;

#[derive(Parser, Debug)]
#[command(name = "mapkit", version, about = "SD-map-conditioned lane topology perception")]
struct Cli {
    /// Flat key = value config file; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` (for gen-data: `data_seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Defaults to `data_dir` for gen-data and `runs/<label>` otherwise.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Toggle {
    On,
    Off,
}

impl Toggle {
    fn on(self) -> bool {
        matches!(self, Toggle::On)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Ae,
    Mae,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus.
    GenData,
    /// Pretrain the map encoder.
    Pretrain {
        #[arg(value_enum)]
        mode: Mode,
    },
    /// Train all heads jointly.
    Train {
        #[arg(long, value_enum)]
        sdmap_fusion: Option<Toggle>,
        #[arg(long, value_enum)]
        aux_head: Option<Toggle>,
        #[arg(long)]
        pretrained_encoder: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fine-tune the topology heads with the rest of the model frozen.
    FinetuneTopology {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, or replayed ground truth with --oracle.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Collect the final metric row of each run into one table.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn print_report(r: &MetricReport) {
    println!("{}", MetricReport::csv_header());
    println!("{}", r.csv_row());
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        match cli.command {
            Command::GenData => cfg.data_seed = s,
            _ => cfg.seed = s,
        }
    }
    let out_dir = match (&cli.out, &cli.command) {
        (Some(o), _) => o.clone(),
        (None, Command::GenData) => PathBuf::from(&cfg.data_dir),
        (None, Command::Report { .. }) => PathBuf::from("report"),
        (None, _) => PathBuf::from("runs").join(&cfg.label),
    };
    let out = Output {
        dir: out_dir,
        force: cli.force,
        verbose: !cli.quiet,
    };
    match cli.command {
        Command::GenData => {
            let hash = commands::gen_data(&cfg, &out)?;
            println!("{hash}");
        }
        Command::Pretrain { mode } => {
            let mode = match mode {
                Mode::Ae => PretrainMode::Ae,
                Mode::Mae => PretrainMode::Mae,
            };
            let s = commands::pretrain(&cfg, mode, &out)?;
            println!("{}", s.checkpoint.display());
        }
        Command::Train {
            sdmap_fusion,
            aux_head,
            pretrained_encoder,
            epochs,
        } => {
            if let Some(t) = sdmap_fusion {
                cfg.sdmap_fusion = t.on();
            }
            if let Some(t) = aux_head {
                cfg.aux_head = t.on();
            }
            if let Some(p) = pretrained_encoder {
                cfg.pretrained_encoder = p.display().to_string();
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            let s = commands::train(&cfg, &out)?;
            print_report(&s.final_metrics());
        }
        Command::FinetuneTopology { checkpoint, detections } => {
            let s = commands::finetune_topology(&cfg, &checkpoint, detections.as_deref(), &out)?;
            print_report(&s.after);
        }
        Command::Eval {
            checkpoint,
            oracle,
            detections,
        } => {
            let r = commands::eval(&cfg, checkpoint.as_deref(), oracle, detections.as_deref(), &out)?;
            print_report(&r);
        }
        Command::Report { runs } => {
            print!("{}", commands::report(&runs, &out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
