//! `seldlab` command-line entry point.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use seldlab::config::{load_toml, Condition, RunConfig};
use seldlab::pipeline;
use seldlab::sine::SineConfig;
use seldlab::study::{self, StudyConfig};
use seldlab::{Error, Result};

#[derive(Parser)]
#[command(name = "seldlab", version, about = "Room-adaptive SELD laboratory: data, training, evaluation, reports")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single worker thread; runs are bit-reproducible either way.
    #[arg(long, global = true)]
    serial: bool,
    /// Worker threads for per-task work.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic multi-room dataset.
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cache one feature file per 5 s segment.
    ExtractFeatures {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (defaults to the config's `dataset_dir`).
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train or load a model for one condition and evaluate it on held-out rooms.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        condition: Option<Condition>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a directory of per-segment prediction CSVs.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Directory of reference annotation CSVs (one per clip).
        #[arg(long)]
        refs: PathBuf,
        /// Directory of `<clip>_segNN.csv` predictions.
        #[arg(long)]
        preds: PathBuf,
        /// Dataset manifest (`clip_id,room_id,split`).
        #[arg(long)]
        manifest: PathBuf,
        /// Output metrics CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge run directories into a per-room table and plot training curves.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// In-memory comparison of the three conditions over a seed grid.
    Study {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seed grid.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Few-shot sinusoid regression check.
    Sine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        iterations: Option<usize>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    apply_workers(common, &mut cfg.workers);
    cfg.validate()?;
    Ok(cfg)
}

fn apply_workers(common: &Common, workers: &mut usize) {
    if let Some(w) = common.workers {
        *workers = w;
    }
    if common.serial {
        *workers = 1;
    }
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn execute(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::SynthData { common, out } => {
            let cfg = load_config(&common)?;
            let out = out.unwrap_or(cfg.dataset_dir.clone());
            let rows = pipeline::synth_data(&cfg, &out)?;
            println!("{} clips written to {}", rows.len(), out.display());
        }
        Cmd::ExtractFeatures { common, dataset, out } => {
            let cfg = load_config(&common)?;
            let dataset = dataset.unwrap_or(cfg.dataset_dir.clone());
            let out = out.unwrap_or(cfg.features_dir.clone());
            let s = pipeline::extract_features_dir(&dataset, &out)?;
            println!("{} clips: {} segments written, {} up to date", s.clips, s.written, s.skipped);
        }
        Cmd::Run { common, condition, out } => {
            let mut cfg = load_config(&common)?;
            if let Some(c) = condition {
                cfg.condition = c;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let summary = pipeline::run(&cfg)?;
            if let Some(o) = summary.rows.last() {
                println!(
                    "{}: overall ER {:.3} F {:.1}% LE {:.1} LR {:.1}% E_SELD {:.4} -> {}",
                    cfg.condition.label(),
                    o.er20,
                    100.0 * o.f20,
                    o.le_cd,
                    100.0 * o.lr_cd,
                    o.e_seld,
                    summary.out_dir.display()
                );
            }
        }
        Cmd::Evaluate { common: _, refs, preds, manifest, out } => {
            let rows = pipeline::evaluate_dirs(&refs, &preds, &manifest)?;
            match out {
                Some(p) => pipeline::save_metrics(&p, &rows)?,
                None => seldlab::metrics::write_metrics_csv(&rows, std::io::stdout().lock())?,
            }
        }
        Cmd::Report { common: _, runs, out } => {
            let table = pipeline::report(&runs, &out)?;
            print!("{}", std::fs::read_to_string(&table).map_err(|e| Error::io(&table, e))?);
        }
        Cmd::Study { common, seeds, out } => {
            let mut cfg: StudyConfig = load_toml(common.config.as_deref())?;
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            apply_workers(&common, &mut cfg.workers);
            let summary = study::run(&cfg, &mut |line| eprintln!("{line}"))?;
            let csv = study::summary_csv(&summary);
            print!("{csv}");
            println!(
                "ordering Meta <= Fine-tune <= Pre-train: {}; Meta beats Fine-tune in {}/{} rooms",
                summary.ordering_holds(),
                summary.meta_wins(),
                summary.rooms.len()
            );
            if let Some(p) = out {
                write_out(&p, &csv)?;
            }
        }
        Cmd::Sine { common, iterations } => {
            let mut cfg: SineConfig = load_toml(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(i) = iterations {
                cfg.iterations = i;
            }
            let r = seldlab::sine::run(&cfg)?;
            println!(
                "meta MSE {:.4}, baseline MSE {:.4}, ratio {:.3}",
                r.meta_mse, r.baseline_mse, r.ratio
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
