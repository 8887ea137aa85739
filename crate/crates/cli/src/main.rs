use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use ctscreen_core::error::Error as CoreError;
use ctscreen_core::pipeline::complexity::{table_header, table_row};
use ctscreen_core::pipeline::export::detections_to_labels;
use ctscreen_core::pipeline::{
    cmd_complexity, cmd_eval, cmd_export_slices, cmd_infer, cmd_synth, cmd_train, Axis, ModelKind, RunConfig,
};
use ctscreen_core::postproc::load_detections;
use ctscreen_core::volume::{load_labels, load_volume};

#[derive(Parser)]
#[command(name = "ctscreen", version, about = "Contraband material segmentation and detection in CT volumes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    factor: Option<usize>,
    /// unet3d, res_unet3d, pointnet or pointnet2
    #[arg(long, global = true)]
    model: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and manifest
    Synth { out_dir: PathBuf },
    /// Train on the manifest's training split
    Train { manifest: PathBuf, checkpoint: PathBuf },
    /// Segment a volume, or a manifest's test split, and detect objects
    Infer {
        checkpoint: PathBuf,
        input: PathBuf,
        out_dir: PathBuf,
    },
    /// Score predictions against ground truth
    Eval {
        manifest: PathBuf,
        pred_dir: PathBuf,
        report: PathBuf,
    },
    /// Parameter and FLOP counts on a 300x512x512 volume
    Complexity,
    /// Write slice images with material overlays
    ExportSlices {
        volume: PathBuf,
        out_dir: PathBuf,
        #[arg(long, conflicts_with = "detections")]
        labels: Option<PathBuf>,
        #[arg(long)]
        detections: Option<PathBuf>,
        #[arg(long, default_value = "z")]
        axis: String,
        /// Comma-separated slice indices
        #[arg(long, value_delimiter = ',', required = true)]
        indices: Vec<usize>,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(f) = c.factor {
        cfg.factor = f;
    }
    if let Some(m) = &c.model {
        cfg.model = m.parse::<ModelKind>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "slice".into())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Synth { out_dir } => {
            let manifest = cmd_synth(&cfg, &out_dir)?;
            println!("{}", manifest.display());
        }
        Command::Train { manifest, checkpoint } => {
            let log = cmd_train(&cfg, &manifest, &checkpoint, &mut |e| {
                eprintln!("epoch {:>4}  lr {:.3e}  loss {:.5}", e.epoch, e.lr, e.loss);
            })?;
            println!(
                "{} ({} params) trained for {} epochs, config {}",
                log.model,
                log.params,
                log.epochs.len(),
                &log.config_hash[..12]
            );
        }
        Command::Infer {
            checkpoint,
            input,
            out_dir,
        } => {
            for r in cmd_infer(&cfg, &checkpoint, &input, &out_dir)? {
                for w in &r.warnings {
                    eprintln!("warning: {}: {w}", r.name);
                }
                println!("{}: {} objects", r.name, r.objects);
            }
        }
        Command::Eval {
            manifest,
            pred_dir,
            report,
        } => {
            let r = cmd_eval(&cfg, &manifest, &pred_dir, &report)?;
            print!("{}", r.scores.table());
            println!("config {}", &r.config_hash[..12]);
        }
        Command::Complexity => {
            let r = cmd_complexity(&cfg)?;
            println!("{}", table_header());
            println!("{}", table_row(&cfg, &r));
            println!("{}", serde_json::to_string(&r)?);
        }
        Command::ExportSlices {
            volume,
            out_dir,
            labels,
            detections,
            axis,
            indices,
        } => {
            let grid = load_volume(&volume)?;
            let overlay = match (labels, detections) {
                (Some(l), _) => Some(load_labels(&l)?),
                (None, Some(d)) => Some(detections_to_labels(&load_detections(&d)?)?),
                (None, None) => None,
            };
            let axis: Axis = axis.parse()?;
            for p in cmd_export_slices(&grid, overlay.as_ref(), axis, &indices, &out_dir, &stem(&volume))? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e
                .chain()
                .find_map(|c| c.downcast_ref::<CoreError>())
                .is_some_and(CoreError::is_validation);
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}
