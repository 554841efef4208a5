use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use camradar::checkpoint::Checkpoint;
use camradar::commands;
use camradar::config::RunConfig;
use camradar::report::{write_loss_csv, write_metrics_csv};
use camradar_core::association::AssociatorKind;
use camradar_core::fusion::CoordMode;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Camera-radar proposal fusion: simulate scenes, train, evaluate.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic scene file.
    Simulate {
        #[arg(long, default_value_t = 100)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also store camera feature maps next to the scene file.
        #[arg(long)]
        with_maps: bool,
    },
    /// Train the fusion model and write a checkpoint.
    Train {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Per-epoch loss curve.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Where to write the diagnostic if the loss goes non-finite
        /// (default: `<checkpoint>.nan.txt`).
        #[arg(long)]
        nan_dump: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Evaluate detections and write the metrics CSV.
    Eval {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long, required_unless_present = "camera_only")]
        checkpoint: Option<PathBuf>,
        /// Score the camera proposals alone, skipping fusion.
        #[arg(long)]
        camera_only: bool,
        /// Metrics CSV; stdout when omitted.
        #[arg(long)]
        metrics_csv: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Print the radar points associated with each proposal of one frame.
    Associate {
        #[arg(long)]
        scenes: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Finite-difference checks of every tensor operation and the fusion loss.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Args)]
struct ModelFlags {
    #[arg(long, value_enum)]
    associator: Option<Associator>,
    #[arg(long, value_enum)]
    coords: Option<Coords>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Associator {
    Spa,
    Ball,
    Roipool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Coords {
    Polar,
    Cartesian,
}

impl From<Coords> for CoordMode {
    fn from(c: Coords) -> Self {
        match c {
            Coords::Polar => CoordMode::Polar,
            Coords::Cartesian => CoordMode::Cartesian,
        }
    }
}

impl ModelFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(a) = self.associator {
            cfg.association.kind = match a {
                Associator::Spa => AssociatorKind::Spa,
                Associator::Ball => AssociatorKind::BallQuery,
                Associator::Roipool => AssociatorKind::RoiPool,
            };
        }
        if let Some(c) = self.coords {
            cfg.fusion.model.coords = c.into();
        }
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.cmd {
        Cmd::Simulate { frames, out, with_maps } => {
            commands::simulate(&cfg, frames, &out, with_maps)?;
            log::info!("wrote {frames} frames to {}", out.display());
        }
        Cmd::Train { scenes, checkpoint, loss_csv, epochs, nan_dump, model } => {
            model.apply(&mut cfg);
            if let Some(e) = epochs {
                cfg.training.train.epochs = e;
            }
            cfg.validate()?;
            let frames = commands::load_frames(&scenes, &cfg)?;
            let dump = nan_dump.unwrap_or_else(|| checkpoint.with_extension("nan.txt"));
            let (ck, history) = commands::train(&cfg, &frames, Some(&dump))?;
            ck.save(&checkpoint)?;
            if let Some(p) = loss_csv {
                write_loss_csv(&history, output(Some(&p))?)?;
            }
            log::info!("checkpoint written to {}", checkpoint.display());
        }
        Cmd::Eval { scenes, checkpoint, camera_only, metrics_csv, model } => {
            model.apply(&mut cfg);
            cfg.validate()?;
            let ck = match (&checkpoint, camera_only) {
                (_, true) => None,
                (Some(p), false) => Some(Checkpoint::load_for(p, &cfg.fusion.model)?),
                (None, false) => bail!("--checkpoint is required unless --camera-only is given"),
            };
            let frames = commands::load_frames(&scenes, &cfg)?;
            let report = commands::evaluate(&cfg, &frames, ck.as_ref())?;
            log::info!("{} frames: mAP {:?}", frames.len(), report.overall.mean_ap);
            write_metrics_csv(&report, output(metrics_csv.as_deref())?)?;
        }
        Cmd::Associate { scenes, frame, out, model } => {
            model.apply(&mut cfg);
            cfg.validate()?;
            let sf = camradar::scenefile::read_scene_file(&scenes)?;
            let f = camradar_core::pipeline::FrameProvider::frame(&sf, frame)?;
            let mut w = output(out.as_deref())?;
            for line in commands::associate_lines(&cfg, &f)? {
                writeln!(w, "{line}")?;
            }
            w.flush()?;
        }
        Cmd::Gradcheck { tolerance } => {
            let mut failed = Vec::new();
            for (name, r) in commands::gradcheck(cfg.seed)? {
                let ok = r.passes(tolerance);
                println!("{} {name}: {} entries, max relative error {:.3e}", if ok { "ok  " } else { "FAIL" }, r.checked, r.max_rel_err);
                if !ok {
                    failed.push(name);
                }
            }
            if !failed.is_empty() {
                bail!("gradient check failed (tolerance {tolerance:e}): {}", failed.join(", "));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
