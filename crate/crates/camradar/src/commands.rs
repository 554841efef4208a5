//! The work behind each CLI subcommand, callable without a process boundary.

use std::path::Path;

use anyhow::{ensure, Context, Result};
use camradar_core::association::associate;
use camradar_core::eval::MetricsReport;
use camradar_core::fusion::selfcheck::{check_fusion_gradients, check_op_gradients};
use camradar_core::fusion::{CoordMode, FusionModel};
use camradar_core::pipeline::{accumulated_points, feature_stats, run_evaluation, run_training, EpochSummary};
use camradar_core::radar::FeatureStats;
use camradar_core::simulator::{frame_seed, simulate_frame, Frame, NUM_CLASSES};
use camradar_core::tensor::gradcheck::GradCheckReport;
use camradar_core::tensor::ParamStore;
use camradar_core::{derive_seed, seeded_rng, Error};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::RunConfig;
use crate::scenefile::{read_scene_file, write_scene_file};

// Stream tags so the model, training and evaluation never share randomness.
const MODEL_INIT: u64 = 1;
const TRAIN: u64 = 2;
const EVAL: u64 = 3;

pub fn simulate(cfg: &RunConfig, frames: usize, out: &Path, with_maps: bool) -> Result<()> {
    let mut all = Vec::with_capacity(frames);
    for i in 0..frames {
        let s = frame_seed(cfg.seed, i);
        all.push((Some(s), simulate_frame(&cfg.simulator, s)?));
    }
    write_scene_file(out, cfg.seed, &cfg.simulator, &all, with_maps)
}

/// Reads every frame of a scene file into memory.
pub fn load_frames(path: &Path, cfg: &RunConfig) -> Result<Vec<Frame>> {
    let sf = read_scene_file(path)?;
    if let Some(sim) = sf.simulator() {
        ensure!(
            sim.features.channels == cfg.fusion.model.image_channels,
            "scene file has {}-channel feature maps, the model expects {}",
            sim.features.channels,
            cfg.fusion.model.image_channels
        );
    }
    let mut out = Vec::with_capacity(sf.records.len());
    for i in 0..sf.records.len() {
        out.push(camradar_core::pipeline::FrameProvider::frame(&sf, i)?.into_owned());
    }
    Ok(out)
}

/// The untrained model and parameters `train` starts from.
pub fn initial_model(cfg: &RunConfig) -> Result<(FusionModel, ParamStore)> {
    let mut store = ParamStore::new();
    let model = FusionModel::new(&mut store, &cfg.fusion.model, &mut seeded_rng(derive_seed(cfg.seed, MODEL_INIT)))?;
    Ok((model, store))
}

/// Trains from [`initial_model`]. When the loss goes non-finite the
/// diagnostic is written to `nan_dump` (if given) and training aborts.
pub fn train(cfg: &RunConfig, frames: &[Frame], nan_dump: Option<&Path>) -> Result<(Checkpoint, Vec<EpochSummary>)> {
    let pcfg = cfg.pipeline();
    let fcfg = &cfg.fusion.model;
    let tcfg = &cfg.training.train;
    let (model, mut store) = initial_model(cfg)?;
    let stats = if frames.is_empty() { FeatureStats::IDENTITY } else { feature_stats(frames, &pcfg, tcfg.stats_frames)? };
    let history = run_training(&model, &mut store, frames, &pcfg, tcfg, &stats, derive_seed(cfg.seed, TRAIN), |e| {
        log::info!("epoch {} steps {} loss {:.5} (in-box {:.4} fusion {:.4} center-ness {:.4} offset {:.4} speed {:.4}) lr {:.2e}",
            e.epoch, e.steps, e.loss.total, e.loss.in_box, e.loss.fusion, e.loss.centerness, e.loss.offset, e.loss.speed, e.last_lr);
    });
    let history = match history {
        Ok(h) => h,
        Err(Error::NonFinite(msg)) => {
            if let Some(p) = nan_dump {
                std::fs::write(p, format!("non-finite loss during training\nseed {}\n{msg}\n", cfg.seed))
                    .with_context(|| format!("writing {}", p.display()))?;
                log::error!("diagnostic written to {}", p.display());
            }
            anyhow::bail!("training aborted: non-finite loss: {msg}");
        }
        Err(e) => return Err(e.into()),
    };
    let meta = CheckpointMeta { fusion: fcfg.clone(), stats, epochs: tcfg.epochs, seed: cfg.seed };
    Ok((Checkpoint { meta, store }, history))
}

/// Camera-only evaluation when `checkpoint` is `None`.
pub fn evaluate(cfg: &RunConfig, frames: &[Frame], checkpoint: Option<&Checkpoint>) -> Result<MetricsReport> {
    let pcfg = cfg.pipeline();
    let seed = derive_seed(cfg.seed, EVAL);
    Ok(match checkpoint {
        Some(ck) => {
            let model = ck.model()?;
            run_evaluation(Some((&model, &ck.store)), frames, &pcfg, &ck.meta.stats, &cfg.eval, NUM_CLASSES, seed)?
        }
        None => run_evaluation(None, frames, &pcfg, &FeatureStats::IDENTITY, &cfg.eval, NUM_CLASSES, seed)?,
    })
}

/// One line per proposal: its index, then the indices of the associated
/// points in the frame's accumulated point list (reference sweep first).
pub fn associate_lines(cfg: &RunConfig, frame: &Frame) -> Result<Vec<String>> {
    let pcfg = cfg.pipeline();
    let points = accumulated_points(frame, pcfg.n_sweeps)?;
    let a = associate(pcfg.associator, &frame.proposals, &points, &pcfg.association, pcfg.ball_radius)?;
    Ok(a
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let mut line = i.to_string();
            for j in e {
                line.push(' ');
                line.push_str(&j.to_string());
            }
            line
        })
        .collect())
}

/// Finite-difference checks of every tensor operation and of the fusion loss
/// on the two-proposal toy instance in both coordinate modes.
pub fn gradcheck(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out: Vec<(String, GradCheckReport)> = check_op_gradients(1e-5)?.into_iter().map(|(n, r)| (n.to_string(), r)).collect();
    for (name, coords) in [("fusion loss (polar)", CoordMode::Polar), ("fusion loss (cartesian)", CoordMode::Cartesian)] {
        out.push((name.to_string(), check_fusion_gradients(seed, coords, 1e-5)?));
    }
    Ok(out)
}
