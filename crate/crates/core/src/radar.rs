//! Radar points, multi-sweep accumulation and network input preparation.

use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods shadow it when std is linked
use num_traits::Float;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::geometry::{Pose, Vec3};

/// Number of per-point input features: RCS, compensated Doppler (x, y), sweep age.
pub const RADAR_FEATURES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarPoint {
    pub position: Vec3,
    /// Radar cross-section in dBsm.
    pub rcs: f64,
    /// Ego-motion compensated radial velocity as a BEV vector (m/s).
    pub doppler: [f64; 2],
    /// Time between this point's capture and the reference frame (s).
    pub sweep_age: f64,
}

impl RadarPoint {
    pub fn features(&self) -> [f64; RADAR_FEATURES] {
        [self.rcs, self.doppler[0], self.doppler[1], self.sweep_age]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarSweep {
    pub points: Vec<RadarPoint>,
    /// Sensor-to-world pose at capture time.
    pub ego_pose: Option<Pose>,
    pub timestamp: f64,
}

/// Moves one point from its capture frame into the reference frame.
///
/// `relative` maps capture-frame coordinates to reference-frame coordinates;
/// the Doppler vector is rotated with it and then integrated over `tau`
/// seconds in the BEV plane. Height only follows the ego motion.
pub fn compensate_point(p: &RadarPoint, relative: &Pose, tau: f64) -> RadarPoint {
    let pos = relative.transform_point(p.position);
    let dv = relative.rotate(Vec3::new(p.doppler[0], p.doppler[1], 0.0));
    RadarPoint {
        position: Vec3::new(pos.x + dv.x * tau, pos.y + dv.y * tau, pos.z),
        rcs: p.rcs,
        doppler: [dv.x, dv.y],
        sweep_age: p.sweep_age + tau,
    }
}

/// Accumulates the `n_sweeps` most recent sweeps into the reference frame.
///
/// `sweeps[0]` is the reference sweep; older sweeps follow with
/// non-increasing timestamps.
pub fn accumulate_sweeps(sweeps: &[RadarSweep], reference: &Pose, n_sweeps: usize) -> Result<Vec<RadarPoint>> {
    if n_sweeps == 0 || n_sweeps > sweeps.len() {
        bail!(Config, "requested {n_sweeps} sweeps but {} are available", sweeps.len());
    }
    let t_ref = sweeps[0].timestamp;
    let to_ref = reference.inverse();
    let mut out = Vec::new();
    for (i, sweep) in sweeps[..n_sweeps].iter().enumerate() {
        let Some(pose) = sweep.ego_pose else {
            bail!(Config, "sweep {i} has no ego pose");
        };
        let tau = t_ref - sweep.timestamp;
        if tau < 0.0 {
            bail!(Config, "sweep {i} is newer than the reference sweep");
        }
        let relative = to_ref.compose(&pose);
        out.extend(sweep.points.iter().map(|p| compensate_point(p, &relative, tau)));
    }
    Ok(out)
}

/// Per-feature normalization statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: [f64; RADAR_FEATURES],
    pub std: [f64; RADAR_FEATURES],
}

impl FeatureStats {
    pub const IDENTITY: FeatureStats = FeatureStats { mean: [0.0; RADAR_FEATURES], std: [1.0; RADAR_FEATURES] };

    /// Population mean / std over `points`. Degenerate features get std 1.
    pub fn from_points(points: &[RadarPoint]) -> Self {
        if points.is_empty() {
            return Self::IDENTITY;
        }
        let n = points.len() as f64;
        let mut mean = [0.0; RADAR_FEATURES];
        for p in points {
            for (m, f) in mean.iter_mut().zip(p.features()) {
                *m += f;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0; RADAR_FEATURES];
        for p in points {
            for ((v, f), m) in var.iter_mut().zip(p.features()).zip(mean) {
                *v += (f - m) * (f - m);
            }
        }
        let std = var.map(|v| {
            let s = (v / n).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        });
        Self { mean, std }
    }

    fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| !(*s > 0.0)) {
            bail!(InvalidInput, "normalization std entries must be positive");
        }
        Ok(())
    }

    pub fn normalize(&self, raw: [f64; RADAR_FEATURES]) -> [f64; RADAR_FEATURES] {
        let mut out = [0.0; RADAR_FEATURES];
        for i in 0..RADAR_FEATURES {
            out[i] = (raw[i] - self.mean[i]) / self.std[i];
        }
        out
    }
}

/// A network-ready radar point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreparedPoint {
    pub position: Vec3,
    pub features: [f64; RADAR_FEATURES],
    /// False only for the zero sentinel emitted when no point survives filtering.
    pub valid: bool,
    /// Index of the originating point in the filtered input.
    pub source: usize,
    /// False for the extra copies introduced by duplication.
    pub first_copy: bool,
}

/// Range-filters, resamples to exactly `k_max` points and z-scores the features.
///
/// With more candidates than `k_max` a seeded subset of distinct points is
/// kept (in input order); with fewer, every point is kept once and random
/// duplicates are appended.
pub fn prepare_radar_input(
    points: &[RadarPoint],
    max_range: f64,
    k_max: usize,
    stats: &FeatureStats,
    rng_seed: u64,
) -> Result<Vec<PreparedPoint>> {
    if k_max == 0 {
        bail!(InvalidInput, "k_max must be positive");
    }
    stats.validate()?;
    let kept: Vec<&RadarPoint> = points
        .iter()
        .filter(|p| p.position.is_finite() && p.position.bev_norm() <= max_range)
        .collect();
    if kept.is_empty() {
        let sentinel = PreparedPoint {
            position: Vec3::ZERO,
            features: [0.0; RADAR_FEATURES],
            valid: false,
            source: 0,
            first_copy: true,
        };
        return Ok(alloc::vec![sentinel; k_max]);
    }
    let mut rng = crate::seeded_rng(rng_seed);
    let chosen: Vec<(usize, bool)> = if kept.len() >= k_max {
        let mut idx = index::sample(&mut rng, kept.len(), k_max).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| (i, true)).collect()
    } else {
        let mut idx: Vec<(usize, bool)> = (0..kept.len()).map(|i| (i, true)).collect();
        for _ in kept.len()..k_max {
            idx.push((rng.random_range(0..kept.len()), false));
        }
        idx
    };
    Ok(chosen
        .into_iter()
        .map(|(i, first_copy)| PreparedPoint {
            position: kept[i].position,
            features: stats.normalize(kept[i].features()),
            valid: true,
            source: i,
            first_copy,
        })
        .collect())
}
