//! Proposal-to-radar association.
//!
//! Soft polar association keeps a radar point for a proposal when its azimuth
//! lies strictly inside the azimuth span of the proposal's eight corners and
//! its range lies inside the corner range span widened by an
//! uncertainty-dependent slack `gamma + sigma * r_c / delta`. Two baselines
//! (points inside the proposal footprint, points within a fixed BEV radius of
//! its center) are provided for comparison, plus recall / clutter metrics.

use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::fusion::ImageProposal;
use crate::geometry::{angle_diff, cart_to_polar, BBox3D, Vec3};
use crate::radar::{PreparedPoint, RadarPoint};

/// Anything with a position that can be associated.
pub trait Located {
    fn position(&self) -> Vec3;
    fn is_valid(&self) -> bool {
        true
    }
    /// False for sampler duplicates, which association skips.
    fn is_primary(&self) -> bool {
        true
    }
}

impl Located for Vec3 {
    fn position(&self) -> Vec3 {
        *self
    }
}

impl Located for RadarPoint {
    fn position(&self) -> Vec3 {
        self.position
    }
}

impl Located for PreparedPoint {
    fn position(&self) -> Vec3 {
        self.position
    }
    fn is_valid(&self) -> bool {
        self.valid
    }
    fn is_primary(&self) -> bool {
        self.first_copy
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssociationConfig {
    /// Minimum radial slack (m).
    pub gamma: f64,
    /// Divisor modulating the uncertainty-driven slack.
    pub delta: f64,
    /// Maximum number of points kept per proposal.
    pub k_prime: usize,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self { gamma: 5.0, delta: 10.0, k_prime: 128 }
    }
}

impl AssociationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !(self.delta > 0.0) || self.k_prime == 0 {
            bail!(Config, "association needs gamma >= 0, delta > 0, k_prime >= 1 (got {self:?})");
        }
        Ok(())
    }
}

/// Per-proposal lists of radar point indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssociationSet {
    pub entries: Vec<Vec<usize>>,
}

impl AssociationSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_pairs(&self) -> usize {
        self.entries.iter().map(Vec::len).sum()
    }
}

/// Azimuth / range window derived from a proposal box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolarWindow {
    /// Center azimuth the bounds are expressed against.
    pub phi_ref: f64,
    /// Bounds as offsets from `phi_ref`; `None` means the full circle.
    pub phi_span: Option<(f64, f64)>,
    pub r_front: f64,
    pub r_back: f64,
    pub r_center: f64,
    pub slack: f64,
}

impl PolarWindow {
    pub fn new(b: &BBox3D, sigma: f64, cfg: &AssociationConfig) -> Self {
        let corners = b.corners();
        let phi_ref = cart_to_polar(b.center).phi;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut r_front = f64::INFINITY;
        let mut r_back = f64::NEG_INFINITY;
        for c in &corners {
            let p = cart_to_polar(*c);
            let d = angle_diff(p.phi, phi_ref);
            lo = lo.min(d);
            hi = hi.max(d);
            r_front = r_front.min(p.r);
            r_back = r_back.max(p.r);
        }
        let encloses_ego = b.contains_bev(Vec3::ZERO, 0.0);
        let phi_span = if encloses_ego || hi - lo > PI { None } else { Some((lo, hi)) };
        let r_center = 0.5 * (r_front + r_back);
        let slack = cfg.gamma + sigma * r_center / cfg.delta;
        Self { phi_ref, phi_span, r_front, r_back, r_center, slack }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        let pp = cart_to_polar(p);
        if !(self.r_front - self.slack < pp.r && pp.r < self.r_back + self.slack) {
            return false;
        }
        match self.phi_span {
            None => true,
            Some((lo, hi)) => {
                let d = angle_diff(pp.phi, self.phi_ref);
                lo < d && d < hi
            }
        }
    }
}

fn truncate_by_range<P: Located>(mut idx: Vec<usize>, points: &[P], r_center: f64, k_prime: usize) -> Vec<usize> {
    if idx.len() > k_prime {
        let key = |i: usize| (points[i].position().bev_norm() - r_center).abs();
        idx.sort_by(|&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)));
        idx.truncate(k_prime);
        idx.sort_unstable();
    }
    idx
}

/// Soft polar association before the `k_prime` cap.
pub fn soft_polar_candidates<P: Located>(
    proposals: &[ImageProposal],
    points: &[P],
    cfg: &AssociationConfig,
) -> Vec<Vec<usize>> {
    proposals
        .iter()
        .map(|prop| {
            let w = PolarWindow::new(&prop.bbox, prop.depth_var, cfg);
            points
                .iter()
                .enumerate()
                .filter(|(_, p)| p.is_valid() && p.is_primary() && w.contains(p.position()))
                .map(|(i, _)| i)
                .collect()
        })
        .collect()
}

/// Soft polar association, each list capped at `k_prime` points nearest the
/// proposal's center range.
pub fn soft_polar_associate<P: Located>(
    proposals: &[ImageProposal],
    points: &[P],
    cfg: &AssociationConfig,
) -> Result<AssociationSet> {
    cfg.validate()?;
    let raw = soft_polar_candidates(proposals, points, cfg);
    let entries = raw
        .into_iter()
        .zip(proposals)
        .map(|(idx, prop)| {
            let w = PolarWindow::new(&prop.bbox, prop.depth_var, cfg);
            truncate_by_range(idx, points, w.r_center, cfg.k_prime)
        })
        .collect();
    Ok(AssociationSet { entries })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssociatorKind {
    /// Soft polar association.
    Spa,
    /// Points inside the proposal's BEV footprint.
    RoiPool,
    /// Points within a fixed BEV radius of the proposal center.
    BallQuery,
}

/// RoI-footprint or ball-query association with the same capping rule as SPA.
pub fn baseline_associate<P: Located>(
    kind: AssociatorKind,
    proposals: &[ImageProposal],
    points: &[P],
    radius: f64,
    k_prime: usize,
) -> Result<AssociationSet> {
    if k_prime == 0 {
        bail!(Config, "k_prime must be positive");
    }
    if kind == AssociatorKind::BallQuery && !(radius > 0.0) {
        bail!(Config, "ball query radius must be positive");
    }
    let cfg = AssociationConfig { k_prime, ..Default::default() };
    let entries = proposals
        .iter()
        .map(|prop| {
            let b = &prop.bbox;
            let idx: Vec<usize> = points
                .iter()
                .enumerate()
                .filter(|(_, p)| p.is_valid() && p.is_primary())
                .filter(|(_, p)| match kind {
                    AssociatorKind::RoiPool => b.contains_bev(p.position(), 0.0),
                    AssociatorKind::BallQuery => p.position().bev_distance(b.center) <= radius,
                    AssociatorKind::Spa => unreachable!("handled by soft_polar_associate"),
                })
                .map(|(i, _)| i)
                .collect();
            let r_c = PolarWindow::new(b, prop.depth_var, &cfg).r_center;
            truncate_by_range(idx, points, r_c, k_prime)
        })
        .collect();
    Ok(AssociationSet { entries })
}

/// Dispatches to SPA or a baseline.
pub fn associate<P: Located>(
    kind: AssociatorKind,
    proposals: &[ImageProposal],
    points: &[P],
    cfg: &AssociationConfig,
    ball_radius: f64,
) -> Result<AssociationSet> {
    match kind {
        AssociatorKind::Spa => soft_polar_associate(proposals, points, cfg),
        other => baseline_associate(other, proposals, points, ball_radius, cfg.k_prime),
    }
}

/// Which proposals count in the denominator of [`association_recall_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallBasis {
    /// Matched proposals with at least one associated point.
    Associated,
    /// Every matched proposal; empty lists count as misses.
    AllMatched,
}

/// Fraction of eligible proposals whose association holds at least one point
/// inside the matched ground-truth box (grown by `margin`).
///
/// Eligible proposals have a ground-truth assignment and a non-empty list.
/// Returns `None` when nothing is eligible.
pub fn association_recall<P: Located>(
    assoc: &AssociationSet,
    points: &[P],
    gt_boxes: &[BBox3D],
    assignment: &[Option<usize>],
    margin: f64,
) -> Option<f64> {
    association_recall_with(assoc, points, gt_boxes, assignment, margin, RecallBasis::Associated)
}

pub fn association_recall_with<P: Located>(
    assoc: &AssociationSet,
    points: &[P],
    gt_boxes: &[BBox3D],
    assignment: &[Option<usize>],
    margin: f64,
    basis: RecallBasis,
) -> Option<f64> {
    let mut eligible = 0usize;
    let mut hit = 0usize;
    for (entry, gt) in assoc.entries.iter().zip(assignment) {
        let Some(g) = gt else { continue };
        if entry.is_empty() && basis == RecallBasis::Associated {
            continue;
        }
        eligible += 1;
        if entry.iter().any(|&i| gt_boxes[*g].contains(points[i].position(), margin)) {
            hit += 1;
        }
    }
    (eligible > 0).then(|| hit as f64 / eligible as f64)
}

/// Mean over eligible proposals of the fraction of associated points lying
/// outside the matched ground-truth box.
pub fn clutter_fraction<P: Located>(
    assoc: &AssociationSet,
    points: &[P],
    gt_boxes: &[BBox3D],
    assignment: &[Option<usize>],
    margin: f64,
) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (entry, gt) in assoc.entries.iter().zip(assignment) {
        let Some(g) = gt else { continue };
        if entry.is_empty() {
            continue;
        }
        let outside = entry.iter().filter(|&&i| !gt_boxes[*g].contains(points[i].position(), margin)).count();
        sum += outside as f64 / entry.len() as f64;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}
