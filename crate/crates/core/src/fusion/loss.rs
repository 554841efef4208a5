//! Training targets and the fusion loss.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods shadow it when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::association::AssociationSet;
use crate::error::{bail, Result};
use crate::geometry::{BBox3D, Vec3};
use crate::tensor::{Graph, Tensor, Var};

use super::{relative_position, CoordMode, FusionConfig, ImageProposal, HEAD_OUTPUTS};

/// Supervision for one frame, aligned with proposals and with the flattened
/// (proposal, point) pairs of an [`AssociationSet`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTargets {
    /// At least one associated point lies inside the matched ground truth.
    pub has_valid_radar: Vec<bool>,
    /// One label per associated pair, in association order.
    pub in_box: Vec<bool>,
    /// Metric offsets from proposal center to ground-truth center.
    pub offset: Vec<[f64; 2]>,
    pub centerness: Vec<f64>,
    /// Ground-truth velocity projected on the proposal heading.
    pub speed: Vec<f64>,
}

/// Center-ness of `p` inside `gt`: the cube root of the product of the
/// min/max distance ratios to opposite faces, and 0 outside the box.
pub fn centerness_target(gt: &BBox3D, p: Vec3) -> f64 {
    let l = gt.to_local(p);
    let half = [0.5 * gt.length(), 0.5 * gt.width(), 0.5 * gt.height()];
    let mut prod = 1.0;
    for (d, h) in [l.x, l.y, l.z].into_iter().zip(half) {
        let (a, b) = (h - d, h + d);
        if a <= 0.0 || b <= 0.0 {
            return 0.0;
        }
        prod *= a.min(b) / a.max(b);
    }
    prod.cbrt().clamp(0.0, 1.0)
}

/// Builds targets. `assignment[m]` is the ground truth proposal `m` was
/// generated from (or `None` for a false proposal); associated points count
/// as in-box when inside that box's footprint widened by `margin`.
pub fn build_targets(
    proposals: &[ImageProposal],
    positions: &[Vec3],
    assoc: &AssociationSet,
    gt_boxes: &[BBox3D],
    assignment: &[Option<usize>],
    coords: CoordMode,
    margin: f64,
) -> Result<TrainingTargets> {
    if assoc.len() != proposals.len() || assignment.len() != proposals.len() {
        bail!(Shape, "{} proposals, {} association lists, {} assignments", proposals.len(), assoc.len(), assignment.len());
    }
    let mut t = TrainingTargets::default();
    for ((p, pts), gi) in proposals.iter().zip(&assoc.entries).zip(assignment) {
        let gt = match gi {
            Some(i) => Some(gt_boxes.get(*i).ok_or_else(|| crate::Error::Shape(alloc::format!("ground truth {i} missing")))?),
            None => None,
        };
        let mut any = false;
        for &k in pts {
            let pos = *positions.get(k).ok_or_else(|| crate::Error::Shape(alloc::format!("point {k} missing")))?;
            let inside = gt.is_some_and(|b| b.contains_bev(pos, margin));
            any |= inside;
            t.in_box.push(inside);
        }
        t.has_valid_radar.push(any);
        match gt {
            Some(b) => {
                t.offset.push(relative_position(b.center, p.bbox.center, coords));
                t.centerness.push(centerness_target(b, p.bbox.center));
                let (s, c) = p.bbox.yaw.sin_cos();
                t.speed.push(b.velocity[0] * c + b.velocity[1] * s);
            }
            None => {
                t.offset.push([0.0; 2]);
                t.centerness.push(0.0);
                t.speed.push(0.0);
            }
        }
    }
    Ok(t)
}

/// Per-term loss values of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub in_box: f64,
    pub fusion: f64,
    pub centerness: f64,
    pub offset: f64,
    pub speed: f64,
    pub total: f64,
}

/// Point BCE averaged over pairs plus, averaged over proposals, the fusion
/// score BCE and, for proposals with valid radar, center-ness BCE and L1 on
/// offsets (in regression units) and speed. `in_box_logits` has one entry per
/// pair, `raw` is `[m, 5]` head output.
pub fn compute_losses(g: &mut Graph, in_box_logits: Var, raw: Var, targets: &TrainingTargets, cfg: &FusionConfig) -> Result<(Var, LossBreakdown)> {
    let m = targets.has_valid_radar.len();
    let pairs = targets.in_box.len();
    if g.value(raw).shape() != [m, HEAD_OUTPUTS] || g.value(in_box_logits).len() != pairs {
        bail!(Shape, "loss inputs {:?} / {} for {m} proposals and {pairs} pairs", g.value(raw).shape(), g.value(in_box_logits).len());
    }
    let mut terms = Vec::new();
    let mut br = LossBreakdown::default();
    if pairs > 0 {
        let y: Vec<f64> = targets.in_box.iter().map(|&b| f64::from(u8::from(b))).collect();
        let t = g.bce_with_logits(in_box_logits, &y, &vec![1.0 / pairs as f64; pairs])?;
        br.in_box = g.value(t).item();
        terms.push(t);
    }
    if m > 0 {
        let inv = 1.0 / m as f64;
        let gate: Vec<f64> = targets.has_valid_radar.iter().map(|&b| if b { inv } else { 0.0 }).collect();
        let fs_t: Vec<f64> = targets.has_valid_radar.iter().map(|&b| f64::from(u8::from(b))).collect();
        let scale = match cfg.coords {
            CoordMode::Polar => cfg.offset_scale,
            CoordMode::Cartesian => [cfg.offset_scale[0]; 2],
        };
        let off_t: Vec<f64> = targets.offset.iter().flat_map(|o| [o[0] / scale[0], o[1] / scale[1]]).collect();
        let off_w: Vec<f64> = gate.iter().flat_map(|w| [*w, *w]).collect();

        let fs = g.slice_cols(raw, 0..1)?;
        let off = g.slice_cols(raw, 1..3)?;
        let cn = g.slice_cols(raw, 3..4)?;
        let sp = g.slice_cols(raw, 4..5)?;
        let f = g.bce_with_logits(fs, &fs_t, &vec![inv; m])?;
        let c = g.bce_with_logits(cn, &targets.centerness, &gate)?;
        let o = g.l1(off, &off_t, &off_w)?;
        let s = g.l1(sp, &targets.speed, &gate)?;
        br.fusion = g.value(f).item();
        br.centerness = g.value(c).item();
        br.offset = g.value(o).item();
        br.speed = g.value(s).item();
        terms.extend([f, c, o, s]);
    }
    let mut total = match terms.first() {
        Some(t) => *t,
        None => g.constant(Tensor::scalar(0.0)),
    };
    for t in terms.iter().skip(1) {
        total = g.add(total, *t)?;
    }
    br.total = g.value(total).item();
    Ok((total, br))
}
