//! Class-specific detection heads and box decoding.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods shadow it when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::geometry::{cart_to_polar, polar_to_cart, BBox3D, PolarPoint, Vec3};
use crate::tensor::nn::{Linear, Mlp};
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::SeededRng;

use super::{CoordMode, FusionConfig, ImageProposal, HEAD_OUTPUTS};

/// Activated head outputs for one proposal. Offsets are metric: `(Δr m, Δφ rad)`
/// in polar mode, `(Δx m, Δy m)` in Cartesian mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionOutput {
    pub fusion_score: f64,
    pub offset: [f64; 2],
    pub centerness: f64,
    pub speed: f64,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl FusionOutput {
    /// Activates one raw row `[score logit, o1, o2, center-ness logit, speed]`.
    pub fn from_raw(raw: &[f64], cfg: &FusionConfig) -> Self {
        let s = match cfg.coords {
            CoordMode::Polar => cfg.offset_scale,
            CoordMode::Cartesian => [cfg.offset_scale[0]; 2],
        };
        Self {
            fusion_score: sigmoid(raw[0]),
            offset: [raw[1] * s[0], raw[2] * s[1]],
            centerness: sigmoid(raw[3]),
            speed: raw[4],
        }
    }

    pub fn from_raw_rows(raw: &Tensor, cfg: &FusionConfig) -> Vec<Self> {
        raw.data().chunks(HEAD_OUTPUTS).map(|r| Self::from_raw(r, cfg)).collect()
    }
}

/// Shared two-layer MLP followed by one zero-initialized linear per class.
pub struct DetectionHeads {
    shared: Mlp,
    out: Linear,
    num_classes: usize,
}

impl DetectionHeads {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &FusionConfig, rng: &mut SeededRng) -> Self {
        let hidden = cfg.mlp_hidden;
        Self {
            shared: Mlp::new(store, &format!("{name}.shared"), cfg.width, hidden, hidden, rng),
            out: Linear::zeros(store, &format!("{name}.out"), hidden, cfg.num_classes * HEAD_OUTPUTS, true),
            num_classes: cfg.num_classes,
        }
    }

    /// Raw outputs `[m, 5]`, row `i` from the head of `class_ids[i]`.
    pub fn forward(&self, g: &mut Graph, x: Var, class_ids: &[usize]) -> Result<Var> {
        if let Some(c) = class_ids.iter().find(|&&c| c >= self.num_classes) {
            bail!(Config, "class {c} has no head ({} classes)", self.num_classes);
        }
        let h = self.shared.forward(g, x)?;
        let h = g.relu(h);
        let y = self.out.forward(g, h)?;
        g.select_group(y, class_ids, HEAD_OUTPUTS)
    }
}

/// A decoded box with its final score.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub bbox: BBox3D,
    pub score: f64,
    /// True when the fusion refinement was applied.
    pub fused: bool,
}

/// Refines the proposal when the fusion score clears `threshold`; otherwise
/// returns the proposal box untouched, scored by its localization probability.
pub fn decode_and_score(proposal: &ImageProposal, out: &FusionOutput, threshold: f64, coords: CoordMode) -> Decoded {
    let p3d = proposal.p3d();
    if out.fusion_score < threshold {
        return Decoded { bbox: proposal.bbox, score: p3d, fused: false };
    }
    let mut bbox = proposal.bbox;
    bbox.center = match coords {
        CoordMode::Polar => {
            let c = cart_to_polar(bbox.center);
            polar_to_cart(PolarPoint { r: c.r + out.offset[0], phi: c.phi + out.offset[1], z: c.z })
        }
        CoordMode::Cartesian => bbox.center + Vec3::new(out.offset[0], out.offset[1], 0.0),
    };
    let (s, c) = bbox.yaw.sin_cos();
    bbox.velocity = [out.speed * c, out.speed * s];
    let score = (p3d * out.fusion_score * out.centerness).max(0.0).cbrt();
    Decoded { bbox, score, fused: true }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::angle_diff;
    use crate::seeded_rng;
    use core::f64::consts::{FRAC_PI_2, LN_2};

    fn proposal(center: Vec3, yaw: f64, var: f64, conf: f64) -> ImageProposal {
        let b = BBox3D::new(center, [1.9, 4.5, 1.6], yaw, [1.0, -2.0]).unwrap();
        ImageProposal { class_conf: conf, ..ImageProposal::for_box(b, var) }
    }

    #[test]
    fn zero_init_heads_give_neutral_outputs() {
        let cfg = FusionConfig { width: 8, heads: 2, mlp_hidden: 6, ..FusionConfig::desk() };
        let mut store = ParamStore::new();
        let heads = DetectionHeads::new(&mut store, "h", &cfg, &mut seeded_rng(1));
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::full(&[2, 8], 0.3));
        let y = heads.forward(&mut g, x, &[0, 3]).unwrap();
        for o in FusionOutput::from_raw_rows(g.value(y), &cfg) {
            assert_eq!(o, FusionOutput { fusion_score: 0.5, offset: [0.0, 0.0], centerness: 0.5, speed: 0.0 });
        }
        assert!(matches!(heads.forward(&mut g, x, &[0, 4]), Err(crate::Error::Config(_))));
    }

    #[test]
    fn classes_use_separate_heads() {
        let cfg = FusionConfig { width: 8, heads: 2, mlp_hidden: 6, ..FusionConfig::desk() };
        let mut store = ParamStore::new();
        let heads = DetectionHeads::new(&mut store, "h", &cfg, &mut seeded_rng(2));
        let n = store.value(heads.out.w).len();
        store.get_mut(heads.out.w).tensor.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64 * 0.37).sin());
        assert!(n > 0);
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::full(&[2, 8], 0.3));
        let y = heads.forward(&mut g, x, &[0, 1]).unwrap();
        assert_ne!(g.value(y).row(0), g.value(y).row(1));
    }

    #[test]
    fn decode_arithmetic() {
        let mut p = proposal(Vec3::new(10.0, 0.0, 0.5), FRAC_PI_2, 0.0, 0.8);
        assert_eq!(p.p3d(), 0.8);
        let out = FusionOutput { fusion_score: 0.5, offset: [0.0, 0.0], centerness: 0.9, speed: 5.0 };
        let d = decode_and_score(&p, &out, 0.3, CoordMode::Polar);
        assert!(d.fused);
        assert!((d.score - 0.36f64.cbrt()).abs() < 1e-12);
        assert!((d.score - 0.7114).abs() < 1e-4);
        assert!(d.bbox.velocity[0].abs() < 1e-12 && (d.bbox.velocity[1] - 5.0).abs() < 1e-12);
        p.depth_var = LN_2;
        assert!((p.depth_confidence() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gating_is_bit_identical() {
        let p = proposal(Vec3::new(23.1, -7.4, 0.9), 0.7, 1.3, 0.6);
        let out = FusionOutput { fusion_score: 0.2999, offset: [3.0, 0.1], centerness: 0.9, speed: 8.0 };
        let d = decode_and_score(&p, &out, 0.3, CoordMode::Polar);
        assert!(!d.fused);
        assert_eq!(d.bbox, p.bbox);
        assert_eq!(d.score, p.p3d());
    }

    #[test]
    fn polar_offsets_recover_target_center() {
        let mut rng = seeded_rng(3);
        use rand::Rng;
        for _ in 0..500 {
            let c = Vec3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), 0.4);
            let gt = Vec3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), 0.4);
            let (pc, pg) = (cart_to_polar(c), cart_to_polar(gt));
            let out = FusionOutput { fusion_score: 1.0, offset: [pg.r - pc.r, angle_diff(pg.phi, pc.phi)], centerness: 1.0, speed: 0.0 };
            let d = decode_and_score(&proposal(c, 0.0, 0.1, 0.9), &out, 0.3, CoordMode::Polar);
            assert!(d.bbox.center.bev_distance(gt) < 1e-9);
        }
    }
}
