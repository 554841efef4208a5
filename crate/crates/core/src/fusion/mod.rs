//! Proposal-level camera-radar fusion network.
//!
//! Radar points are encoded by a set-abstraction backbone, enriched with
//! image context by deformable attention over per-point image patches
//! ([`encoders::I2rEncoder`]), and then attended to by each image proposal
//! ([`encoders::R2iEncoder`]). Class-specific heads predict a fusion score,
//! center offsets, a center-ness score and the object speed, which
//! [`heads::decode_and_score`] turns into a refined box.

pub mod backbone;
pub mod encoders;
pub mod heads;
pub mod loss;
pub mod model;
pub mod patch;
pub mod selfcheck;

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods shadow it when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::geometry::BBox3D;

pub use backbone::{BackboneConfig, RadarBackbone, SaStage};
pub use heads::{decode_and_score, Decoded, DetectionHeads, FusionOutput};
pub use loss::{build_targets, compute_losses, LossBreakdown, TrainingTargets};
pub use model::{ForwardOutput, FusionInput, FusionModel};
pub use patch::{adaptive_patch_size, adaptive_patch_size_raw, extract_patch, extract_patch_window, pixel_to_feature, PatchConfig};

/// A camera 3D detection handed to the fusion stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageProposal {
    pub bbox: BBox3D,
    /// Predicted depth variance (m²).
    pub depth_var: f64,
    /// Class confidence `p_k`.
    pub class_conf: f64,
    pub class_id: usize,
    /// Image feature sampled at the keypoint.
    pub feature: Vec<f64>,
    /// Projected center in image pixels.
    pub keypoint: [f64; 2],
    pub camera_id: usize,
}

impl ImageProposal {
    /// A proposal carrying only geometry, with full confidence and no feature.
    pub fn for_box(bbox: BBox3D, depth_var: f64) -> Self {
        Self { bbox, depth_var, class_conf: 1.0, class_id: 0, feature: Vec::new(), keypoint: [0.0; 2], camera_id: 0 }
    }

    /// Depth confidence `exp(-σ²)`.
    pub fn depth_confidence(&self) -> f64 {
        (-self.depth_var).exp()
    }

    /// Localization probability `exp(-σ²) · p_k`.
    pub fn p3d(&self) -> f64 {
        self.depth_confidence() * self.class_conf
    }
}

/// Frame in which offsets are regressed and relative positions embedded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordMode {
    /// Range / azimuth about the ego origin.
    #[default]
    Polar,
    /// Vehicle-frame x / y.
    Cartesian,
}

/// Architecture and decoding hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Fused feature width C.
    pub width: usize,
    pub heads: usize,
    pub i2r_layers: usize,
    pub r2i_layers: usize,
    /// Hidden width of every two-layer MLP.
    pub mlp_hidden: usize,
    /// Deformable sampling points per head.
    pub sampling_points: usize,
    /// Channels of the camera feature maps and proposal features.
    pub image_channels: usize,
    pub num_classes: usize,
    pub patch: PatchConfig,
    pub backbone: BackboneConfig,
    pub coords: CoordMode,
    /// Appends the all-zero key/value to every radar-to-image attention.
    pub zero_sink: bool,
    pub fusion_threshold: f64,
    /// Offset units: the heads regress `(Δr / offset_scale[0], Δφ / offset_scale[1])`
    /// in polar mode and `(Δx, Δy) / offset_scale[0]` in Cartesian mode.
    pub offset_scale: [f64; 2],
    /// Relative positions are divided by these before the embedding MLP:
    /// `(Δr, Δφ)` in polar mode, `(Δx, Δy)` by the first entry in Cartesian mode.
    pub position_scale: [f64; 2],
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            width: 64,
            heads: 8,
            i2r_layers: 4,
            r2i_layers: 4,
            mlp_hidden: 256,
            sampling_points: 4,
            image_channels: 64,
            num_classes: crate::simulator::NUM_CLASSES,
            patch: PatchConfig::default(),
            backbone: BackboneConfig::default(),
            coords: CoordMode::Polar,
            zero_sink: true,
            fusion_threshold: 0.3,
            offset_scale: [1.0, 0.01],
            position_scale: [5.0, 0.05],
        }
    }
}

impl FusionConfig {
    /// Reduced widths and depths that train in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            width: 32,
            heads: 4,
            i2r_layers: 2,
            r2i_layers: 2,
            mlp_hidden: 64,
            sampling_points: 4,
            image_channels: 16,
            backbone: BackboneConfig::desk(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            bail!(Config, "fusion width {} must be a positive multiple of heads {}", self.width, self.heads);
        }
        if self.mlp_hidden == 0 || self.sampling_points == 0 || self.image_channels == 0 || self.num_classes == 0 {
            bail!(Config, "fusion sizes must be positive");
        }
        if !(0.0..=1.0).contains(&self.fusion_threshold) {
            bail!(Config, "fusion threshold must lie in [0, 1]");
        }
        if self.offset_scale.iter().chain(&self.position_scale).any(|s| !(*s > 0.0)) {
            bail!(Config, "offset and position scales must be positive");
        }
        self.patch.validate()?;
        self.backbone.validate()
    }
}

/// Number of raw head outputs per proposal: score logit, two offsets,
/// center-ness logit, speed.
pub const HEAD_OUTPUTS: usize = 5;

/// Relative position of `p` with respect to `center` in the embedding frame,
/// before scaling.
pub fn relative_position(p: crate::geometry::Vec3, center: crate::geometry::Vec3, coords: CoordMode) -> [f64; 2] {
    use crate::geometry::{angle_diff, cart_to_polar};
    match coords {
        CoordMode::Polar => {
            let a = cart_to_polar(p);
            let c = cart_to_polar(center);
            [a.r - c.r, angle_diff(a.phi, c.phi)]
        }
        CoordMode::Cartesian => [p.x - center.x, p.y - center.y],
    }
}

/// Rows of `(Δ₁, Δ₂)` scaled for the positional embedding.
pub(crate) fn scaled_positions(rel: &[[f64; 2]], cfg: &FusionConfig) -> Vec<f64> {
    let s = match cfg.coords {
        CoordMode::Polar => cfg.position_scale,
        CoordMode::Cartesian => [cfg.position_scale[0]; 2],
    };
    let mut out = vec![0.0; rel.len() * 2];
    for (o, r) in out.chunks_mut(2).zip(rel) {
        o[0] = r[0] / s[0];
        o[1] = r[1] / s[1];
    }
    out
}
