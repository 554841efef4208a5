//! The assembled fusion network.

use alloc::vec::Vec;
use core::ops::Range;

use crate::association::AssociationSet;
use crate::error::{bail, Result};
use crate::geometry::Vec3;
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::SeededRng;

use super::encoders::{I2rEncoder, R2iEncoder};
use super::heads::{decode_and_score, Decoded, DetectionHeads, FusionOutput};
use super::{relative_position, scaled_positions, FusionConfig, ImageProposal, HEAD_OUTPUTS};

/// Everything the network reads for one frame.
///
/// Radar-to-proposal pairs are flattened in proposal order following
/// `assoc`. Image patches exist once per distinct (point, camera) couple:
/// `patch_points[u]` is the radar point of patch `u` and `pair_patch[j]` the
/// patch used by pair `j`.
#[derive(Clone, Debug)]
pub struct FusionInput {
    pub proposals: Vec<ImageProposal>,
    /// Positions in the frame where boxes live (after any joint augmentation).
    pub positions: Vec<Vec3>,
    /// Positions seen by the point backbone.
    pub backbone_positions: Vec<Vec3>,
    /// Normalized radar features `[k, F]`.
    pub features: Tensor,
    pub assoc: AssociationSet,
    /// `[u, s, s, C_img]`.
    pub patches: Tensor,
    pub patch_points: Vec<usize>,
    pub pair_patch: Vec<usize>,
}

impl FusionInput {
    pub fn num_pairs(&self) -> usize {
        self.pair_patch.len()
    }

    fn validate(&self, cfg: &FusionConfig) -> Result<()> {
        let k = self.positions.len();
        if self.backbone_positions.len() != k || (k > 0 && self.features.rows() != k) {
            bail!(Shape, "{k} positions, {} backbone positions, {} feature rows", self.backbone_positions.len(), self.features.rows());
        }
        if self.assoc.len() != self.proposals.len() {
            bail!(Shape, "{} association lists for {} proposals", self.assoc.len(), self.proposals.len());
        }
        if self.assoc.total_pairs() != self.pair_patch.len() {
            bail!(Shape, "{} pairs with {} patch indices", self.assoc.total_pairs(), self.pair_patch.len());
        }
        let u = self.patch_points.len();
        let s = cfg.patch.out_size;
        if u > 0 && self.patches.shape() != [u, s, s, cfg.image_channels] {
            bail!(Shape, "patches {:?} for {u} patches of {s}x{s}x{}", self.patches.shape(), cfg.image_channels);
        }
        if self.pair_patch.iter().any(|&p| p >= u) || self.patch_points.iter().any(|&p| p >= k) {
            bail!(Shape, "patch index out of range");
        }
        if self.assoc.entries.iter().flatten().any(|&p| p >= k) {
            bail!(Shape, "associated point out of range");
        }
        if let Some(p) = self.proposals.iter().find(|p| p.feature.len() != cfg.image_channels) {
            bail!(Shape, "proposal feature of length {} (expected {})", p.feature.len(), cfg.image_channels);
        }
        Ok(())
    }

    /// Key range of each proposal in the flattened pair list.
    pub fn segments(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.assoc
            .entries
            .iter()
            .map(|e| {
                let r = start..start + e.len();
                start = r.end;
                r
            })
            .collect()
    }
}

/// Graph nodes produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// In-box logits, one per pair: `[pairs, 1]`.
    pub in_box_logits: Var,
    /// Raw head rows `[m, 5]`.
    pub raw: Var,
}

pub struct FusionModel {
    pub cfg: FusionConfig,
    backbone: super::RadarBackbone,
    i2r: I2rEncoder,
    r2i: R2iEncoder,
    heads: DetectionHeads,
}

impl FusionModel {
    pub fn new(store: &mut ParamStore, cfg: &FusionConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let backbone = super::RadarBackbone::new(store, "backbone", &cfg.backbone, crate::radar::RADAR_FEATURES, cfg.width, rng)?;
        let i2r = I2rEncoder::new(store, "i2r", cfg, rng)?;
        let r2i = R2iEncoder::new(store, "r2i", cfg, rng)?;
        let heads = DetectionHeads::new(store, "heads", cfg, rng);
        Ok(Self { cfg: cfg.clone(), backbone, i2r, r2i, heads })
    }

    pub fn forward(&self, g: &mut Graph, input: &FusionInput) -> Result<ForwardOutput> {
        input.validate(&self.cfg)?;
        let c = self.cfg.width;
        let m = input.proposals.len();
        if m == 0 {
            let in_box_logits = g.constant(Tensor::zeros(&[0, 1]));
            let raw = g.constant(Tensor::zeros(&[0, HEAD_OUTPUTS]));
            return Ok(ForwardOutput { in_box_logits, raw });
        }
        let (pairs, in_box_logits) = if input.patch_points.is_empty() {
            (g.constant(Tensor::zeros(&[0, c])), g.constant(Tensor::zeros(&[0, 1])))
        } else {
            let feats = self.backbone.encode(g, &input.backbone_positions, &input.features, &input.patch_points)?;
            let patches = g.constant(input.patches.clone());
            let index: Vec<usize> = (0..input.patch_points.len()).collect();
            let (enc, logits) = self.i2r.forward(g, feats, patches, &index)?;
            (g.gather_rows(enc, &input.pair_patch)?, g.gather_rows(logits, &input.pair_patch)?)
        };

        let mut rel = Vec::with_capacity(input.num_pairs());
        for (p, pts) in input.proposals.iter().zip(&input.assoc.entries) {
            rel.extend(pts.iter().map(|&k| relative_position(input.positions[k], p.bbox.center, self.cfg.coords)));
        }
        let rel = Tensor::new(&[rel.len(), 2], scaled_positions(&rel, &self.cfg))?;
        let rows: Vec<&[f64]> = input.proposals.iter().map(|p| p.feature.as_slice()).collect();
        let props = g.constant(Tensor::from_rows(&rows, self.cfg.image_channels)?);
        let refined = self.r2i.forward(g, props, pairs, &rel, &input.segments())?;
        let classes: Vec<usize> = input.proposals.iter().map(|p| p.class_id).collect();
        let raw = self.heads.forward(g, refined, &classes)?;
        Ok(ForwardOutput { in_box_logits, raw })
    }

    /// Head outputs and decoded boxes; proposals without associated radar
    /// pass through unchanged.
    pub fn predict(&self, store: &ParamStore, input: &FusionInput) -> Result<Vec<(Decoded, FusionOutput)>> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, input)?;
        let outs = FusionOutput::from_raw_rows(g.value(out.raw), &self.cfg);
        Ok(input
            .proposals
            .iter()
            .zip(&input.assoc.entries)
            .zip(outs)
            .map(|((p, pts), o)| {
                let d = if pts.is_empty() {
                    Decoded { bbox: p.bbox, score: p.p3d(), fused: false }
                } else {
                    decode_and_score(p, &o, self.cfg.fusion_threshold, self.cfg.coords)
                };
                (d, o)
            })
            .collect())
    }
}
