//! Per-frame glue from simulated sensor data to network input, losses and
//! detections, plus the training loop and the evaluation driver.

use alloc::borrow::Cow;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)] // inherent float methods shadow it when std is linked
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::association::{associate, association_recall_with, clutter_fraction, AssociationConfig, AssociationSet, AssociatorKind, RecallBasis};
use crate::error::{bail, Error, Result};
use crate::eval::{evaluate, nms_bev, points_on_objects, Detection, DetectionSource, EvalConfig, EvalFrame, MetricsReport};
use crate::fusion::{
    adaptive_patch_size, build_targets, compute_losses, extract_patch_window, pixel_to_feature, FusionConfig, FusionInput, FusionModel,
    ImageProposal, LossBreakdown, TrainingTargets,
};
use crate::geometry::{wrap_angle, BBox3D, Pose, Vec3};
use crate::radar::{accumulate_sweeps, prepare_radar_input, FeatureStats, PreparedPoint, RadarPoint, RADAR_FEATURES};
use crate::simulator::{frame_seed, simulate_frame, Frame, GtObject, SimConfig};
use crate::tensor::optim::{cosine_lr, optimizer_step, AdamWConfig, AdamWState};
use crate::tensor::{Graph, ParamStore, Tensor};
use crate::{derive_seed, seeded_rng, SeededRng};

/// Training-time augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Joint rotation of radar points, proposals and ground truth about the
    /// ego z axis, uniform in `±rotation` (rad).
    pub rotation: f64,
    /// Probability of a joint mirror across the x axis.
    pub flip_prob: f64,
    /// Standard deviation of a joint BEV translation (m).
    pub translation_std: f64,
    /// Rotation (rad) applied only to the positions seen by the radar backbone.
    pub radar_rotation: f64,
    /// Per-point jitter (m) applied only to the backbone positions.
    pub radar_jitter: f64,
    /// Sweep count is drawn uniformly from `min_sweeps..=n_sweeps`.
    pub min_sweeps: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { enabled: true, rotation: PI / 4.0, flip_prob: 0.5, translation_std: 0.0, radar_rotation: 0.05, radar_jitter: 0.05, min_sweeps: 3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Sweeps accumulated at inference.
    pub n_sweeps: usize,
    /// Radar points fed to the network per frame.
    pub max_points: usize,
    pub max_range: f64,
    pub associator: AssociatorKind,
    pub association: AssociationConfig,
    pub ball_radius: f64,
    /// Footprint margin for in-box labels and association metrics (m).
    pub label_margin: f64,
    /// Image pixels per feature-map cell.
    pub feature_stride: usize,
    /// Image width at which the adaptive patch size is expressed in map
    /// cells; narrower images shrink the window proportionally.
    pub patch_reference_width: f64,
    pub augment: AugmentConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_sweeps: 6,
            max_points: 256,
            max_range: 60.0,
            associator: AssociatorKind::Spa,
            association: AssociationConfig::default(),
            ball_radius: 6.0,
            label_margin: 0.5,
            feature_stride: 4,
            patch_reference_width: 1600.0,
            augment: AugmentConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_sweeps == 0 || self.max_points == 0 || self.feature_stride == 0 {
            bail!(Config, "n_sweeps, max_points and feature_stride must be positive");
        }
        if !(self.max_range > 0.0) || !(self.ball_radius > 0.0) || !(self.label_margin >= 0.0) || !(self.patch_reference_width > 0.0) {
            bail!(Config, "pipeline ranges and widths must be positive");
        }
        let a = &self.augment;
        if !(a.rotation >= 0.0) || !(0.0..=1.0).contains(&a.flip_prob) || !(a.translation_std >= 0.0) || !(a.radar_rotation >= 0.0) || !(a.radar_jitter >= 0.0) {
            bail!(Config, "invalid augmentation settings {a:?}");
        }
        self.association.validate()
    }
}

/// Mirror across the x axis (optional), then rotation, then translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BevTransform {
    pub flip: bool,
    pub angle: f64,
    pub shift: [f64; 2],
}

impl BevTransform {
    pub const IDENTITY: BevTransform = BevTransform { flip: false, angle: 0.0, shift: [0.0; 2] };

    pub fn vector(&self, v: [f64; 2]) -> [f64; 2] {
        let y = if self.flip { -v[1] } else { v[1] };
        let (s, c) = self.angle.sin_cos();
        [c * v[0] - s * y, s * v[0] + c * y]
    }

    pub fn point(&self, p: Vec3) -> Vec3 {
        let v = self.vector([p.x, p.y]);
        Vec3::new(v[0] + self.shift[0], v[1] + self.shift[1], p.z)
    }

    pub fn yaw(&self, yaw: f64) -> f64 {
        wrap_angle(if self.flip { -yaw } else { yaw } + self.angle)
    }

    pub fn bbox(&self, b: &BBox3D) -> BBox3D {
        BBox3D { center: self.point(b.center), yaw: self.yaw(b.yaw), velocity: self.vector(b.velocity), ..*b }
    }
}

/// Network input for one frame with the matching supervision data.
#[derive(Clone, Debug)]
pub struct PreparedFrame {
    pub input: FusionInput,
    /// Ground truth in the (possibly augmented) frame of `input`.
    pub gt: Vec<GtObject>,
    pub proposal_gt: Vec<Option<usize>>,
    /// Accumulated radar points before filtering and augmentation.
    pub raw_points: Vec<RadarPoint>,
    pub transform: BevTransform,
}

impl PreparedFrame {
    pub fn targets(&self, fcfg: &FusionConfig, margin: f64) -> Result<TrainingTargets> {
        let boxes: Vec<BBox3D> = self.gt.iter().map(|g| g.bbox).collect();
        build_targets(&self.input.proposals, &self.input.positions, &self.input.assoc, &boxes, &self.proposal_gt, fcfg.coords, margin)
    }
}

/// Radar points of all requested sweeps in the newest sweep's frame.
pub fn accumulated_points(frame: &Frame, n_sweeps: usize) -> Result<Vec<RadarPoint>> {
    if frame.sweeps.is_empty() {
        return Ok(Vec::new());
    }
    let reference = frame.sweeps[0].ego_pose.unwrap_or(Pose::IDENTITY);
    accumulate_sweeps(&frame.sweeps, &reference, n_sweeps.min(frame.sweeps.len()))
}

fn normal(rng: &mut SeededRng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("positive sigma").sample(rng)
    } else {
        0.0
    }
}

/// Builds the fusion input of `frame`. `seed` drives point resampling and,
/// when `augment` is set (and enabled in the config), the augmentation.
pub fn prepare_frame(
    frame: &Frame,
    pcfg: &PipelineConfig,
    fcfg: &FusionConfig,
    stats: &FeatureStats,
    seed: u64,
    augment: bool,
) -> Result<PreparedFrame> {
    pcfg.validate()?;
    if frame.proposal_gt.len() != frame.proposals.len() {
        bail!(Shape, "{} proposal assignments for {} proposals", frame.proposal_gt.len(), frame.proposals.len());
    }
    let aug = &pcfg.augment;
    let augment = augment && aug.enabled;
    let mut rng = seeded_rng(derive_seed(seed, 11));

    let n_sweeps = if augment && aug.min_sweeps < pcfg.n_sweeps {
        rng.random_range(aug.min_sweeps.max(1)..=pcfg.n_sweeps)
    } else {
        pcfg.n_sweeps
    };
    let raw_points = accumulated_points(frame, pcfg.n_sweeps)?;
    let used = if n_sweeps == pcfg.n_sweeps { Cow::Borrowed(&raw_points) } else { Cow::Owned(accumulated_points(frame, n_sweeps)?) };
    let points = prepare_radar_input(&used, pcfg.max_range, pcfg.max_points, stats, derive_seed(seed, 12))?;

    let transform = if augment {
        BevTransform {
            flip: rng.random_bool(aug.flip_prob),
            angle: if aug.rotation > 0.0 { rng.random_range(-aug.rotation..=aug.rotation) } else { 0.0 },
            shift: [normal(&mut rng, aug.translation_std), normal(&mut rng, aug.translation_std)],
        }
    } else {
        BevTransform::IDENTITY
    };
    let backbone_positions: Vec<Vec3> = if augment {
        let spin = BevTransform {
            flip: false,
            angle: if aug.radar_rotation > 0.0 { rng.random_range(-aug.radar_rotation..=aug.radar_rotation) } else { 0.0 },
            shift: [0.0; 2],
        };
        points
            .iter()
            .map(|p| {
                let q = spin.point(p.position);
                Vec3::new(q.x + normal(&mut rng, aug.radar_jitter), q.y + normal(&mut rng, aug.radar_jitter), q.z)
            })
            .collect()
    } else {
        points.iter().map(|p| p.position).collect()
    };

    let moved: Vec<PreparedPoint> = points.iter().map(|p| PreparedPoint { position: transform.point(p.position), ..*p }).collect();
    let proposals: Vec<ImageProposal> = frame.proposals.iter().map(|p| ImageProposal { bbox: transform.bbox(&p.bbox), ..p.clone() }).collect();
    let gt: Vec<GtObject> = frame.scene.objects.iter().map(|o| GtObject { bbox: transform.bbox(&o.bbox), class_id: o.class_id }).collect();
    let assoc = associate(pcfg.associator, &proposals, &moved, &pcfg.association, pcfg.ball_radius)?;

    let (patches, patch_points, pair_patch) = build_patches(frame, &points, &assoc, pcfg, fcfg)?;
    let mut feats = Vec::with_capacity(points.len() * RADAR_FEATURES);
    for p in &points {
        feats.extend_from_slice(&p.features);
    }
    let features = Tensor::new(&[points.len(), RADAR_FEATURES], feats)?;
    let input = FusionInput {
        proposals,
        positions: moved.iter().map(|p| p.position).collect(),
        backbone_positions,
        features,
        assoc,
        patches,
        patch_points,
        pair_patch,
    };
    Ok(PreparedFrame { input, gt, proposal_gt: frame.proposal_gt.clone(), raw_points, transform })
}

/// One image patch per distinct (point, camera) couple among the associated
/// pairs, cut from the camera's feature map around the projected point with
/// a range-adaptive window. Points that do not project get a zero patch.
fn build_patches(
    frame: &Frame,
    points: &[PreparedPoint],
    assoc: &AssociationSet,
    pcfg: &PipelineConfig,
    fcfg: &FusionConfig,
) -> Result<(Tensor, Vec<usize>, Vec<usize>)> {
    let s = fcfg.patch.out_size;
    let c = fcfg.image_channels;
    let mut slots: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut patch_points = Vec::new();
    let mut pair_patch = Vec::with_capacity(assoc.total_pairs());
    let mut data = Vec::new();
    for (prop, pts) in frame.proposals.iter().zip(&assoc.entries) {
        let cam_id = prop.camera_id;
        for &k in pts {
            if let Some(&u) = slots.get(&(k, cam_id)) {
                pair_patch.push(u);
                continue;
            }
            let (Some(cam), Some(map)) = (frame.scene.cameras.get(cam_id), frame.feature_maps.get(cam_id)) else {
                bail!(Shape, "proposal refers to camera {cam_id} without a feature map");
            };
            if map.shape().len() != 3 || map.shape()[2] != c {
                bail!(Shape, "feature map {:?} does not carry {c} channels", map.shape());
            }
            let pos = points[k].position;
            let patch = match cam.project(pos) {
                Ok((px, py, _)) => {
                    let tau = adaptive_patch_size(pos.bev_norm(), &fcfg.patch);
                    let span = (tau as f64 - 1.0) * cam.width as f64 / pcfg.patch_reference_width;
                    let center = [pixel_to_feature(px, pcfg.feature_stride), pixel_to_feature(py, pcfg.feature_stride)];
                    extract_patch_window(map, center, span, s)?.into_data()
                }
                Err(_) => vec![0.0; s * s * c],
            };
            let u = patch_points.len();
            slots.insert((k, cam_id), u);
            patch_points.push(k);
            pair_patch.push(u);
            data.extend(patch);
        }
    }
    let patches = Tensor::new(&[patch_points.len(), s, s, c], data)?;
    Ok((patches, patch_points, pair_patch))
}

/// Random access to frames, so corpora need not be held in memory.
pub trait FrameProvider {
    fn len(&self) -> usize;
    fn frame(&self, index: usize) -> Result<Cow<'_, Frame>>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl FrameProvider for [Frame] {
    fn len(&self) -> usize {
        <[Frame]>::len(self)
    }
    fn frame(&self, index: usize) -> Result<Cow<'_, Frame>> {
        self.get(index).map(Cow::Borrowed).ok_or_else(|| Error::InvalidInput(format!("frame {index} out of range")))
    }
}

impl FrameProvider for Vec<Frame> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }
    fn frame(&self, index: usize) -> Result<Cow<'_, Frame>> {
        self.as_slice().frame(index)
    }
}

/// Frames regenerated on demand from a simulator configuration and seed.
#[derive(Clone, Debug)]
pub struct SimulatedCorpus {
    pub config: SimConfig,
    pub seed: u64,
    pub frames: usize,
}

impl FrameProvider for SimulatedCorpus {
    fn len(&self) -> usize {
        self.frames
    }
    fn frame(&self, index: usize) -> Result<Cow<'_, Frame>> {
        if index >= self.frames {
            bail!(InvalidInput, "frame {index} out of range");
        }
        simulate_frame(&self.config, frame_seed(self.seed, index)).map(Cow::Owned)
    }
}

/// Feature normalization from the accumulated points of up to `max_frames` frames.
pub fn feature_stats<P: FrameProvider + ?Sized>(frames: &P, pcfg: &PipelineConfig, max_frames: usize) -> Result<FeatureStats> {
    let mut pts = Vec::new();
    for i in 0..frames.len().min(max_frames) {
        let f = frames.frame(i)?;
        pts.extend(accumulated_points(&f, pcfg.n_sweeps)?.into_iter().filter(|p| p.position.bev_norm() <= pcfg.max_range));
    }
    Ok(FeatureStats::from_points(&pts))
}

/// Proposals scored by their own localization probability.
pub fn camera_only_detections(proposals: &[ImageProposal]) -> Vec<Detection> {
    proposals
        .iter()
        .map(|p| Detection { bbox: p.bbox, score: p.p3d(), class_id: p.class_id, source: DetectionSource::CameraOnly })
        .collect()
}

/// Fused detections; proposals the network does not refine keep their box
/// and score and are tagged camera-only.
pub fn fused_detections(model: &FusionModel, store: &ParamStore, input: &FusionInput) -> Result<Vec<Detection>> {
    Ok(model
        .predict(store, input)?
        .into_iter()
        .zip(&input.proposals)
        .map(|((d, _), p)| Detection {
            bbox: d.bbox,
            score: d.score,
            class_id: p.class_id,
            source: if d.fused { DetectionSource::Fused } else { DetectionSource::CameraOnly },
        })
        .collect())
}

/// Detections of one frame after NMS together with its ground truth and
/// on-object point counts. `model = None` runs the camera-only path.
pub fn evaluate_frame(
    model: Option<(&FusionModel, &ParamStore)>,
    frame: &Frame,
    pcfg: &PipelineConfig,
    stats: &FeatureStats,
    ecfg: &EvalConfig,
    seed: u64,
) -> Result<EvalFrame> {
    let dets = match model {
        Some((m, store)) => {
            let prep = prepare_frame(frame, pcfg, &m.cfg, stats, seed, false)?;
            fused_detections(m, store, &prep.input)?
        }
        None => camera_only_detections(&frame.proposals),
    };
    let points: Vec<Vec3> = accumulated_points(frame, pcfg.n_sweeps)?.iter().map(|p| p.position).collect();
    Ok(EvalFrame {
        dets: nms_bev(&dets, ecfg.nms_distance),
        gts: frame.scene.objects.clone(),
        gt_points: points_on_objects(&frame.scene.objects, &points, ecfg.point_margin),
    })
}

/// Runs [`evaluate_frame`] over every frame and aggregates the report.
pub fn run_evaluation<P: FrameProvider + ?Sized>(
    model: Option<(&FusionModel, &ParamStore)>,
    frames: &P,
    pcfg: &PipelineConfig,
    stats: &FeatureStats,
    ecfg: &EvalConfig,
    num_classes: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let mut out = Vec::with_capacity(frames.len());
    for i in 0..frames.len() {
        out.push(evaluate_frame(model, frames.frame(i)?.as_ref(), pcfg, stats, ecfg, derive_seed(seed, i as u64))?);
    }
    evaluate(&out, ecfg, num_classes)
}

/// Pooled association quality over a set of frames.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AssociationSummary {
    /// Proposals with a ground truth.
    pub matched: usize,
    /// Proposals with a ground truth and at least one associated point.
    pub eligible: usize,
    /// Recall over `eligible` proposals.
    pub recall: Option<f64>,
    /// Recall over all `matched` proposals, empty lists counting as misses.
    pub recall_all: Option<f64>,
    pub clutter_fraction: Option<f64>,
    pub mean_points: f64,
}

pub fn association_summary<P: FrameProvider + ?Sized>(frames: &P, pcfg: &PipelineConfig, kind: AssociatorKind, seed: u64) -> Result<AssociationSummary> {
    let cfg = PipelineConfig { associator: kind, ..pcfg.clone() };
    let mut eligible = 0usize;
    let mut matched = 0usize;
    let mut hits = 0.0;
    let mut hits_all = 0.0;
    let mut clutter = 0.0;
    let mut pairs = 0usize;
    let mut proposals = 0usize;
    for i in 0..frames.len() {
        let f = frames.frame(i)?;
        let raw = accumulated_points(&f, cfg.n_sweeps)?;
        let pts = prepare_radar_input(&raw, cfg.max_range, cfg.max_points, &FeatureStats::IDENTITY, derive_seed(seed, i as u64))?;
        let assoc = associate(kind, &f.proposals, &pts, &cfg.association, cfg.ball_radius)?;
        let boxes = f.scene.gt_boxes();
        let n = assoc.entries.iter().zip(&f.proposal_gt).filter(|(e, g)| g.is_some() && !e.is_empty()).count();
        let nm = f.proposal_gt.iter().filter(|g| g.is_some()).count();
        if nm > 0 {
            hits_all += association_recall_with(&assoc, &pts, &boxes, &f.proposal_gt, cfg.label_margin, RecallBasis::AllMatched).unwrap_or(0.0) * nm as f64;
        }
        matched += nm;
        if n > 0 {
            hits += association_recall_with(&assoc, &pts, &boxes, &f.proposal_gt, cfg.label_margin, RecallBasis::Associated).unwrap_or(0.0) * n as f64;
            clutter += clutter_fraction(&assoc, &pts, &boxes, &f.proposal_gt, cfg.label_margin).unwrap_or(0.0) * n as f64;
        }
        eligible += n;
        pairs += assoc.total_pairs();
        proposals += assoc.len();
    }
    Ok(AssociationSummary {
        matched,
        eligible,
        recall: (eligible > 0).then(|| hits / eligible as f64),
        recall_all: (matched > 0).then(|| hits_all / matched as f64),
        clutter_fraction: (eligible > 0).then(|| clutter / eligible as f64),
        mean_points: if proposals > 0 { pairs as f64 / proposals as f64 } else { 0.0 },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Frames whose gradients are averaged per optimizer step.
    pub frames_per_step: usize,
    pub optimizer: AdamWConfig,
    /// Frames used to estimate the radar feature normalization.
    pub stats_frames: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 6, learning_rate: 2e-3, frames_per_step: 4, optimizer: AdamWConfig::default(), stats_frames: 50 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.frames_per_step == 0 {
            bail!(Config, "training needs a positive learning rate and frames_per_step");
        }
        Ok(())
    }
}

/// Mean loss terms over the frames of one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub frames: usize,
    pub last_lr: f64,
    pub loss: LossBreakdown,
}

fn add_breakdown(acc: &mut LossBreakdown, b: &LossBreakdown) {
    acc.in_box += b.in_box;
    acc.fusion += b.fusion;
    acc.centerness += b.centerness;
    acc.offset += b.offset;
    acc.speed += b.speed;
    acc.total += b.total;
}

fn scale_breakdown(b: &mut LossBreakdown, s: f64) {
    for v in [&mut b.in_box, &mut b.fusion, &mut b.centerness, &mut b.offset, &mut b.speed, &mut b.total] {
        *v *= s;
    }
}

/// Loss and parameter gradients (added into `store`) for one prepared frame,
/// with the loss scaled by `weight` before differentiation.
pub fn accumulate_frame_gradients(model: &FusionModel, store: &mut ParamStore, prep: &PreparedFrame, margin: f64, weight: f64) -> Result<LossBreakdown> {
    let targets = prep.targets(&model.cfg, margin)?;
    let grads;
    let br;
    {
        let mut g = Graph::new(store);
        let out = model.forward(&mut g, &prep.input)?;
        let (loss, b) = compute_losses(&mut g, out.in_box_logits, out.raw, &targets, &model.cfg)?;
        br = b;
        if !br.total.is_finite() {
            return Ok(br);
        }
        let scaled = g.scale(loss, weight);
        grads = g.backward(scaled)?;
    }
    grads.accumulate_into(store);
    Ok(br)
}

/// Trains `model` in place. Frame order is reshuffled every epoch and every
/// frame is augmented with its own seed. `on_epoch` sees each summary as it
/// completes.
#[allow(clippy::too_many_arguments)]
pub fn run_training<P: FrameProvider + ?Sized>(
    model: &FusionModel,
    store: &mut ParamStore,
    frames: &P,
    pcfg: &PipelineConfig,
    tcfg: &TrainConfig,
    stats: &FeatureStats,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochSummary),
) -> Result<Vec<EpochSummary>> {
    tcfg.validate()?;
    pcfg.validate()?;
    let n = frames.len();
    let steps_per_epoch = n.div_ceil(tcfg.frames_per_step);
    let total_steps = steps_per_epoch * tcfg.epochs;
    let mut opt = AdamWState::new(store);
    let mut history = Vec::with_capacity(tcfg.epochs);
    let mut step = 0usize;
    for epoch in 0..tcfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seeded_rng(derive_seed(seed, 0x2000 + epoch as u64)));
        let mut summary = EpochSummary { epoch, ..Default::default() };
        for chunk in order.chunks(tcfg.frames_per_step) {
            store.zero_grad();
            let weight = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let frame = frames.frame(i)?;
                let fseed = derive_seed(seed, ((epoch as u64) << 32) | i as u64);
                let prep = prepare_frame(&frame, pcfg, &model.cfg, stats, fseed, true)?;
                let br = accumulate_frame_gradients(model, store, &prep, pcfg.label_margin, weight)?;
                if !br.total.is_finite() || !store.grad_norm().is_finite() {
                    return Err(Error::NonFinite(format!(
                        "epoch {epoch} step {step} frame {i}: {br:?}; {} proposals, {} radar points, {} pairs, {} objects, transform {:?}",
                        prep.input.proposals.len(),
                        prep.raw_points.len(),
                        prep.input.num_pairs(),
                        prep.gt.len(),
                        prep.transform
                    )));
                }
                add_breakdown(&mut summary.loss, &br);
                summary.frames += 1;
            }
            let lr = cosine_lr(tcfg.learning_rate, step, total_steps);
            optimizer_step(store, &mut opt, lr, &tcfg.optimizer)?;
            summary.last_lr = lr;
            summary.steps += 1;
            step += 1;
        }
        if summary.frames > 0 {
            scale_breakdown(&mut summary.loss, 1.0 / summary.frames as f64);
        }
        on_epoch(&summary);
        history.push(summary);
    }
    store.zero_grad();
    Ok(history)
}

/// Mean loss of the current parameters over `frames` without augmentation.
pub fn evaluate_loss<P: FrameProvider + ?Sized>(
    model: &FusionModel,
    store: &ParamStore,
    frames: &P,
    pcfg: &PipelineConfig,
    stats: &FeatureStats,
    seed: u64,
) -> Result<LossBreakdown> {
    let mut acc = LossBreakdown::default();
    for i in 0..frames.len() {
        let prep = prepare_frame(frames.frame(i)?.as_ref(), pcfg, &model.cfg, stats, derive_seed(seed, i as u64), false)?;
        let targets = prep.targets(&model.cfg, pcfg.label_margin)?;
        let mut g = Graph::new(store);
        let out = model.forward(&mut g, &prep.input)?;
        add_breakdown(&mut acc, &compute_losses(&mut g, out.in_box_logits, out.raw, &targets, &model.cfg)?.1);
    }
    if !frames.is_empty() {
        scale_breakdown(&mut acc, 1.0 / frames.len() as f64);
    }
    Ok(acc)
}

/// Radial and azimuthal BEV localization error of one detection against the
/// ground truth it came from: `(|Δr| in m, |Δφ| · r in m)`.
pub fn polar_errors(pred: &BBox3D, gt: &BBox3D) -> (f64, f64) {
    let a = crate::geometry::cart_to_polar(pred.center);
    let b = crate::geometry::cart_to_polar(gt.center);
    ((a.r - b.r).abs(), crate::geometry::angle_diff(a.phi, b.phi).abs() * b.r)
}

/// Median radial and azimuthal errors of the final boxes of every proposal
/// generated from a ground truth, next to the same medians for the camera
/// boxes alone and for the subset the network refined.
pub fn localization_errors<P: FrameProvider + ?Sized>(
    model: &FusionModel,
    store: &ParamStore,
    frames: &P,
    pcfg: &PipelineConfig,
    stats: &FeatureStats,
    seed: u64,
) -> Result<LocalizationSummary> {
    let mut fin = (Vec::new(), Vec::new());
    let mut cam = (Vec::new(), Vec::new());
    let mut refined = (Vec::new(), Vec::new());
    for i in 0..frames.len() {
        let f = frames.frame(i)?;
        let prep = prepare_frame(&f, pcfg, &model.cfg, stats, derive_seed(seed, i as u64), false)?;
        for ((d, _), (p, g)) in model.predict(store, &prep.input)?.into_iter().zip(f.proposals.iter().zip(&f.proposal_gt)) {
            let Some(g) = g else { continue };
            let gt = &f.scene.objects[*g].bbox;
            let (r, a) = polar_errors(&d.bbox, gt);
            fin.0.push(r);
            fin.1.push(a);
            if d.fused {
                refined.0.push(r);
                refined.1.push(a);
            }
            let (r, a) = polar_errors(&p.bbox, gt);
            cam.0.push(r);
            cam.1.push(a);
        }
    }
    Ok(LocalizationSummary {
        proposals: fin.0.len(),
        refined: refined.0.len(),
        median_radial: median(&mut fin.0),
        median_azimuthal: median(&mut fin.1),
        camera_median_radial: median(&mut cam.0),
        camera_median_azimuthal: median(&mut cam.1),
        refined_median_radial: median(&mut refined.0),
        refined_median_azimuthal: median(&mut refined.1),
    })
}

/// Medians in metres; azimuthal errors are arc lengths at the true range.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalizationSummary {
    pub proposals: usize,
    pub refined: usize,
    pub median_radial: Option<f64>,
    pub median_azimuthal: Option<f64>,
    pub camera_median_radial: Option<f64>,
    pub camera_median_azimuthal: Option<f64>,
    pub refined_median_radial: Option<f64>,
    pub refined_median_azimuthal: Option<f64>,
}

pub fn median(xs: &mut [f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 { xs[n / 2] } else { 0.5 * (xs[n / 2 - 1] + xs[n / 2]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::simulate_frame;

    fn small_sim() -> SimConfig {
        let mut c = SimConfig::default();
        c.scene.counts = [3, 1, 1, 1];
        c
    }

    fn fusion_cfg() -> FusionConfig {
        FusionConfig { width: 8, heads: 2, i2r_layers: 1, r2i_layers: 1, mlp_hidden: 8, ..FusionConfig::desk() }
    }

    #[test]
    fn transform_is_rigid_and_consistent() {
        let t = BevTransform { flip: true, angle: 0.7, shift: [1.0, -2.0] };
        let b = BBox3D::new(Vec3::new(10.0, 3.0, 0.5), [2.0, 4.0, 1.5], 0.4, [1.0, 2.0]).unwrap();
        let tb = t.bbox(&b);
        for (c, tc) in b.corners().iter().zip(tb.corners()) {
            let m = t.point(*c);
            // Mirroring reverses corner winding, so compare as sets.
            assert!(tb.corners().iter().any(|q| q.bev_distance(m) < 1e-9 && (q.z - m.z).abs() < 1e-9), "{tc:?}");
        }
        let p = b.from_local(Vec3::new(1.0, 0.5, 0.0));
        assert!(tb.contains(t.point(p), 0.0));
        let v = t.vector(b.velocity);
        assert!(((v[0] * v[0] + v[1] * v[1]).sqrt() - 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn prepared_frame_is_consistent() {
        let sim = small_sim();
        let frame = simulate_frame(&sim, 7).unwrap();
        let pcfg = PipelineConfig::default();
        let fcfg = fusion_cfg();
        let prep = prepare_frame(&frame, &pcfg, &fcfg, &FeatureStats::IDENTITY, 3, false).unwrap();
        let inp = &prep.input;
        assert_eq!(inp.positions.len(), pcfg.max_points);
        assert_eq!(inp.pair_patch.len(), inp.assoc.total_pairs());
        assert!(inp.assoc.total_pairs() > 0);
        assert_eq!(inp.patches.shape(), [inp.patch_points.len(), fcfg.patch.out_size, fcfg.patch.out_size, fcfg.image_channels]);
        assert!(inp.patches.data().iter().any(|v| *v != 0.0));
        assert_eq!(prep.transform, BevTransform::IDENTITY);
        let again = prepare_frame(&frame, &pcfg, &fcfg, &FeatureStats::IDENTITY, 3, false).unwrap();
        assert_eq!(again.input.positions, inp.positions);
        assert_eq!(again.input.patches, inp.patches);
    }

    #[test]
    fn augmentation_moves_everything_together() {
        let frame = simulate_frame(&small_sim(), 9).unwrap();
        let pcfg = PipelineConfig { augment: AugmentConfig { min_sweeps: 6, ..Default::default() }, ..Default::default() };
        let fcfg = fusion_cfg();
        let plain = prepare_frame(&frame, &pcfg, &fcfg, &FeatureStats::IDENTITY, 5, false).unwrap();
        let aug = prepare_frame(&frame, &pcfg, &fcfg, &FeatureStats::IDENTITY, 5, true).unwrap();
        let t = aug.transform;
        assert_ne!(t, BevTransform::IDENTITY);
        for (a, b) in plain.input.positions.iter().zip(&aug.input.positions) {
            assert!(t.point(*a).bev_distance(*b) < 1e-9);
        }
        // Rotation and mirroring about the ego origin leave polar association unchanged.
        assert_eq!(plain.input.assoc, aug.input.assoc);
        let tp = plain.targets(&fcfg, 0.5).unwrap();
        let ta = aug.targets(&fcfg, 0.5).unwrap();
        assert_eq!(tp.in_box, ta.in_box);
        assert_eq!(tp.has_valid_radar, ta.has_valid_radar);
        for (a, b) in tp.speed.iter().zip(&ta.speed) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in tp.offset.iter().zip(&ta.offset) {
            assert!((a[0] - b[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_radar_and_no_proposals_are_handled() {
        let mut frame = simulate_frame(&small_sim(), 11).unwrap();
        for s in &mut frame.sweeps {
            s.points.clear();
        }
        let fcfg = fusion_cfg();
        let mut store = ParamStore::new();
        let model = FusionModel::new(&mut store, &fcfg, &mut seeded_rng(1)).unwrap();
        let pcfg = PipelineConfig::default();
        let prep = prepare_frame(&frame, &pcfg, &fcfg, &FeatureStats::IDENTITY, 1, false).unwrap();
        assert_eq!(prep.input.assoc.total_pairs(), 0);
        let dets = fused_detections(&model, &store, &prep.input).unwrap();
        assert_eq!(dets, camera_only_detections(&frame.proposals));
        frame.proposals.clear();
        frame.proposal_gt.clear();
        let ef = evaluate_frame(Some((&model, &store)), &frame, &pcfg, &FeatureStats::IDENTITY, &EvalConfig::default(), 0).unwrap();
        assert!(ef.dets.is_empty());
    }

    #[test]
    fn median_values() {
        assert_eq!(median(&mut []), None);
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }
}
