//! Synthetic scenes, radar sweeps and camera proposals.
//!
//! A frame is a set of non-overlapping boxes around a moving ego vehicle,
//! seen by a ring of pinhole cameras and a radar at the origin. The radar is
//! accurate in range and coarse in azimuth; the camera proposals are the
//! opposite (depth noise grows with distance, pixel noise is small).
//! Synthetic camera feature maps carry a per-class signature on each object's
//! silhouette so image context is recoverable from patches.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)] // inherent float methods shadow it when std is linked
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::fusion::patch::pixel_to_feature;
use crate::fusion::ImageProposal;
use crate::geometry::{angle_diff, cart_to_polar, polar_to_cart, unproject_keypoint, BBox3D, Camera, CameraIntrinsics, PolarPoint, Pose, Vec3};
use crate::radar::{RadarPoint, RadarSweep};
use crate::tensor::{bilinear_sample, Tensor};
use crate::{derive_seed, seeded_rng, SeededRng};

/// Object categories produced by the generator.
pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["car", "truck", "pedestrian", "bicycle"];

/// Nominal (width, length, height) per class.
pub const CLASS_DIMS: [[f64; 3]; NUM_CLASSES] = [[1.9, 4.6, 1.7], [2.6, 7.5, 3.2], [0.7, 0.7, 1.75], [0.6, 1.7, 1.3]];
/// Top speed per class (m/s).
pub const CLASS_MAX_SPEED: [f64; NUM_CLASSES] = [12.0, 10.0, 1.6, 6.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub bbox: BBox3D,
    pub class_id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedPose {
    /// Vehicle-to-world pose; the world frame is the vehicle frame at time 0.
    pub pose: Pose,
    pub timestamp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<GtObject>,
    /// One pose per radar sweep, newest (time 0) first.
    pub ego_trajectory: Vec<TimedPose>,
    pub cameras: Vec<Camera>,
}

impl Scene {
    pub fn gt_boxes(&self) -> Vec<BBox3D> {
        self.objects.iter().map(|o| o.bbox).collect()
    }
}

/// Object counts and placement ranges for one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub counts: [usize; NUM_CLASSES],
    pub min_range: f64,
    pub max_range: f64,
    /// Fraction of objects that do not move.
    pub static_fraction: f64,
    pub ego_speed_max: f64,
    pub n_sweeps: usize,
    /// Time between consecutive sweeps (s).
    pub sweep_interval: f64,
    /// Placement attempts per object before giving up.
    pub max_attempts: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            counts: [8, 2, 4, 2],
            min_range: 4.0,
            max_range: 54.0,
            static_fraction: 0.4,
            ego_speed_max: 10.0,
            n_sweeps: 6,
            sweep_interval: 0.075,
            max_attempts: 500,
        }
    }
}

/// Ring of cameras sharing one pinhole model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraRig {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view (degrees).
    pub hfov_deg: f64,
    pub mount_height: f64,
}

impl Default for CameraRig {
    fn default() -> Self {
        Self { count: 6, width: 200, height: 112, hfov_deg: 70.0, mount_height: 1.5 }
    }
}

impl CameraRig {
    /// Cameras at yaw `k * 2π / count`, all mounted above the origin.
    pub fn cameras(&self) -> Result<Vec<Camera>> {
        if self.count == 0 || self.width == 0 || self.height == 0 || !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
            bail!(Config, "invalid camera rig {self:?}");
        }
        let f = 0.5 * self.width as f64 / (0.5 * self.hfov_deg.to_radians()).tan();
        let k = CameraIntrinsics::new(f, f, 0.5 * self.width as f64, 0.5 * self.height as f64)?;
        Ok((0..self.count)
            .map(|i| {
                let yaw = crate::geometry::wrap_angle(i as f64 * 2.0 * PI / self.count as f64);
                Camera::looking_at_yaw(k, yaw, Vec3::new(0.0, 0.0, self.mount_height), self.width, self.height)
            })
            .collect())
    }
}

/// Sensor error model for radar and camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorModel {
    pub radar_radial_sigma: f64,
    pub radar_azimuth_sigma: f64,
    pub radar_height_sigma: f64,
    /// Expected clutter points per frame (all sweeps together).
    pub clutter_rate: f64,
    /// Probability that the radar misses an object in every sweep.
    pub miss_prob_base: f64,
    /// Mean RCS per class (dBsm).
    pub rcs_by_class: [f64; NUM_CLASSES],
    pub rcs_sigma: f64,
    /// Mean returns per sweep at 20 m; scales with `20 / r`.
    pub returns_by_class: [f64; NUM_CLASSES],
    pub cam_depth_sigma_rate: f64,
    pub cam_pixel_sigma: f64,
    /// Relative noise on proposal dimensions.
    pub cam_dim_sigma: f64,
    pub cam_yaw_sigma: f64,
    pub cam_velocity_sigma: f64,
    /// Expected proposals per frame without a ground-truth object.
    pub false_proposal_rate: f64,
    pub feature_noise: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        Self {
            radar_radial_sigma: 0.1,
            radar_azimuth_sigma: 0.0175,
            radar_height_sigma: 0.2,
            clutter_rate: 60.0,
            miss_prob_base: 0.1,
            rcs_by_class: [10.0, 15.0, -5.0, 0.0],
            rcs_sigma: 3.0,
            returns_by_class: [2.4, 3.5, 0.5, 0.7],
            cam_depth_sigma_rate: 0.04,
            cam_pixel_sigma: 0.5,
            cam_dim_sigma: 0.05,
            cam_yaw_sigma: 0.08,
            cam_velocity_sigma: 1.0,
            false_proposal_rate: 1.0,
            feature_noise: 0.3,
        }
    }
}

impl SensorModel {
    /// Every source of randomness switched off.
    pub fn noiseless() -> Self {
        Self {
            radar_radial_sigma: 0.0,
            radar_azimuth_sigma: 0.0,
            radar_height_sigma: 0.0,
            clutter_rate: 0.0,
            miss_prob_base: 0.0,
            rcs_sigma: 0.0,
            cam_depth_sigma_rate: 0.0,
            cam_pixel_sigma: 0.0,
            cam_dim_sigma: 0.0,
            cam_yaw_sigma: 0.0,
            cam_velocity_sigma: 0.0,
            false_proposal_rate: 0.0,
            feature_noise: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sigmas = [
            self.radar_radial_sigma,
            self.radar_azimuth_sigma,
            self.radar_height_sigma,
            self.rcs_sigma,
            self.cam_depth_sigma_rate,
            self.cam_pixel_sigma,
            self.cam_dim_sigma,
            self.cam_yaw_sigma,
            self.cam_velocity_sigma,
            self.feature_noise,
        ];
        if sigmas.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            bail!(Config, "sensor noise levels must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.miss_prob_base) {
            bail!(Config, "miss probability must lie in [0, 1]");
        }
        if !(self.clutter_rate >= 0.0) || !(self.false_proposal_rate >= 0.0) || self.returns_by_class.iter().any(|r| !(*r >= 0.0)) {
            bail!(Config, "rates must be non-negative");
        }
        Ok(())
    }
}

/// Everything needed to generate frames.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub scene: SceneSpec,
    pub sensor: SensorModel,
    pub rig: CameraRig,
    pub features: FeatureMapConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureMapConfig {
    /// Channels per map; the last two carry the estimated depth / 50 and the
    /// depth noise std / 2, the rest a class signature.
    pub channels: usize,
    /// Image pixels per feature-map cell.
    pub stride: usize,
    pub max_proposals_per_camera: usize,
}

impl Default for FeatureMapConfig {
    fn default() -> Self {
        Self { channels: 16, stride: 4, max_proposals_per_camera: 64 }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.scene;
        if !(s.min_range >= 0.0 && s.max_range > s.min_range) || s.n_sweeps == 0 || !(s.sweep_interval >= 0.0) {
            bail!(Config, "invalid scene spec {s:?}");
        }
        if !(0.0..=1.0).contains(&s.static_fraction) || !(s.ego_speed_max >= 0.0) {
            bail!(Config, "invalid scene motion settings");
        }
        if self.features.channels < 3 || self.features.stride == 0 || self.features.max_proposals_per_camera == 0 {
            bail!(Config, "feature maps need >= 3 channels, stride >= 1, proposal cap >= 1");
        }
        self.sensor.validate()?;
        self.rig.cameras().map(|_| ())
    }

    /// Feature-map size `(h, w)`.
    pub fn feature_size(&self) -> (usize, usize) {
        (self.rig.height / self.features.stride, self.rig.width / self.features.stride)
    }
}

/// One simulated frame: scene, radar sweeps (newest first), proposals and
/// per-camera feature maps `[h, w, channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub scene: Scene,
    pub sweeps: Vec<RadarSweep>,
    pub proposals: Vec<ImageProposal>,
    /// Ground-truth object each proposal was generated from.
    pub proposal_gt: Vec<Option<usize>>,
    pub feature_maps: Vec<Tensor>,
}

fn normal(rng: &mut SeededRng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("positive sigma").sample(rng)
    } else {
        0.0
    }
}

fn poisson(rng: &mut SeededRng, lambda: f64) -> usize {
    if lambda > 0.0 {
        Poisson::new(lambda).expect("positive rate").sample(rng) as usize
    } else {
        0
    }
}

/// Places the requested objects without BEV overlap.
pub fn generate_scene(cfg: &SimConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let spec = &cfg.scene;
    let mut rng = seeded_rng(seed);
    let mut objects: Vec<GtObject> = Vec::new();
    for (class_id, &count) in spec.counts.iter().enumerate() {
        for _ in 0..count {
            let mut placed = false;
            for _ in 0..spec.max_attempts {
                let r = rng.random_range(spec.min_range..spec.max_range);
                let phi = rng.random_range(-PI..PI);
                let yaw = rng.random_range(-PI..PI);
                let d = CLASS_DIMS[class_id].map(|d| d * rng.random_range(0.9..1.1));
                let center = polar_to_cart(PolarPoint { r, phi, z: 0.5 * d[2] });
                let speed = if rng.random_bool(spec.static_fraction) {
                    0.0
                } else {
                    rng.random_range(0.3..1.0) * CLASS_MAX_SPEED[class_id]
                };
                let (s, c) = yaw.sin_cos();
                let b = BBox3D::new(center, d, yaw, [speed * c, speed * s])?;
                if b.bev_corners().iter().any(|(x, y)| x.hypot(*y) > spec.max_range + 1.0 || x.hypot(*y) < 2.0) {
                    continue;
                }
                // A small clearance so surface returns stay attributable.
                let grown = BBox3D { dims: [d[0] + 0.4, d[1] + 0.4, d[2]], ..b };
                if objects.iter().any(|o| o.bbox.overlaps_bev(&grown)) {
                    continue;
                }
                objects.push(GtObject { bbox: b, class_id });
                placed = true;
                break;
            }
            if !placed {
                bail!(Generation, "could not place a {} after {} attempts", CLASS_NAMES[class_id], spec.max_attempts);
            }
        }
    }
    let ego_speed = rng.random_range(0.0..=spec.ego_speed_max);
    let ego_trajectory = (0..spec.n_sweeps)
        .map(|k| {
            let t = -(k as f64) * spec.sweep_interval;
            TimedPose { pose: Pose::from_yaw(0.0, Vec3::new(ego_speed * t, 0.0, 0.0)), timestamp: t }
        })
        .collect();
    Ok(Scene { objects, ego_trajectory, cameras: cfg.rig.cameras()? })
}

/// Box of `o` at time `t` expressed in the vehicle frame of `pose`.
fn box_at(o: &BBox3D, t: f64, pose: &Pose) -> BBox3D {
    let world = o.center + Vec3::new(o.velocity[0] * t, o.velocity[1] * t, 0.0);
    let inv = pose.inverse();
    let v = inv.rotate(Vec3::new(o.velocity[0], o.velocity[1], 0.0));
    BBox3D { center: inv.transform_point(world), yaw: crate::geometry::wrap_angle(o.yaw - pose.yaw()), velocity: [v.x, v.y], dims: o.dims }
}

/// Uniform sample on the box faces that face the sensor at the origin;
/// `None` when the sensor sits inside the footprint.
fn visible_surface_point(b: &BBox3D, rng: &mut SeededRng) -> Option<Vec3> {
    let hl = 0.5 * b.length();
    let hw = 0.5 * b.width();
    // (start, end, outward normal) in box-local coordinates.
    let edges = [
        ([hl, hw], [hl, -hw], [1.0, 0.0]),
        ([-hl, hw], [-hl, -hw], [-1.0, 0.0]),
        ([hl, hw], [-hl, hw], [0.0, 1.0]),
        ([hl, -hw], [-hl, -hw], [0.0, -1.0]),
    ];
    let sensor = b.to_local(Vec3::new(0.0, 0.0, b.center.z));
    let visible: Vec<_> = edges
        .iter()
        .filter(|(a, e, n)| {
            let mid = [0.5 * (a[0] + e[0]), 0.5 * (a[1] + e[1])];
            n[0] * (sensor.x - mid[0]) + n[1] * (sensor.y - mid[1]) > 0.0
        })
        .collect();
    if visible.is_empty() {
        return None;
    }
    let total: f64 = visible.iter().map(|(a, e, _)| (e[0] - a[0]).hypot(e[1] - a[1])).sum();
    let mut pick = rng.random_range(0.0..total);
    let mut chosen = visible[visible.len() - 1];
    for v in &visible {
        let len = (v.1[0] - v.0[0]).hypot(v.1[1] - v.0[1]);
        if pick < len {
            chosen = v;
            break;
        }
        pick -= len;
    }
    let s = rng.random_range(0.0..1.0);
    let (a, e, _) = chosen;
    let z = rng.random_range(-0.4..0.4) * b.height();
    Some(b.from_local(Vec3::new(a[0] + s * (e[0] - a[0]), a[1] + s * (e[1] - a[1]), z)))
}

/// Radar sweeps following the ego trajectory, newest first.
pub fn render_radar(scene: &Scene, model: &SensorModel, seed: u64) -> Result<Vec<RadarSweep>> {
    model.validate()?;
    let mut rng = seeded_rng(seed);
    let n_sweeps = scene.ego_trajectory.len().max(1);
    let seen: Vec<bool> = scene.objects.iter().map(|_| !rng.random_bool(model.miss_prob_base)).collect();
    let mut sweeps = Vec::with_capacity(n_sweeps);
    for tp in &scene.ego_trajectory {
        let mut points = Vec::new();
        for (o, _) in scene.objects.iter().zip(&seen).filter(|(_, s)| **s) {
            let b = box_at(&o.bbox, tp.timestamp, &tp.pose);
            let r = b.center.bev_norm();
            let n = poisson(&mut rng, model.returns_by_class[o.class_id] * 20.0 / r.max(5.0));
            for _ in 0..n {
                let Some(p) = visible_surface_point(&b, &mut rng) else { break };
                let mut pol = cart_to_polar(p);
                pol.r = (pol.r + normal(&mut rng, model.radar_radial_sigma)).max(0.0);
                pol.phi += normal(&mut rng, model.radar_azimuth_sigma);
                pol.z += normal(&mut rng, model.radar_height_sigma);
                let (s, c) = pol.phi.sin_cos();
                let radial = b.velocity[0] * c + b.velocity[1] * s;
                points.push(RadarPoint {
                    position: polar_to_cart(pol),
                    rcs: model.rcs_by_class[o.class_id] + normal(&mut rng, model.rcs_sigma),
                    doppler: [radial * c, radial * s],
                    sweep_age: 0.0,
                });
            }
        }
        for _ in 0..poisson(&mut rng, model.clutter_rate / n_sweeps as f64) {
            let r = rng.random_range(1.0f64..55.0 * 55.0).sqrt();
            let phi = rng.random_range(-PI..PI);
            let radial = normal(&mut rng, 0.5);
            let (s, c) = phi.sin_cos();
            points.push(RadarPoint {
                position: polar_to_cart(PolarPoint { r, phi, z: 0.5 + normal(&mut rng, 0.5) }),
                rcs: -5.0 + normal(&mut rng, 4.0),
                doppler: [radial * c, radial * s],
                sweep_age: 0.0,
            });
        }
        sweeps.push(RadarSweep { points, ego_pose: Some(tp.pose), timestamp: tp.timestamp });
    }
    Ok(sweeps)
}

/// Camera whose optical axis is closest in azimuth to `phi`.
fn nearest_camera(cameras: &[Camera], phi: f64) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, c) in cameras.iter().enumerate() {
        let axis = c.cam_to_vehicle.rotate(Vec3::new(0.0, 0.0, 1.0));
        let d = angle_diff(phi, axis.y.atan2(axis.x)).abs();
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Fixed ±1 class signature over the first `channels - 2` channels.
pub fn class_signature(class_id: usize, channels: usize) -> Vec<f64> {
    let mut rng = seeded_rng(derive_seed(0x5167_a7e5, class_id as u64));
    (0..channels.saturating_sub(2)).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect()
}

struct Draft {
    proposal: ImageProposal,
    gt: Option<usize>,
    depth: f64,
}

/// Camera proposals for every visible object (plus false ones) and the
/// per-camera feature maps they were read from.
pub fn render_proposals_and_features(scene: &Scene, cfg: &SimConfig, seed: u64) -> Result<(Vec<ImageProposal>, Vec<Option<usize>>, Vec<Tensor>)> {
    cfg.validate()?;
    let m = &cfg.sensor;
    let fc = &cfg.features;
    let mut rng = seeded_rng(seed);
    let cams = &scene.cameras;
    if cams.is_empty() {
        bail!(InvalidInput, "scene has no cameras");
    }
    let mut drafts: Vec<Draft> = Vec::new();
    for (gi, o) in scene.objects.iter().enumerate() {
        let b = &o.bbox;
        let ci = nearest_camera(cams, cart_to_polar(b.center).phi);
        let cam = &cams[ci];
        let Ok((u, v, depth)) = cam.project(b.center) else { continue };
        if depth < 1.0 || !cam.in_image(u, v) {
            continue;
        }
        let sigma = m.cam_depth_sigma_rate * depth;
        let d = (depth + normal(&mut rng, sigma)).max(0.5);
        let (un, vn) = (u + normal(&mut rng, m.cam_pixel_sigma), v + normal(&mut rng, m.cam_pixel_sigma));
        let center = cam.to_vehicle(unproject_keypoint(un, vn, d, &cam.intrinsics)?);
        let dims = b.dims.map(|x| (x * (1.0 + normal(&mut rng, m.cam_dim_sigma))).max(0.1));
        let yaw = b.yaw + normal(&mut rng, m.cam_yaw_sigma);
        let vel = [b.velocity[0] + normal(&mut rng, m.cam_velocity_sigma), b.velocity[1] + normal(&mut rng, m.cam_velocity_sigma)];
        let r = b.center.bev_norm();
        let conf = (0.92 - 0.006 * r + rng.random_range(-0.08..0.08)).clamp(0.05, 0.99);
        drafts.push(Draft {
            proposal: ImageProposal {
                bbox: BBox3D::new(center, dims, yaw, vel)?,
                depth_var: sigma * sigma,
                class_conf: conf,
                class_id: o.class_id,
                feature: Vec::new(),
                keypoint: [un, vn],
                camera_id: ci,
            },
            gt: Some(gi),
            depth: d,
        });
    }
    for _ in 0..poisson(&mut rng, m.false_proposal_rate) {
        let ci = rng.random_range(0..cams.len());
        let cam = &cams[ci];
        let (u, v) = (rng.random_range(0.0..cam.width as f64), rng.random_range(0.4..0.6) * cam.height as f64);
        let depth = rng.random_range(cfg.scene.min_range..cfg.scene.max_range);
        let class_id = rng.random_range(0..NUM_CLASSES);
        let center = cam.to_vehicle(unproject_keypoint(u, v, depth, &cam.intrinsics)?);
        let sigma = m.cam_depth_sigma_rate * depth;
        drafts.push(Draft {
            proposal: ImageProposal {
                bbox: BBox3D::new(center, CLASS_DIMS[class_id], rng.random_range(-PI..PI), [0.0; 2])?,
                depth_var: sigma * sigma,
                class_conf: rng.random_range(0.05..0.35),
                class_id,
                feature: Vec::new(),
                keypoint: [u, v],
                camera_id: ci,
            },
            gt: None,
            depth,
        });
    }

    let maps = render_feature_maps(scene, cfg, &drafts, &mut rng)?;

    let mut out_p = Vec::new();
    let mut out_gt = Vec::new();
    for ci in 0..cams.len() {
        let mut mine: Vec<&Draft> = drafts.iter().filter(|d| d.proposal.camera_id == ci).collect();
        mine.sort_by(|a, b| b.proposal.p3d().total_cmp(&a.proposal.p3d()));
        for d in mine.into_iter().take(fc.max_proposals_per_camera) {
            let mut p = d.proposal.clone();
            let fx = pixel_to_feature(p.keypoint[0], fc.stride);
            let fy = pixel_to_feature(p.keypoint[1], fc.stride);
            p.feature = bilinear_sample(&maps[ci], fx, fy)?;
            out_p.push(p);
            out_gt.push(d.gt);
        }
    }
    Ok((out_p, out_gt, maps))
}

fn render_feature_maps(scene: &Scene, cfg: &SimConfig, drafts: &[Draft], rng: &mut SeededRng) -> Result<Vec<Tensor>> {
    let (h, w) = cfg.feature_size();
    let ch = cfg.features.channels;
    let stride = cfg.features.stride;
    let signatures: Vec<Vec<f64>> = (0..NUM_CLASSES).map(|c| class_signature(c, ch)).collect();
    let mut maps = Vec::with_capacity(scene.cameras.len());
    for (ci, cam) in scene.cameras.iter().enumerate() {
        let mut data = vec![0.0; h * w * ch];
        // Silhouettes far to near so nearer objects overwrite.
        let mut stamps: Vec<(f64, [f64; 4], usize, f64, f64)> = Vec::new();
        for (gi, o) in scene.objects.iter().enumerate() {
            let corners = o.bbox.corners();
            let mut rect = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
            let mut ok = true;
            for c in corners {
                match cam.project(c) {
                    Ok((u, v, d)) if d > 0.1 => {
                        rect = [rect[0].min(u), rect[1].min(v), rect[2].max(u), rect[3].max(v)];
                    }
                    _ => ok = false,
                }
            }
            if !ok {
                continue;
            }
            let depth = cam.to_camera(o.bbox.center).z;
            let est = drafts.iter().find(|d| d.gt == Some(gi) && d.proposal.camera_id == ci).map_or(depth, |d| d.depth);
            stamps.push((depth, rect, o.class_id, est, cfg.sensor.cam_depth_sigma_rate * depth));
        }
        stamps.sort_by(|a, b| b.0.total_cmp(&a.0));
        for (_, rect, class_id, est, sd) in stamps {
            let x0 = pixel_to_feature(rect[0], stride).ceil().max(0.0) as usize;
            let y0 = pixel_to_feature(rect[1], stride).ceil().max(0.0) as usize;
            let x1 = pixel_to_feature(rect[2], stride).floor();
            let y1 = pixel_to_feature(rect[3], stride).floor();
            if x1 < 0.0 || y1 < 0.0 {
                continue;
            }
            let (x1, y1) = ((x1 as usize).min(w - 1), (y1 as usize).min(h - 1));
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let cell = &mut data[(y * w + x) * ch..(y * w + x + 1) * ch];
                    cell[..ch - 2].copy_from_slice(&signatures[class_id]);
                    cell[ch - 2] = est / 50.0;
                    cell[ch - 1] = sd / 2.0;
                }
            }
        }
        for v in data.iter_mut() {
            *v += normal(rng, cfg.sensor.feature_noise);
        }
        maps.push(Tensor::new(&[h, w, ch], data)?);
    }
    Ok(maps)
}

/// Scene, radar, proposals and feature maps from independent streams of `seed`.
pub fn simulate_frame(cfg: &SimConfig, seed: u64) -> Result<Frame> {
    let scene = generate_scene(cfg, derive_seed(seed, 1))?;
    let sweeps = render_radar(&scene, &cfg.sensor, derive_seed(seed, 2))?;
    let (proposals, proposal_gt, feature_maps) = render_camera(&scene, cfg, seed)?;
    Ok(Frame { scene, sweeps, proposals, proposal_gt, feature_maps })
}

/// The camera half of [`simulate_frame`] for a frame seed, so proposals and
/// feature maps can be rebuilt from a stored scene.
pub fn render_camera(scene: &Scene, cfg: &SimConfig, seed: u64) -> Result<(Vec<ImageProposal>, Vec<Option<usize>>, Vec<Tensor>)> {
    render_proposals_and_features(scene, cfg, derive_seed(seed, 3))
}

/// Seed of frame `index` in a corpus generated from `seed`.
pub fn frame_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, 0x1000 + index as u64)
}

/// Generates `n` frames.
pub fn simulate_corpus(cfg: &SimConfig, seed: u64, n: usize) -> Result<Vec<Frame>> {
    (0..n).map(|i| simulate_frame(cfg, frame_seed(seed, i))).collect::<Result<Vec<_>>>().map_err(|e| match e {
        crate::Error::Generation(m) => crate::Error::Generation(format!("corpus: {m}")),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radar::accumulate_sweeps;

    fn one_object(class_id: usize, bbox: BBox3D) -> Scene {
        Scene {
            objects: vec![GtObject { bbox, class_id }],
            ego_trajectory: vec![TimedPose { pose: Pose::IDENTITY, timestamp: 0.0 }],
            cameras: CameraRig::default().cameras().unwrap(),
        }
    }

    #[test]
    fn empty_spec_gives_empty_scene() {
        let cfg = SimConfig { scene: SceneSpec { counts: [0; NUM_CLASSES], ..SceneSpec::default() }, ..SimConfig::default() };
        let s = generate_scene(&cfg, 4).unwrap();
        assert!(s.objects.is_empty());
        assert_eq!(s.ego_trajectory.len(), 6);
        assert_eq!(s.cameras.len(), 6);
    }

    #[test]
    fn placement_is_deterministic_and_disjoint() {
        let cfg = SimConfig { scene: SceneSpec { counts: [10, 0, 0, 0], ..SceneSpec::default() }, ..SimConfig::default() };
        let a = generate_scene(&cfg, 9).unwrap();
        assert_eq!(a, generate_scene(&cfg, 9).unwrap());
        assert_eq!(a.objects.len(), 10);
        for (i, x) in a.objects.iter().enumerate() {
            assert_eq!(x.class_id, 0);
            assert!(x.bbox.center.bev_norm() <= 55.0);
            for y in &a.objects[i + 1..] {
                assert!(!x.bbox.overlaps_bev(&y.bbox));
            }
        }
    }

    #[test]
    fn infeasible_packing_is_generation_error() {
        let spec = SceneSpec { counts: [400, 0, 0, 0], max_range: 8.0, max_attempts: 50, ..SceneSpec::default() };
        let r = generate_scene(&SimConfig { scene: spec, ..SimConfig::default() }, 1);
        assert!(matches!(r, Err(crate::Error::Generation(_))));
    }

    #[test]
    fn noiseless_returns_lie_on_the_box_with_zero_doppler() {
        let b = BBox3D::new(Vec3::new(15.0, 4.0, 0.85), [1.9, 4.6, 1.7], 0.6, [0.0, 0.0]).unwrap();
        let sweeps = render_radar(&one_object(0, b), &SensorModel::noiseless(), 3).unwrap();
        let pts = &sweeps[0].points;
        assert!(!pts.is_empty());
        for p in pts {
            let l = b.to_local(p.position);
            let on_face = (l.x.abs() - 2.3).abs() < 1e-9 || (l.y.abs() - 0.95).abs() < 1e-9;
            assert!(on_face && b.contains(p.position, 1e-9), "{l:?}");
            assert_eq!(p.doppler, [0.0, 0.0]);
        }
    }

    #[test]
    fn receding_object_has_radial_doppler() {
        let b = BBox3D::new(Vec3::new(20.0, 0.0, 0.85), [1.9, 4.6, 1.7], 0.0, [5.0, 0.0]).unwrap();
        let sweeps = render_radar(&one_object(0, b), &SensorModel::noiseless(), 5).unwrap();
        for p in &sweeps[0].points {
            let u = p.position * (1.0 / p.position.bev_norm());
            let radial = p.doppler[0] * u.x + p.doppler[1] * u.y;
            // Returns on the rear face sit within ±0.95 m of the axis at 17.7 m.
            assert!((radial - 5.0).abs() < 0.02, "{radial}");
        }
    }

    #[test]
    fn no_clutter_and_certain_miss_give_empty_sweeps() {
        let cfg = SimConfig::default();
        let scene = generate_scene(&cfg, 8).unwrap();
        let model = SensorModel { clutter_rate: 0.0, miss_prob_base: 1.0, ..SensorModel::default() };
        let sweeps = render_radar(&scene, &model, 2).unwrap();
        assert_eq!(sweeps.len(), 6);
        assert!(sweeps.iter().all(|s| s.points.is_empty()));
    }

    #[test]
    fn noiseless_proposals_match_ground_truth() {
        let cfg = SimConfig { sensor: SensorModel::noiseless(), ..SimConfig::default() };
        let scene = generate_scene(&cfg, 21).unwrap();
        let (props, gt, maps) = render_proposals_and_features(&scene, &cfg, 4).unwrap();
        assert_eq!(props.len(), scene.objects.len());
        assert_eq!(maps.len(), 6);
        assert_eq!(maps[0].shape(), &[28, 50, 16]);
        for (p, g) in props.iter().zip(&gt) {
            let b = scene.objects[g.unwrap()].bbox;
            assert!(p.bbox.center.bev_distance(b.center) < 1e-9);
            assert_eq!((p.bbox.dims, p.bbox.yaw, p.bbox.velocity), (b.dims, b.yaw, b.velocity));
            assert_eq!(p.depth_var, 0.0);
            assert_eq!(p.depth_confidence(), 1.0);
            assert_eq!(p.feature.len(), 16);
        }
    }

    #[test]
    fn depth_noise_scales_with_distance() {
        let cfg = SimConfig::default();
        let b = BBox3D::new(Vec3::new(50.0, 0.0, 1.5), [1.9, 4.6, 1.7], 0.0, [0.0, 0.0]).unwrap();
        let (props, _, _) = render_proposals_and_features(&one_object(0, b), &SimConfig { sensor: SensorModel { false_proposal_rate: 0.0, ..SensorModel::default() }, ..cfg }, 1).unwrap();
        // Camera depth of a point on the optical axis equals its x.
        assert!((props[0].depth_var.sqrt() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn surface_returns_stay_in_their_box() {
        let model = SensorModel { radar_azimuth_sigma: 0.0, radar_radial_sigma: 0.0, radar_height_sigma: 0.0, clutter_rate: 0.0, miss_prob_base: 0.0, ..SensorModel::default() };
        let cfg = SimConfig::default();
        let mut inside = 0usize;
        let mut total = 0usize;
        for seed in 0..40 {
            let scene = generate_scene(&cfg, seed).unwrap();
            let sweeps = render_radar(&scene, &model, seed).unwrap();
            let acc = accumulate_sweeps(&sweeps[..1], &Pose::IDENTITY, 1).unwrap();
            for p in acc {
                total += 1;
                inside += usize::from(scene.objects.iter().any(|o| o.bbox.contains(p.position, 1e-6)));
            }
        }
        assert!(total > 100);
        assert!(inside as f64 >= 0.99 * total as f64, "{inside}/{total}");
    }

    #[test]
    fn frames_are_deterministic() {
        let cfg = SimConfig::default();
        assert_eq!(simulate_frame(&cfg, 77).unwrap(), simulate_frame(&cfg, 77).unwrap());
        assert_ne!(simulate_frame(&cfg, 77).unwrap().scene, simulate_frame(&cfg, 78).unwrap().scene);
    }
}
