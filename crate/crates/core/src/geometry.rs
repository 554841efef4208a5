//! Coordinate frames, oriented boxes, polar coordinates and pinhole projection.
//!
//! Conventions:
//! * Vehicle frame: x forward, y left, z up. BEV is the x-y plane.
//! * Camera frame: z along the optical axis, x right, y down.
//! * Yaw is counter-clockwise from +x; a box's length runs along its heading
//!   and its width across it.
//! * Every angle handed out by this module is wrapped to `[-pi, pi)`.

use core::f64::consts::PI;
use core::ops::{Add, Mul, Neg, Sub};

#[allow(unused_imports)] // inherent float methods shadow it when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

const TAU: f64 = 2.0 * PI;

/// Wraps an angle to `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a - TAU * ((a + PI) / TAU).floor();
    if w >= PI {
        w -= TAU;
    }
    if w < -PI {
        w += TAU;
    }
    w
}

/// Signed smallest difference `a - b`, wrapped.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Distance from the z axis.
    pub fn bev_norm(self) -> f64 {
        (self.x * self.x + self.y * self.y).sqrt()
    }

    pub fn bev_distance(self, o: Vec3) -> f64 {
        let dx = self.x - o.x;
        let dy = self.y - o.y;
        (dx * dx + dy * dy).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fu: f64,
    pub fv: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fu: f64, fv: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fu > 0.0 && fv > 0.0 && fu.is_finite() && fv.is_finite()) {
            bail!(InvalidInput, "focal lengths must be positive, got fu={fu} fv={fv}");
        }
        if !(cx.is_finite() && cy.is_finite()) {
            bail!(InvalidInput, "principal point must be finite");
        }
        Ok(Self { fu, fv, cx, cy })
    }

    /// Same camera at a coarser pixel grid (feature maps are strided images).
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            fu: self.fu * factor,
            fv: self.fv * factor,
            cx: self.cx * factor,
            cy: self.cy * factor,
        }
    }
}

/// Lifts an image keypoint with known depth into the camera frame.
pub fn unproject_keypoint(u: f64, v: f64, depth: f64, k: &CameraIntrinsics) -> Result<Vec3> {
    if !(u.is_finite() && v.is_finite() && depth.is_finite()) {
        bail!(InvalidInput, "non-finite keypoint ({u}, {v}) or depth {depth}");
    }
    if depth < 0.0 {
        bail!(InvalidInput, "negative depth {depth}");
    }
    Ok(Vec3::new(
        (u - k.cx) * depth / k.fu,
        (v - k.cy) * depth / k.fv,
        depth,
    ))
}

/// Projects a camera-frame point to pixels.
pub fn project_point(p: Vec3, k: &CameraIntrinsics) -> Result<(f64, f64)> {
    if !p.is_finite() {
        bail!(InvalidInput, "non-finite point");
    }
    if p.z <= 0.0 {
        return Err(crate::Error::BehindCamera(p.z));
    }
    Ok((k.fu * p.x / p.z + k.cx, k.fv * p.y / p.z + k.cy))
}

/// Rigid transform `p -> R p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        translation: Vec3::ZERO,
    };

    /// Checked constructor: the rotation must be orthonormal with det +1.
    pub fn new(rotation: [[f64; 3]; 3], translation: Vec3) -> Result<Self> {
        let r = &rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-9 {
                    bail!(InvalidInput, "rotation is not orthonormal");
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-9 {
            bail!(InvalidInput, "rotation has determinant {det}, expected +1");
        }
        if !translation.is_finite() {
            bail!(InvalidInput, "non-finite translation");
        }
        Ok(Self { rotation, translation })
    }

    /// Rotation about +z followed by a translation.
    pub fn from_yaw(yaw: f64, translation: Vec3) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            translation,
        }
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let r = &self.rotation;
        Vec3::new(
            r[0][0] * v.x + r[0][1] * v.y + r[0][2] * v.z,
            r[1][0] * v.x + r[1][1] * v.y + r[1][2] * v.z,
            r[2][0] * v.x + r[2][1] * v.y + r[2][2] * v.z,
        )
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        self.rotate(p) + self.translation
    }

    pub fn inverse(&self) -> Pose {
        let r = &self.rotation;
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let inv = Pose { rotation: rt, translation: Vec3::ZERO };
        Pose { rotation: rt, translation: -inv.rotate(self.translation) }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut rot = [[0.0; 3]; 3];
        for (i, row) in rot.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.rotation[i][k] * other.rotation[k][j]).sum();
            }
        }
        Pose { rotation: rot, translation: self.transform_point(other.translation) }
    }

    /// Heading of the rotated +x axis in the BEV plane.
    pub fn yaw(&self) -> f64 {
        self.rotation[1][0].atan2(self.rotation[0][0])
    }
}

pub fn transform_point(p: Vec3, pose: &Pose) -> Vec3 {
    pose.transform_point(p)
}

/// Cylindrical coordinates about the vehicle z axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolarPoint {
    pub r: f64,
    pub phi: f64,
    pub z: f64,
}

/// Azimuth of the origin is defined as 0.
pub fn cart_to_polar(p: Vec3) -> PolarPoint {
    let r = p.bev_norm();
    let phi = if r == 0.0 { 0.0 } else { wrap_angle(p.y.atan2(p.x)) };
    PolarPoint { r, phi, z: p.z }
}

pub fn polar_to_cart(p: PolarPoint) -> Vec3 {
    let (s, c) = p.phi.sin_cos();
    Vec3::new(p.r * c, p.r * s, p.z)
}

/// Oriented 3D box in the vehicle frame. `dims` is (width, length, height).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox3D {
    pub center: Vec3,
    pub dims: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
}

impl BBox3D {
    pub fn new(center: Vec3, dims: [f64; 3], yaw: f64, velocity: [f64; 2]) -> Result<Self> {
        if dims.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            bail!(InvalidInput, "box dimensions must be positive, got {dims:?}");
        }
        if !center.is_finite() || !yaw.is_finite() {
            bail!(InvalidInput, "non-finite box pose");
        }
        Ok(Self { center, dims, yaw: wrap_angle(yaw), velocity })
    }

    pub fn width(&self) -> f64 {
        self.dims[0]
    }

    pub fn length(&self) -> f64 {
        self.dims[1]
    }

    pub fn height(&self) -> f64 {
        self.dims[2]
    }

    /// Offset of `p` from the center expressed along (heading, left, up).
    pub fn to_local(&self, p: Vec3) -> Vec3 {
        let d = p - self.center;
        let (s, c) = self.yaw.sin_cos();
        Vec3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    pub fn from_local(&self, l: Vec3) -> Vec3 {
        let (s, c) = self.yaw.sin_cos();
        Vec3::new(c * l.x - s * l.y, s * l.x + c * l.y, l.z) + self.center
    }

    /// Eight corners; bottom face first, each face counter-clockwise from the
    /// front-left corner.
    pub fn corners(&self) -> [Vec3; 8] {
        let hl = 0.5 * self.length();
        let hw = 0.5 * self.width();
        let hh = 0.5 * self.height();
        let local = [
            (hl, hw, -hh),
            (-hl, hw, -hh),
            (-hl, -hw, -hh),
            (hl, -hw, -hh),
            (hl, hw, hh),
            (-hl, hw, hh),
            (-hl, -hw, hh),
            (hl, -hw, hh),
        ];
        local.map(|(x, y, z)| self.from_local(Vec3::new(x, y, z)))
    }

    /// The four BEV footprint corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [(f64, f64); 4] {
        let c = self.corners();
        [(c[0].x, c[0].y), (c[1].x, c[1].y), (c[2].x, c[2].y), (c[3].x, c[3].y)]
    }

    /// BEV footprint containment, footprint grown by `margin` on every side.
    pub fn contains_bev(&self, p: Vec3, margin: f64) -> bool {
        let l = self.to_local(p);
        l.x.abs() <= 0.5 * self.length() + margin && l.y.abs() <= 0.5 * self.width() + margin
    }

    /// Volume containment, box grown by `margin` on every side.
    pub fn contains(&self, p: Vec3, margin: f64) -> bool {
        let l = self.to_local(p);
        l.x.abs() <= 0.5 * self.length() + margin
            && l.y.abs() <= 0.5 * self.width() + margin
            && l.z.abs() <= 0.5 * self.height() + margin
    }

    /// Separating-axis overlap test of the two BEV footprints.
    pub fn overlaps_bev(&self, other: &BBox3D) -> bool {
        let a = self.bev_corners();
        let b = other.bev_corners();
        for poly in [&a, &b] {
            for i in 0..4 {
                let (x0, y0) = poly[i];
                let (x1, y1) = poly[(i + 1) % 4];
                let (nx, ny) = (y1 - y0, x0 - x1);
                let proj = |p: &(f64, f64)| p.0 * nx + p.1 * ny;
                let (amin, amax) = a.iter().map(proj).fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(v), hi.max(v)));
                let (bmin, bmax) = b.iter().map(proj).fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(v), hi.max(v)));
                if amax < bmin || bmax < amin {
                    return false;
                }
            }
        }
        true
    }

    pub fn speed(&self) -> f64 {
        (self.velocity[0] * self.velocity[0] + self.velocity[1] * self.velocity[1]).sqrt()
    }
}

/// A calibrated camera: intrinsics, camera-to-vehicle extrinsics and image size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub cam_to_vehicle: Pose,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Camera at `mount` looking horizontally along vehicle yaw `yaw`.
    pub fn looking_at_yaw(intrinsics: CameraIntrinsics, yaw: f64, mount: Vec3, width: usize, height: usize) -> Self {
        let (s, c) = yaw.sin_cos();
        // Columns: camera x (right), y (down), z (forward) in vehicle axes.
        let rotation = [[s, 0.0, c], [-c, 0.0, s], [0.0, -1.0, 0.0]];
        Self { intrinsics, cam_to_vehicle: Pose { rotation, translation: mount }, width, height }
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        self.cam_to_vehicle.inverse().transform_point(p)
    }

    pub fn to_vehicle(&self, p: Vec3) -> Vec3 {
        self.cam_to_vehicle.transform_point(p)
    }

    /// Pixel position and depth of a vehicle-frame point.
    pub fn project(&self, p: Vec3) -> Result<(f64, f64, f64)> {
        let c = self.to_camera(p);
        let (u, v) = project_point(c, &self.intrinsics)?;
        Ok((u, v, c.z))
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(1000.0, 1000.0, 500.0, 500.0).unwrap()
    }

    fn close(a: Vec3, b: Vec3, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn unproject_examples() {
        let k = k();
        assert_eq!(unproject_keypoint(500.0, 500.0, 10.0, &k).unwrap(), Vec3::new(0.0, 0.0, 10.0));
        assert_eq!(unproject_keypoint(1500.0, 500.0, 10.0, &k).unwrap(), Vec3::new(10.0, 0.0, 10.0));
        assert_eq!(unproject_keypoint(123.0, -7.0, 0.0, &k).unwrap(), Vec3::ZERO);
        assert!(unproject_keypoint(f64::NAN, 0.0, 1.0, &k).is_err());
        assert!(unproject_keypoint(0.0, 0.0, f64::INFINITY, &k).is_err());
    }

    #[test]
    fn project_examples() {
        let k = k();
        assert_eq!(project_point(Vec3::new(0.0, 0.0, 10.0), &k).unwrap(), (500.0, 500.0));
        assert_eq!(project_point(Vec3::new(10.0, 0.0, 10.0), &k).unwrap(), (1500.0, 500.0));
        assert!(matches!(project_point(Vec3::new(0.0, 0.0, -1.0), &k), Err(crate::Error::BehindCamera(_))));
    }

    #[test]
    fn intrinsics_reject_bad_focal() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(CameraIntrinsics::new(1.0, -1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn transform_examples() {
        let p = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(Pose::IDENTITY.transform_point(p), p);
        let t = Pose::new(Pose::IDENTITY.rotation, Vec3::new(1.0, 0.0, 0.0)).unwrap();
        assert_eq!(transform_point(Vec3::ZERO, &t), Vec3::new(1.0, 0.0, 0.0));
        let rz = Pose::from_yaw(PI / 2.0, Vec3::ZERO);
        assert!(close(rz.transform_point(Vec3::new(1.0, 0.0, 0.0)), Vec3::new(0.0, 1.0, 0.0), 1e-12));
    }

    #[test]
    fn pose_rejects_non_rotation() {
        let mut r = Pose::IDENTITY.rotation;
        r[0][0] = 2.0;
        assert!(Pose::new(r, Vec3::ZERO).is_err());
        let reflect = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(Pose::new(reflect, Vec3::ZERO).is_err());
    }

    #[test]
    fn polar_examples() {
        let p = cart_to_polar(Vec3::new(3.0, 4.0, 1.0));
        assert_eq!(p.r, 5.0);
        assert_eq!(p.phi, 4.0f64.atan2(3.0));
        assert_eq!(p.z, 1.0);
        assert_eq!(cart_to_polar(Vec3::new(1.0, 0.0, 0.0)), PolarPoint { r: 1.0, phi: 0.0, z: 0.0 });
        assert_eq!(cart_to_polar(Vec3::new(0.0, 0.0, 5.0)), PolarPoint { r: 0.0, phi: 0.0, z: 5.0 });

        assert_eq!(polar_to_cart(PolarPoint { r: 5.0, phi: 0.0, z: 0.0 }), Vec3::new(5.0, 0.0, 0.0));
        assert_eq!(polar_to_cart(PolarPoint { r: 0.0, phi: 1.234, z: 2.0 }), Vec3::new(0.0, 0.0, 2.0));
        let q = polar_to_cart(PolarPoint { r: 2.0, phi: PI / 2.0, z: 0.0 });
        assert!(close(q, Vec3::new(0.0, 2.0, 0.0), 1e-12));
    }

    #[test]
    fn wrap_is_half_open() {
        assert_eq!(wrap_angle(PI), -PI);
        assert_eq!(wrap_angle(-PI), -PI);
        assert!((wrap_angle(3.0 * PI + 0.5) - (-PI + 0.5)).abs() < 1e-12);
        assert!((angle_diff(-3.1, 3.1) - (2.0 * PI - 6.2)).abs() < 1e-12);
    }

    #[test]
    fn unit_cube_corners() {
        let b = BBox3D::new(Vec3::ZERO, [1.0; 3], 0.0, [0.0; 2]).unwrap();
        let mut c: alloc::vec::Vec<[i32; 3]> = b
            .corners()
            .iter()
            .map(|p| [(p.x * 2.0).round() as i32, (p.y * 2.0).round() as i32, (p.z * 2.0).round() as i32])
            .collect();
        c.sort();
        let mut expect = alloc::vec::Vec::new();
        for x in [-1, 1] {
            for y in [-1, 1] {
                for z in [-1, 1] {
                    expect.push([x, y, z]);
                }
            }
        }
        assert_eq!(c, expect);
        for p in b.corners() {
            assert!((p.x.abs() - 0.5).abs() < 1e-12 && (p.y.abs() - 0.5).abs() < 1e-12);
        }

        let turned = BBox3D::new(Vec3::ZERO, [1.0; 3], PI / 2.0, [0.0; 2]).unwrap();
        let mut c2: alloc::vec::Vec<[i32; 3]> = turned
            .corners()
            .iter()
            .map(|p| [(p.x * 2.0).round() as i32, (p.y * 2.0).round() as i32, (p.z * 2.0).round() as i32])
            .collect();
        c2.sort();
        assert_eq!(c2, expect);
    }

    #[test]
    fn corner_extent_follows_heading_convention() {
        // w=2 across, l=4 along heading (+x at yaw 0), h=2.
        let b = BBox3D::new(Vec3::new(10.0, 0.0, 0.0), [2.0, 4.0, 2.0], 0.0, [0.0; 2]).unwrap();
        let c = b.corners();
        let min = |f: fn(&Vec3) -> f64| c.iter().map(f).fold(f64::MAX, f64::min);
        let max = |f: fn(&Vec3) -> f64| c.iter().map(f).fold(f64::MIN, f64::max);
        assert_eq!((min(|p| p.x), max(|p| p.x)), (8.0, 12.0));
        assert_eq!((min(|p| p.y), max(|p| p.y)), (-1.0, 1.0));
        assert_eq!((min(|p| p.z), max(|p| p.z)), (-1.0, 1.0));
    }

    #[test]
    fn box_rejects_bad_dims() {
        assert!(BBox3D::new(Vec3::ZERO, [1.0, 0.0, 1.0], 0.0, [0.0; 2]).is_err());
    }

    #[test]
    fn camera_axes() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 40.0).unwrap();
        let cam = Camera::looking_at_yaw(k, 0.0, Vec3::new(0.0, 0.0, 1.5), 100, 80);
        let (u, v, d) = cam.project(Vec3::new(10.0, 0.0, 1.5)).unwrap();
        assert!((u - 50.0).abs() < 1e-12 && (v - 40.0).abs() < 1e-12 && (d - 10.0).abs() < 1e-12);
        let (u, v, _) = cam.project(Vec3::new(10.0, 1.0, 0.5)).unwrap();
        assert!(u < 50.0 && v > 40.0);
        let side = Camera::looking_at_yaw(k, core::f64::consts::FRAC_PI_2, Vec3::ZERO, 100, 80);
        let (u, _, d) = side.project(Vec3::new(0.0, 7.0, 0.0)).unwrap();
        assert!((u - 50.0).abs() < 1e-9 && (d - 7.0).abs() < 1e-9);
        assert!(side.project(Vec3::new(0.0, -7.0, 0.0)).is_err());
        let p = Vec3::new(3.0, -2.0, 0.4);
        assert!(close(side.to_vehicle(side.to_camera(p)), p, 1e-12));
    }

    #[test]
    fn bev_overlap() {
        let a = BBox3D::new(Vec3::ZERO, [2.0, 4.0, 1.5], 0.0, [0.0; 2]).unwrap();
        let b = BBox3D::new(Vec3::new(3.9, 0.0, 0.0), [2.0, 4.0, 1.5], 0.0, [0.0; 2]).unwrap();
        let c = BBox3D::new(Vec3::new(4.1, 0.0, 0.0), [2.0, 4.0, 1.5], 0.0, [0.0; 2]).unwrap();
        let d = BBox3D::new(Vec3::new(3.0, 3.0, 0.0), [2.0, 4.0, 1.5], PI / 4.0, [0.0; 2]).unwrap();
        assert!(a.overlaps_bev(&b));
        assert!(!a.overlaps_bev(&c));
        assert!(a.overlaps_bev(&d) == d.overlaps_bev(&a));
    }

    proptest! {
        #[test]
        fn polar_round_trip(x in -100.0..100.0f64, y in -100.0..100.0f64, z in -5.0..5.0f64) {
            let p = Vec3::new(x, y, z);
            prop_assume!(p.bev_norm() > 1e-6);
            let q = polar_to_cart(cart_to_polar(p));
            prop_assert!(close(p, q, 1e-9));
        }

        #[test]
        fn projection_round_trip(u in -200.0..1200.0f64, v in -200.0..1200.0f64, d in 0.01..200.0f64) {
            let k = k();
            let p = unproject_keypoint(u, v, d, &k).unwrap();
            let (u2, v2) = project_point(p, &k).unwrap();
            prop_assert!((u - u2).abs() < 1e-6 && (v - v2).abs() < 1e-6);
        }

        #[test]
        fn corners_yaw_equivariant(cx in -50.0..50.0f64, cy in -50.0..50.0f64, yaw in -3.0..3.0f64,
                                   delta in -3.0..3.0f64, w in 0.2..3.0f64, l in 0.2..8.0f64) {
            let b = BBox3D::new(Vec3::new(cx, cy, 0.7), [w, l, 1.5], yaw, [0.0; 2]).unwrap();
            let turned = BBox3D::new(b.center, b.dims, yaw + delta, [0.0; 2]).unwrap();
            let spin = Pose::from_yaw(delta, Vec3::ZERO);
            for (a, t) in b.corners().iter().zip(turned.corners().iter()) {
                let r = spin.transform_point(*a - b.center) + b.center;
                prop_assert!(close(r, *t, 1e-9));
            }
            let centroid = b.corners().iter().fold(Vec3::ZERO, |acc, c| acc + *c) * 0.125;
            prop_assert!(close(centroid, b.center, 1e-9));
        }

        #[test]
        fn pose_inverse_composes_to_identity(yaw in -3.0..3.0f64, tx in -10.0..10.0f64, ty in -10.0..10.0f64,
                                             px in -10.0..10.0f64, py in -10.0..10.0f64, pz in -10.0..10.0f64) {
            let pose = Pose::from_yaw(yaw, Vec3::new(tx, ty, 0.3));
            let p = Vec3::new(px, py, pz);
            let back = pose.inverse().transform_point(pose.transform_point(p));
            prop_assert!(close(back, p, 1e-9));
            let id = pose.compose(&pose.inverse());
            prop_assert!(close(id.transform_point(p), p, 1e-9));
        }
    }
}
