//! Random association instances and the literal candidate filter.

use camradar_core::association::AssociationConfig;
use camradar_core::fusion::ImageProposal;
use camradar_core::geometry::{BBox3D, Vec3};
use camradar_core::SeededRng;
use rand::Rng;
use std::f64::consts::PI;

pub fn random_proposal(rng: &mut SeededRng, near_wrap: bool) -> ImageProposal {
    let r = rng.random_range(1.0..60.0);
    let phi = if near_wrap { PI + rng.random_range(-0.05..0.05) } else { rng.random_range(-PI..PI) };
    let center = Vec3::new(r * phi.cos(), r * phi.sin(), rng.random_range(0.0..2.0));
    let dims = [rng.random_range(0.5..3.0), rng.random_range(0.5..12.0), rng.random_range(1.0..4.0)];
    let bbox = BBox3D::new(center, dims, rng.random_range(-PI..PI), [0.0; 2]).unwrap();
    ImageProposal::for_box(bbox, rng.random_range(0.0..4.0))
}

pub fn random_points(rng: &mut SeededRng, n: usize, around: &[ImageProposal]) -> Vec<Vec3> {
    (0..n)
        .map(|i| {
            if i % 2 == 0 && !around.is_empty() {
                // Half the points near some proposal so lists are not empty.
                let c = around[rng.random_range(0..around.len())].bbox.center;
                c + Vec3::new(rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0), 0.0)
            } else {
                Vec3::new(rng.random_range(-70.0..70.0), rng.random_range(-70.0..70.0), rng.random_range(-1.0..3.0))
            }
        })
        .collect()
}

/// Azimuth of `p` measured from direction `phi_c`, via rotating the point.
fn azimuth_from(p: Vec3, phi_c: f64) -> f64 {
    let (s, c) = phi_c.sin_cos();
    (c * p.y - s * p.x).atan2(c * p.x + s * p.y)
}

/// Literal filter: strict corner-azimuth bounds (full circle when the span
/// exceeds a half turn or the box covers the origin) and the radial window
/// widened by gamma + sigma * r_c / delta.
pub fn oracle(props: &[ImageProposal], pts: &[Vec3], cfg: &AssociationConfig) -> Vec<Vec<usize>> {
    props
        .iter()
        .map(|prop| {
            let b = &prop.bbox;
            let phi_c = b.center.y.atan2(b.center.x);
            let corners = b.corners();
            let az: Vec<f64> = corners.iter().map(|c| azimuth_from(*c, phi_c)).collect();
            let rr: Vec<f64> = corners.iter().map(|c| c.x.hypot(c.y)).collect();
            let lo = az.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = az.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let rf = rr.iter().copied().fold(f64::INFINITY, f64::min);
            let rb = rr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let slack = cfg.gamma + prop.depth_var * 0.5 * (rf + rb) / cfg.delta;
            let full = hi - lo > PI || b.contains_bev(Vec3::ZERO, 0.0);
            let mut out = Vec::new();
            for (i, p) in pts.iter().enumerate() {
                let r = p.x.hypot(p.y);
                let a = azimuth_from(*p, phi_c);
                if (full || (lo < a && a < hi)) && rf - slack < r && r < rb + slack {
                    out.push(i);
                }
            }
            out
        })
        .collect()
}

/// Candidates of `instances` seeded instances (every fifth straddling the
/// ±π seam) compared with the literal filter; returns the first failing seed
/// and the total number of candidate pairs.
pub fn run_instances(instances: u64, cfg: &AssociationConfig) -> (Option<u64>, usize) {
    let mut total = 0;
    for seed in 0..instances {
        let mut rng = camradar_core::seeded_rng(seed);
        let m = rng.random_range(0..=64);
        let n = rng.random_range(0..=512);
        let props: Vec<ImageProposal> = (0..m).map(|_| random_proposal(&mut rng, seed % 5 == 0)).collect();
        let pts = random_points(&mut rng, n, &props);
        let got = camradar_core::association::soft_polar_candidates(&props, &pts, cfg);
        if got != oracle(&props, &pts, cfg) {
            return (Some(seed), total);
        }
        total += got.iter().map(Vec::len).sum::<usize>();
    }
    (None, total)
}
