//! Sensor error anisotropy and corpus determinism.

use camradar_core::geometry::{cart_to_polar, BBox3D, Pose, Vec3};
use camradar_core::pipeline::polar_errors;
use camradar_core::simulator::{render_radar, simulate_corpus, GtObject, Scene, SensorModel, SimConfig, TimedPose};

fn std_dev(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[test]
fn radar_is_radially_precise_and_azimuthally_coarse() {
    // A near-point target at 50 m so surface sampling adds almost no spread.
    let r0 = 50.0;
    let b = BBox3D::new(Vec3::new(r0, 0.0, 0.5), [0.02, 0.02, 0.02], 0.0, [0.0, 0.0]).unwrap();
    let scene = Scene {
        objects: vec![GtObject { bbox: b, class_id: 0 }],
        ego_trajectory: vec![TimedPose { pose: Pose::IDENTITY, timestamp: 0.0 }],
        cameras: Vec::new(),
    };
    let model = SensorModel { clutter_rate: 0.0, miss_prob_base: 0.0, returns_by_class: [50.0; 4], ..SensorModel::default() };
    let (mut radial, mut arc) = (Vec::new(), Vec::new());
    let mut seed = 0;
    while radial.len() < 2000 {
        for p in &render_radar(&scene, &model, seed).unwrap()[0].points {
            let pol = cart_to_polar(p.position);
            radial.push(pol.r - r0);
            arc.push(pol.phi * r0);
        }
        seed += 1;
    }
    let measured = std_dev(&radial) / std_dev(&arc);
    let configured = model.radar_radial_sigma / (model.radar_azimuth_sigma * r0);
    assert!((measured / configured - 1.0).abs() < 0.2, "measured {measured:.4}, configured {configured:.4}");
    assert!(measured < 0.25);
}

#[test]
fn camera_is_azimuthally_precise_and_radially_coarse() {
    let frames = simulate_corpus(&SimConfig::default(), 3, 60).unwrap();
    let (mut radial, mut arc) = (Vec::new(), Vec::new());
    for f in &frames {
        for (p, g) in f.proposals.iter().zip(&f.proposal_gt) {
            let Some(g) = g else { continue };
            let gt = &f.scene.objects[*g].bbox;
            if gt.center.bev_norm() > 30.0 {
                let (r, a) = polar_errors(&p.bbox, gt);
                radial.push(r);
                arc.push(a);
            }
        }
    }
    assert!(radial.len() > 200);
    let med = |v: &mut Vec<f64>| camradar_core::pipeline::median(v).unwrap();
    let (mr, ma) = (med(&mut radial), med(&mut arc));
    assert!(ma * 5.0 < mr, "beyond 30 m: median radial {mr:.3} m, median azimuthal {ma:.3} m");
}

#[test]
fn corpora_are_reproducible() {
    let cfg = SimConfig::default();
    let a = simulate_corpus(&cfg, 11, 5).unwrap();
    assert_eq!(a, simulate_corpus(&cfg, 11, 5).unwrap());
    assert_ne!(a, simulate_corpus(&cfg, 12, 5).unwrap());
}
