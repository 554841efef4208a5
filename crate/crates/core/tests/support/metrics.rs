//! Random detection instances and brute-force matching / AP.

use camradar_core::eval::{Detection, DetectionSource};
use camradar_core::geometry::{BBox3D, Vec3};
use camradar_core::seeded_rng;
use camradar_core::simulator::GtObject;
use rand::Rng;

pub const THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

pub fn bx(x: f64, y: f64) -> BBox3D {
    BBox3D::new(Vec3::new(x, y, 0.5), [1.0, 2.0, 1.0], 0.0, [0.0, 0.0]).unwrap()
}

pub fn random_instance(seed: u64) -> (Vec<Detection>, Vec<GtObject>) {
    let mut rng = seeded_rng(seed);
    let nd = rng.random_range(0..=10);
    let ng = rng.random_range(0..=10);
    // Quantized coordinates and scores so that ties actually occur.
    let coord = |rng: &mut camradar_core::SeededRng| f64::from(rng.random_range(0..24u8)) * 0.25;
    let gts = (0..ng).map(|_| GtObject { bbox: bx(coord(&mut rng), coord(&mut rng)), class_id: rng.random_range(0..2) }).collect();
    let dets = (0..nd)
        .map(|_| Detection {
            bbox: bx(coord(&mut rng), coord(&mut rng)),
            score: f64::from(rng.random_range(1..8u8)) / 8.0,
            class_id: rng.random_range(0..2),
            source: DetectionSource::Fused,
        })
        .collect();
    (dets, gts)
}

/// Repeatedly takes the best remaining detection (lowest index on ties) and
/// gives it the closest free same-class ground truth (lowest index on ties).
pub fn oracle_matches(dets: &[Detection], gts: &[GtObject], t: f64) -> Vec<(usize, Option<usize>)> {
    let mut done = vec![false; dets.len()];
    let mut taken = vec![false; gts.len()];
    let mut out = Vec::new();
    for _ in 0..dets.len() {
        let mut i = usize::MAX;
        for k in 0..dets.len() {
            if !done[k] && (i == usize::MAX || dets[k].score > dets[i].score) {
                i = k;
            }
        }
        done[i] = true;
        let candidates: Vec<(f64, usize)> = (0..gts.len())
            .filter(|&j| !taken[j] && gts[j].class_id == dets[i].class_id)
            .map(|j| {
                let (a, b) = (gts[j].bbox.center, dets[i].bbox.center);
                (((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt(), j)
            })
            .filter(|(d, _)| *d <= t)
            .collect();
        let best = candidates.iter().fold(None::<(f64, usize)>, |acc, c| match acc {
            Some(a) if a.0 <= c.0 => Some(a),
            _ => Some(*c),
        });
        if let Some((_, j)) = best {
            taken[j] = true;
        }
        out.push((i, best.map(|b| b.1)));
    }
    out
}

/// 101-point AP from every cut-off of the ranked list, recall floor 0.1 and
/// precision floor 0.1, with exact integer recall comparisons.
pub fn oracle_class_ap(ranked_tp: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let cutoffs: Vec<(usize, f64)> = (1..=ranked_tp.len())
        .map(|k| {
            let hits = ranked_tp[..k].iter().filter(|t| **t).count();
            (hits, hits as f64 / k as f64)
        })
        .collect();
    let mut total = 0.0;
    for i in 11..=100usize {
        let p = cutoffs.iter().filter(|(h, _)| h * 100 >= i * n_gt).map(|c| c.1).fold(0.0, f64::max);
        total += (p - 0.1).max(0.0);
    }
    Some(total / (90.0 * 0.9))
}

pub fn oracle_ap(dets: &[Detection], gts: &[GtObject], t: f64) -> Option<f64> {
    let m = oracle_matches(dets, gts, t);
    let aps: Vec<f64> = (0..2)
        .filter_map(|c| {
            let tp: Vec<bool> = m.iter().filter(|(i, _)| dets[*i].class_id == c).map(|(_, g)| g.is_some()).collect();
            oracle_class_ap(&tp, gts.iter().filter(|g| g.class_id == c).count())
        })
        .collect();
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Brute-force agreement on `oracle_instances` instances, then threshold
/// monotonicity and NMS idempotence on `invariant_instances` more. Returns a
/// description of the first failure.
pub fn check_metrics(oracle_instances: u64, invariant_instances: u64) -> Result<(), String> {
    use camradar_core::eval::{match_and_ap, nms_bev};
    for seed in 0..oracle_instances {
        let (dets, gts) = random_instance(seed);
        for t in THRESHOLDS {
            let got = match_and_ap(&dets, &gts, t, 0.1, 0.1);
            let want: Vec<(usize, usize)> = oracle_matches(&dets, &gts, t).into_iter().filter_map(|(i, g)| g.map(|j| (i, j))).collect();
            if got.pairs != want {
                return Err(format!("seed {seed} threshold {t}: pairs {:?} vs {want:?}", got.pairs));
            }
            let ok = match (got.ap, oracle_ap(&dets, &gts, t)) {
                (Some(a), Some(b)) => (a - b).abs() < 1e-12,
                (a, b) => a == b,
            };
            if !ok {
                return Err(format!("seed {seed} threshold {t}: AP differs"));
            }
        }
    }
    for seed in 1000..1000 + invariant_instances {
        let (dets, gts) = random_instance(seed);
        let aps: Vec<Option<f64>> = THRESHOLDS.iter().map(|t| match_and_ap(&dets, &gts, *t, 0.1, 0.1).ap).collect();
        for w in aps.windows(2) {
            if let (Some(a), Some(b)) = (w[0], w[1]) {
                if b < a - 1e-12 {
                    return Err(format!("seed {seed}: AP not monotone {aps:?}"));
                }
            }
        }
        let once = nms_bev(&dets, 0.5);
        if nms_bev(&once, 0.5) != once {
            return Err(format!("seed {seed}: NMS not idempotent"));
        }
    }
    Ok(())
}
