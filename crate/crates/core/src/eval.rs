//! Center-distance matching, average precision, BEV NMS and binned reports.
//!
//! Detections match ground truth greedily in descending score order: each
//! detection takes the closest unmatched ground truth of its class within the
//! BEV center-distance threshold. AP is the mean over 101 recall points of the
//! interpolated precision (the best precision at any recall at or above the
//! point), keeping only recall points above `min_recall` and rescaling
//! precision above `min_precision`, following the nuScenes definition.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // inherent float methods shadow it when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::geometry::BBox3D;
use crate::simulator::GtObject;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionSource {
    Fused,
    CameraOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox3D,
    pub score: f64,
    pub class_id: usize,
    pub source: DetectionSource,
}

/// Matching and AP settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub thresholds: Vec<f64>,
    /// Threshold at which translation / velocity errors are averaged.
    pub tp_threshold: f64,
    pub min_recall: f64,
    pub min_precision: f64,
    pub nms_distance: f64,
    /// Upper edges of the ground-truth distance bins (m).
    pub distance_edges: Vec<f64>,
    /// Lower edges of the on-object radar point-count bins.
    pub point_edges: Vec<usize>,
    /// Footprint margin used when counting radar points on an object (m).
    pub point_margin: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![0.5, 1.0, 2.0, 4.0],
            tp_threshold: 2.0,
            min_recall: 0.1,
            min_precision: 0.1,
            nms_distance: 0.5,
            distance_edges: vec![20.0, 35.0, 55.0],
            point_edges: vec![0, 1, 3, 6],
            point_margin: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() || self.thresholds.iter().any(|t| !(*t > 0.0)) || !(self.tp_threshold > 0.0) {
            bail!(Config, "matching thresholds must be positive");
        }
        if !(0.0..1.0).contains(&self.min_recall) || !(0.0..1.0).contains(&self.min_precision) {
            bail!(Config, "min recall / precision must lie in [0, 1)");
        }
        if !(self.nms_distance > 0.0) {
            bail!(Config, "NMS distance must be positive");
        }
        if self.distance_edges.windows(2).any(|w| w[0] >= w[1]) || self.point_edges.windows(2).any(|w| w[0] >= w[1]) {
            bail!(Config, "bin edges must increase");
        }
        Ok(())
    }

    pub fn distance_labels(&self) -> Vec<String> {
        let mut lo = 0.0;
        self.distance_edges
            .iter()
            .map(|hi| {
                let l = format!("{lo}-{hi}m");
                lo = *hi;
                l
            })
            .collect()
    }

    pub fn point_labels(&self) -> Vec<String> {
        self.point_edges
            .iter()
            .enumerate()
            .map(|(i, lo)| match self.point_edges.get(i + 1) {
                Some(hi) if *hi == lo + 1 => format!("{lo}pts"),
                Some(hi) => format!("{lo}-{}pts", hi - 1),
                None => format!("{lo}+pts"),
            })
            .collect()
    }

    fn distance_bin(&self, d: f64) -> Option<usize> {
        self.distance_edges.iter().position(|hi| d < *hi)
    }

    fn point_bin(&self, n: usize) -> Option<usize> {
        self.point_edges.iter().rposition(|lo| n >= *lo)
    }
}

/// Greedy class-wise non-maximum suppression on BEV center distance.
pub fn nms_bev(dets: &[Detection], dist_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|a, b| dets[*b].score.total_cmp(&dets[*a].score));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &dets[i];
        if kept.iter().all(|k| k.class_id != d.class_id || k.bbox.center.bev_distance(d.bbox.center) >= dist_threshold) {
            kept.push(*d);
        }
    }
    kept
}

/// Outcome of greedy matching at one threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    /// Detection indices by descending score (stable).
    pub order: Vec<usize>,
    /// Matched ground truth of each detection (indexed like the input).
    pub matched: Vec<Option<usize>>,
}

pub fn greedy_match(dets: &[Detection], gts: &[GtObject], threshold: f64) -> Matching {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|a, b| dets[*b].score.total_cmp(&dets[*a].score));
    let mut taken = vec![false; gts.len()];
    let mut matched = vec![None; dets.len()];
    for &i in &order {
        let d = &dets[i];
        let mut best: Option<(f64, usize)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.class_id != d.class_id {
                continue;
            }
            let dist = g.bbox.center.bev_distance(d.bbox.center);
            if dist <= threshold && best.is_none_or(|(b, _)| dist < b) {
                best = Some((dist, j));
            }
        }
        if let Some((_, j)) = best {
            taken[j] = true;
            matched[i] = Some(j);
        }
    }
    Matching { order, matched }
}

/// AP from detections ranked by descending score (`tp` flags) against `n_gt`
/// ground truths; `None` when there is no ground truth.
pub fn average_precision(tp: &[bool], n_gt: usize, min_recall: f64, min_precision: f64) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(tp.len());
    for (k, t) in tp.iter().enumerate() {
        hits += usize::from(*t);
        curve.push((hits as f64 / n_gt as f64, hits as f64 / (k + 1) as f64));
    }
    // Precision envelope from the right.
    let mut best = 0.0f64;
    let mut envelope = vec![0.0; curve.len()];
    for (e, (_, p)) in envelope.iter_mut().zip(&curve).rev() {
        best = best.max(*p);
        *e = best;
    }
    let first = (100.0 * min_recall).round() as usize + 1;
    let mut sum = 0.0;
    let mut j = 0;
    for i in first..=100 {
        let r = i as f64 / 100.0;
        while j < curve.len() && curve[j].0 < r - 1e-12 {
            j += 1;
        }
        let p = if j < curve.len() { envelope[j] } else { 0.0 };
        sum += (p - min_precision).max(0.0);
    }
    Some((sum / ((101 - first) as f64 * (1.0 - min_precision))).clamp(0.0, 1.0))
}

/// AP of one frame at one threshold (mean over classes with ground truth)
/// with the matched `(detection, ground truth)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchAp {
    pub ap: Option<f64>,
    pub pairs: Vec<(usize, usize)>,
}

pub fn match_and_ap(dets: &[Detection], gts: &[GtObject], threshold: f64, min_recall: f64, min_precision: f64) -> MatchAp {
    let m = greedy_match(dets, gts, threshold);
    let classes = dets.iter().map(|d| d.class_id).chain(gts.iter().map(|g| g.class_id)).max().map_or(0, |c| c + 1);
    let aps = (0..classes).filter_map(|c| {
        let tp: Vec<bool> = m.order.iter().filter(|&&i| dets[i].class_id == c).map(|&i| m.matched[i].is_some()).collect();
        average_precision(&tp, gts.iter().filter(|g| g.class_id == c).count(), min_recall, min_precision)
    });
    let pairs = m.order.iter().filter_map(|&i| m.matched[i].map(|j| (i, j))).collect();
    MatchAp { ap: mean(aps), pairs }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct ClassPool {
    scored: Vec<(f64, bool)>,
    n_gt: usize,
}

/// AP of one threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAp {
    pub threshold: f64,
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes with ground truth.
    pub mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    pub per_threshold: Vec<ThresholdAp>,
    pub mean_ap: Option<f64>,
    /// Mean BEV center error of true positives (m).
    pub ate: Option<f64>,
    /// Mean BEV velocity error of true positives (m/s).
    pub ave: Option<f64>,
    pub num_gt: usize,
    pub num_det: usize,
}

impl ApSummary {
    pub fn ap_at(&self, threshold: f64) -> Option<f64> {
        self.per_threshold.iter().find(|t| t.threshold == threshold).and_then(|t| t.mean)
    }
}

/// Pools matches across frames for AP computed over the whole set.
#[derive(Clone, Debug)]
pub struct Accumulator {
    cfg: EvalConfig,
    num_classes: usize,
    pools: Vec<Vec<ClassPool>>,
    trans_err: Vec<f64>,
    vel_err: Vec<f64>,
    num_det: usize,
    num_gt: usize,
}

impl Accumulator {
    pub fn new(cfg: &EvalConfig, num_classes: usize) -> Self {
        Self {
            cfg: cfg.clone(),
            num_classes,
            pools: vec![vec![ClassPool::default(); num_classes]; cfg.thresholds.len()],
            trans_err: Vec::new(),
            vel_err: Vec::new(),
            num_det: 0,
            num_gt: 0,
        }
    }

    pub fn add_frame(&mut self, dets: &[Detection], gts: &[GtObject]) -> Result<()> {
        if let Some(c) = dets.iter().map(|d| d.class_id).chain(gts.iter().map(|g| g.class_id)).find(|c| *c >= self.num_classes) {
            bail!(InvalidInput, "class {c} out of {}", self.num_classes);
        }
        self.num_det += dets.len();
        self.num_gt += gts.len();
        for (ti, &t) in self.cfg.thresholds.iter().enumerate() {
            let m = greedy_match(dets, gts, t);
            for g in gts {
                self.pools[ti][g.class_id].n_gt += 1;
            }
            for &i in &m.order {
                self.pools[ti][dets[i].class_id].scored.push((dets[i].score, m.matched[i].is_some()));
            }
        }
        let m = greedy_match(dets, gts, self.cfg.tp_threshold);
        for &i in &m.order {
            if let Some(j) = m.matched[i] {
                let (d, g) = (&dets[i].bbox, &gts[j].bbox);
                self.trans_err.push(d.center.bev_distance(g.center));
                let dv = [d.velocity[0] - g.velocity[0], d.velocity[1] - g.velocity[1]];
                self.vel_err.push(dv[0].hypot(dv[1]));
            }
        }
        Ok(())
    }

    pub fn summary(&self) -> ApSummary {
        let per_threshold: Vec<ThresholdAp> = self
            .cfg
            .thresholds
            .iter()
            .zip(&self.pools)
            .map(|(&threshold, pools)| {
                let per_class: Vec<Option<f64>> = pools
                    .iter()
                    .map(|p| {
                        let mut s = p.scored.clone();
                        s.sort_by(|a, b| b.0.total_cmp(&a.0));
                        let tp: Vec<bool> = s.iter().map(|x| x.1).collect();
                        average_precision(&tp, p.n_gt, self.cfg.min_recall, self.cfg.min_precision)
                    })
                    .collect();
                ThresholdAp { threshold, mean: mean(per_class.iter().flatten().copied()), per_class }
            })
            .collect();
        let mean_ap = if per_threshold.iter().all(|t| t.mean.is_some()) {
            mean(per_threshold.iter().filter_map(|t| t.mean))
        } else {
            None
        };
        ApSummary {
            per_threshold,
            mean_ap,
            ate: mean(self.trans_err.iter().copied()),
            ave: mean(self.vel_err.iter().copied()),
            num_gt: self.num_gt,
            num_det: self.num_det,
        }
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Detections and ground truth of one frame, with the number of radar points
/// found on each ground-truth object.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalFrame {
    pub dets: Vec<Detection>,
    pub gts: Vec<GtObject>,
    pub gt_points: Vec<usize>,
}

/// Number of `points` inside each box's footprint widened by `margin`.
pub fn points_on_objects(gts: &[GtObject], points: &[crate::geometry::Vec3], margin: f64) -> Vec<usize> {
    gts.iter().map(|g| points.iter().filter(|p| g.bbox.contains_bev(**p, margin)).count()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: ApSummary,
    pub by_distance: Vec<(String, ApSummary)>,
    pub by_points: Vec<(String, ApSummary)>,
}

/// Index of the same-class ground truth nearest to `d`.
fn nearest_gt(d: &Detection, gts: &[GtObject]) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (j, g) in gts.iter().enumerate().filter(|(_, g)| g.class_id == d.class_id) {
        let dist = g.bbox.center.bev_distance(d.bbox.center);
        if best.is_none_or(|(b, _)| dist < b) {
            best = Some((dist, j));
        }
    }
    best.map(|b| b.1)
}

/// Overall and binned AP. Ground truth falls in bins by its own range or
/// point count; each detection follows its nearest same-class ground truth
/// (or, without one, its own range and the zero-point bin).
pub fn evaluate(frames: &[EvalFrame], cfg: &EvalConfig, num_classes: usize) -> Result<MetricsReport> {
    cfg.validate()?;
    let mut overall = Accumulator::new(cfg, num_classes);
    let mut dist = vec![Accumulator::new(cfg, num_classes); cfg.distance_edges.len()];
    let mut pts = vec![Accumulator::new(cfg, num_classes); cfg.point_edges.len()];
    for f in frames {
        if f.gt_points.len() != f.gts.len() {
            bail!(Shape, "{} point counts for {} ground truths", f.gt_points.len(), f.gts.len());
        }
        overall.add_frame(&f.dets, &f.gts)?;
        let gt_dist: Vec<Option<usize>> = f.gts.iter().map(|g| cfg.distance_bin(g.bbox.center.bev_norm())).collect();
        let gt_pts: Vec<Option<usize>> = f.gt_points.iter().map(|n| cfg.point_bin(*n)).collect();
        let det_bins: Vec<(Option<usize>, Option<usize>)> = f
            .dets
            .iter()
            .map(|d| match nearest_gt(d, &f.gts) {
                Some(j) => (gt_dist[j], gt_pts[j]),
                None => (cfg.distance_bin(d.bbox.center.bev_norm()), cfg.point_bin(0)),
            })
            .collect();
        for (b, acc) in dist.iter_mut().enumerate() {
            let gts: Vec<GtObject> = f.gts.iter().zip(&gt_dist).filter(|(_, x)| **x == Some(b)).map(|(g, _)| *g).collect();
            let dets: Vec<Detection> = f.dets.iter().zip(&det_bins).filter(|(_, x)| x.0 == Some(b)).map(|(d, _)| *d).collect();
            acc.add_frame(&dets, &gts)?;
        }
        for (b, acc) in pts.iter_mut().enumerate() {
            let gts: Vec<GtObject> = f.gts.iter().zip(&gt_pts).filter(|(_, x)| **x == Some(b)).map(|(g, _)| *g).collect();
            let dets: Vec<Detection> = f.dets.iter().zip(&det_bins).filter(|(_, x)| x.1 == Some(b)).map(|(d, _)| *d).collect();
            acc.add_frame(&dets, &gts)?;
        }
    }
    Ok(MetricsReport {
        overall: overall.summary(),
        by_distance: cfg.distance_labels().into_iter().zip(dist.iter().map(Accumulator::summary)).collect(),
        by_points: cfg.point_labels().into_iter().zip(pts.iter().map(Accumulator::summary)).collect(),
    })
}

impl MetricsReport {
    /// `(name, bin, value)` rows; undefined values are `None`.
    pub fn rows(&self) -> Vec<(String, String, Option<f64>)> {
        let mut out = Vec::new();
        let mut push = |bin: &str, s: &ApSummary| {
            for t in &s.per_threshold {
                out.push((format!("ap@{}", t.threshold), String::from(bin), t.mean));
            }
            out.push((String::from("map"), String::from(bin), s.mean_ap));
            out.push((String::from("ate"), String::from(bin), s.ate));
            out.push((String::from("ave"), String::from(bin), s.ave));
            out.push((String::from("num_gt"), String::from(bin), Some(s.num_gt as f64)));
            out.push((String::from("num_det"), String::from(bin), Some(s.num_det as f64)));
        };
        push("all", &self.overall);
        for (l, s) in &self.by_distance {
            push(&format!("distance:{l}"), s);
        }
        for (l, s) in &self.by_points {
            push(&format!("points:{l}"), s);
        }
        for t in &self.overall.per_threshold {
            for (c, ap) in t.per_class.iter().enumerate() {
                let name = crate::simulator::CLASS_NAMES.get(c).copied().unwrap_or("class");
                out.push((format!("ap@{}", t.threshold), format!("class:{name}"), *ap));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    fn bx(x: f64, y: f64) -> BBox3D {
        BBox3D::new(Vec3::new(x, y, 0.8), [1.9, 4.5, 1.6], 0.0, [0.0, 0.0]).unwrap()
    }

    fn det(x: f64, y: f64, score: f64, class_id: usize) -> Detection {
        Detection { bbox: bx(x, y), score, class_id, source: DetectionSource::Fused }
    }

    fn gt(x: f64, y: f64) -> GtObject {
        GtObject { bbox: bx(x, y), class_id: 0 }
    }

    fn ap(dets: &[Detection], gts: &[GtObject], t: f64) -> Option<f64> {
        let m = greedy_match(dets, gts, t);
        let tp: Vec<bool> = m.order.iter().map(|&i| m.matched[i].is_some()).collect();
        average_precision(&tp, gts.len(), 0.1, 0.1)
    }

    #[test]
    fn single_close_detection_is_perfect() {
        for t in [0.5, 1.0, 2.0, 4.0] {
            assert_eq!(ap(&[det(10.3, 0.0, 0.9, 0)], &[gt(10.0, 0.0)], t), Some(1.0));
        }
    }

    #[test]
    fn trailing_false_positive_keeps_full_ap() {
        let dets = [det(10.0, 0.0, 0.9, 0), det(30.0, 0.0, 0.8, 0)];
        assert_eq!(ap(&dets, &[gt(10.0, 0.0)], 1.0), Some(1.0));
        assert_eq!(ap(&[], &[gt(10.0, 0.0)], 1.0), Some(0.0));
        assert_eq!(ap(&dets, &[], 1.0), None);
    }

    #[test]
    fn leading_false_positive_halves_precision() {
        let dets = [det(30.0, 0.0, 0.95, 0), det(10.0, 0.0, 0.9, 0)];
        // Precision 0.5 at every recall point: (0.5 - 0.1) / 0.9.
        let a = ap(&dets, &[gt(10.0, 0.0)], 1.0).unwrap();
        assert!((a - 0.4 / 0.9).abs() < 1e-12);
    }

    #[test]
    fn nms_cases() {
        let kept = nms_bev(&[det(10.0, 0.0, 0.5, 0), det(10.1, 0.0, 0.9, 0)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        assert_eq!(nms_bev(&[det(10.0, 0.0, 0.5, 0), det(20.0, 0.0, 0.9, 0)], 0.5).len(), 2);
        assert_eq!(nms_bev(&[det(10.0, 0.0, 0.5, 0), det(10.0, 0.0, 0.9, 1)], 0.5).len(), 2);
    }

    #[test]
    fn tp_errors_at_two_metres() {
        let cfg = EvalConfig::default();
        let mut acc = Accumulator::new(&cfg, 2);
        let mut d = det(11.5, 0.0, 0.9, 0);
        d.bbox.velocity = [3.0, 4.0];
        acc.add_frame(&[d], &[gt(10.0, 0.0)]).unwrap();
        let s = acc.summary();
        assert!((s.ate.unwrap() - 1.5).abs() < 1e-12);
        assert!((s.ave.unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(s.ap_at(0.5), Some(0.0));
        assert_eq!(s.ap_at(2.0), Some(1.0));
    }

    #[test]
    fn empty_input_gives_empty_report() {
        let r = evaluate(&[], &EvalConfig::default(), 4).unwrap();
        assert_eq!(r.overall.mean_ap, None);
        assert_eq!(r.by_distance.len(), 3);
        assert_eq!(r.by_points.iter().map(|x| x.0.as_str()).collect::<Vec<_>>(), ["0pts", "1-2pts", "3-5pts", "6+pts"]);
        assert_eq!(r.by_distance[0].0, "0-20m");
    }

    #[test]
    fn bins_route_ground_truth_and_detections() {
        let frame = EvalFrame {
            dets: vec![det(10.2, 0.0, 0.9, 0), det(40.0, 0.0, 0.8, 0)],
            gts: vec![gt(10.0, 0.0), gt(41.0, 0.0)],
            gt_points: vec![7, 0],
        };
        let r = evaluate(&[frame], &EvalConfig::default(), 1).unwrap();
        assert_eq!(r.by_distance[0].1.ap_at(0.5), Some(1.0));
        assert_eq!(r.by_distance[2].1.ap_at(0.5), Some(0.0));
        assert_eq!(r.by_distance[2].1.ap_at(2.0), Some(1.0));
        assert_eq!(r.by_distance[1].1.num_gt, 0);
        assert_eq!(r.by_points[3].1.ap_at(0.5), Some(1.0));
        assert_eq!(r.by_points[0].1.ap_at(0.5), Some(0.0));
    }
}
