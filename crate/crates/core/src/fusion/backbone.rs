//! Set-abstraction radar point encoder without subsampling.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::geometry::Vec3;
use crate::tensor::nn::{LayerNorm, Linear};
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::SeededRng;

/// One grouping stage: ball radius, neighbors per ball and MLP widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaStage {
    pub radius: f64,
    pub nsample: usize,
    pub mlp: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stages: Vec<SaStage>,
}

impl Default for BackboneConfig {
    /// Four stages with growing radii; widths end at 256 before the output
    /// projection.
    fn default() -> Self {
        let st = |radius, nsample, mlp: &[usize]| SaStage { radius, nsample, mlp: mlp.to_vec() };
        Self {
            stages: alloc::vec![
                st(0.4, 4, &[16, 16, 32]),
                st(0.8, 4, &[32, 32, 64]),
                st(1.2, 8, &[64, 128, 128]),
                st(1.6, 8, &[128, 256, 256]),
            ],
        }
    }
}

impl BackboneConfig {
    pub fn desk() -> Self {
        let st = |radius, nsample, mlp: &[usize]| SaStage { radius, nsample, mlp: mlp.to_vec() };
        Self { stages: alloc::vec![st(0.8, 4, &[16, 32]), st(1.6, 8, &[32, 32])] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            bail!(Config, "backbone needs at least one stage");
        }
        for s in &self.stages {
            if !(s.radius > 0.0) || s.nsample == 0 || s.mlp.is_empty() || s.mlp.contains(&0) {
                bail!(Config, "invalid backbone stage {s:?}");
            }
        }
        Ok(())
    }
}

/// Indices of the first `nsample` points (in index order) within `radius` of
/// `positions[center]`, padded by repeating the first hit.
pub fn ball_query(positions: &[Vec3], center: usize, radius: f64, nsample: usize) -> Vec<usize> {
    let c = positions[center];
    let r2 = radius * radius;
    let mut out: Vec<usize> = Vec::with_capacity(nsample);
    for (j, p) in positions.iter().enumerate() {
        let d = *p - c;
        if d.dot(d) <= r2 {
            out.push(j);
            if out.len() == nsample {
                break;
            }
        }
    }
    let first = out[0];
    out.resize(nsample, first);
    out
}

struct Stage {
    cfg: SaStage,
    layers: Vec<(Linear, LayerNorm)>,
}

/// Stacked set abstraction: every point is a ball center at every stage.
/// Grouped inputs are `(neighbor - center) / radius` concatenated with the
/// neighbor's features, passed through Linear-LayerNorm-ReLU layers and
/// max-pooled over the ball. A final linear maps to the fusion width.
pub struct RadarBackbone {
    stages: Vec<Stage>,
    proj: Linear,
}

impl RadarBackbone {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &BackboneConfig, in_features: usize, out: usize, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        let mut width = in_features;
        let mut stages = Vec::new();
        for (s, st) in cfg.stages.iter().enumerate() {
            let mut layers = Vec::new();
            let mut fan_in = width + 3;
            for (l, &w) in st.mlp.iter().enumerate() {
                let lin = Linear::new(store, &format!("{name}.sa{s}.fc{l}"), fan_in, w, true, rng);
                let ln = LayerNorm::new(store, &format!("{name}.sa{s}.ln{l}"), w);
                layers.push((lin, ln));
                fan_in = w;
            }
            width = fan_in;
            stages.push(Stage { cfg: st.clone(), layers });
        }
        let proj = Linear::new(store, &format!("{name}.proj"), width, out, true, rng);
        Ok(Self { stages, proj })
    }

    /// Features for the points listed in `wanted` (`[wanted.len(), out]`),
    /// computing only the neighborhoods they depend on.
    pub fn encode(&self, g: &mut Graph, positions: &[Vec3], features: &Tensor, wanted: &[usize]) -> Result<Var> {
        if features.rows() != positions.len() {
            bail!(Shape, "{} feature rows for {} points", features.rows(), positions.len());
        }
        if positions.is_empty() {
            bail!(InvalidInput, "backbone needs at least one point");
        }
        if let Some(bad) = wanted.iter().find(|&&i| i >= positions.len()) {
            bail!(Shape, "point {bad} out of {}", positions.len());
        }
        // Centers needed at each stage, last stage first.
        let n_st = self.stages.len();
        let mut centers: Vec<Vec<usize>> = alloc::vec![Vec::new(); n_st];
        let mut groups: Vec<Vec<Vec<usize>>> = alloc::vec![Vec::new(); n_st];
        let mut need: Vec<usize> = wanted.to_vec();
        need.sort_unstable();
        need.dedup();
        for s in (0..n_st).rev() {
            let st = &self.stages[s].cfg;
            let nb: Vec<Vec<usize>> = need.iter().map(|&c| ball_query(positions, c, st.radius, st.nsample)).collect();
            let mut prev: Vec<usize> = nb.iter().flatten().copied().collect();
            prev.sort_unstable();
            prev.dedup();
            centers[s] = core::mem::replace(&mut need, prev);
            groups[s] = nb;
        }

        // `need` now lists the raw rows the first stage reads.
        let mut rows: BTreeMap<usize, usize> = need.iter().enumerate().map(|(r, &i)| (i, r)).collect();
        let raw: Vec<&[f64]> = need.iter().map(|&i| features.row(i)).collect();
        let mut prev = g.constant(Tensor::from_rows(&raw, features.cols())?);
        for (s, stage) in self.stages.iter().enumerate() {
            let ns = stage.cfg.nsample;
            let mut idx = Vec::with_capacity(centers[s].len() * ns);
            let mut rel = Vec::with_capacity(centers[s].len() * ns * 3);
            for (c, nb) in centers[s].iter().zip(&groups[s]) {
                for &j in nb {
                    idx.push(rows[&j]);
                    let d = (positions[j] - positions[*c]) * (1.0 / stage.cfg.radius);
                    rel.extend_from_slice(&[d.x, d.y, d.z]);
                }
            }
            let gathered = g.gather_rows(prev, &idx)?;
            let rel = g.constant(Tensor::new(&[idx.len(), 3], rel)?);
            let mut h = g.concat_cols(&[rel, gathered])?;
            for (lin, ln) in &stage.layers {
                h = lin.forward(g, h)?;
                h = ln.forward(g, h)?;
                h = g.relu(h);
            }
            prev = g.group_max(h, ns)?;
            rows = centers[s].iter().enumerate().map(|(r, &i)| (i, r)).collect();
        }
        let order: Vec<usize> = wanted.iter().map(|i| rows[i]).collect();
        let picked = g.gather_rows(prev, &order)?;
        self.proj.forward(g, picked)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use alloc::vec;

    fn setup() -> (ParamStore, RadarBackbone) {
        let mut store = ParamStore::new();
        let bb = RadarBackbone::new(&mut store, "bb", &BackboneConfig::desk(), 4, 8, &mut seeded_rng(5)).unwrap();
        (store, bb)
    }

    fn feats(rows: &[[f64; 4]]) -> Tensor {
        Tensor::from_rows(rows, 4).unwrap()
    }

    #[test]
    fn ball_query_pads_with_first_hit() {
        let pts = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(5.0, 0.0, 0.0), Vec3::new(0.3, 0.0, 0.0)];
        assert_eq!(ball_query(&pts, 2, 0.5, 4), vec![0, 2, 0, 0]);
        assert_eq!(ball_query(&pts, 1, 0.5, 3), vec![1, 1, 1]);
    }

    #[test]
    fn duplicates_get_identical_features() {
        let (store, bb) = setup();
        let pos = vec![Vec3::new(1.0, 2.0, 0.0), Vec3::new(1.5, 2.2, 0.1), Vec3::new(1.0, 2.0, 0.0), Vec3::new(9.0, 0.0, 0.0)];
        let f = feats(&[[0.1, 0.2, -0.3, 1.0], [0.5, -0.1, 0.0, 0.0], [0.1, 0.2, -0.3, 1.0], [1.0, 1.0, 1.0, 1.0]]);
        let mut g = Graph::new(&store);
        let y = bb.encode(&mut g, &pos, &f, &[0, 1, 2, 3]).unwrap();
        let t = g.value(y);
        assert_eq!(t.row(0), t.row(2));
        assert_ne!(t.row(0), t.row(1));
    }

    #[test]
    fn isolated_points_are_independent() {
        let (store, bb) = setup();
        let pos = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(20.0, 0.0, 0.0)];
        let f1 = feats(&[[0.1, 0.2, 0.3, 0.4], [1.0, 0.0, 0.0, 0.0]]);
        let f2 = feats(&[[0.1, 0.2, 0.3, 0.4], [-3.0, 2.0, 1.0, 0.5]]);
        let mut g = Graph::new(&store);
        let a = bb.encode(&mut g, &pos, &f1, &[0, 1]).unwrap();
        let b = bb.encode(&mut g, &pos, &f2, &[0, 1]).unwrap();
        assert_eq!(g.value(a).row(0), g.value(b).row(0));
        assert_ne!(g.value(a).row(1), g.value(b).row(1));
        // A single point sees only itself.
        let c = bb.encode(&mut g, &pos[..1], &feats(&[[0.1, 0.2, 0.3, 0.4]]), &[0]).unwrap();
        assert_eq!(g.value(a).row(0), g.value(c).row(0));
    }

    #[test]
    fn subset_matches_full_evaluation() {
        let (store, bb) = setup();
        let mut rng = seeded_rng(9);
        use rand::Rng;
        let pos: Vec<Vec3> = (0..60)
            .map(|_| Vec3::new(rng.random_range(0.0..6.0), rng.random_range(0.0..6.0), rng.random_range(-0.5..0.5)))
            .collect();
        let rows: Vec<[f64; 4]> = (0..60).map(|_| core::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let f = feats(&rows);
        let all: Vec<usize> = (0..60).collect();
        let mut g = Graph::new(&store);
        let full = bb.encode(&mut g, &pos, &f, &all).unwrap();
        let sub = bb.encode(&mut g, &pos, &f, &[17, 3, 42]).unwrap();
        for (r, i) in [17, 3, 42].iter().enumerate() {
            assert_eq!(g.value(sub).row(r), g.value(full).row(*i));
        }
    }
}
