//! Image-to-radar and radar-to-image transformer encoders.

use alloc::format;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{bail, Result};
use crate::tensor::nn::{DeformableCrossAttention, LayerNorm, Linear, Mlp, MultiHeadCrossAttention};
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::SeededRng;

use super::FusionConfig;

struct I2rLayer {
    norm_attn: LayerNorm,
    attn: DeformableCrossAttention,
    norm_mlp: LayerNorm,
    mlp: Mlp,
}

/// Per-point pre-norm deformable attention over the point's own image patch,
/// followed by an in-box classifier on the final features.
pub struct I2rEncoder {
    layers: Vec<I2rLayer>,
    aux: Mlp,
    /// Reference pixel inside every patch.
    pub reference: [f64; 2],
}

impl I2rEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &FusionConfig, rng: &mut SeededRng) -> Result<Self> {
        let c = cfg.width;
        let layers = (0..cfg.i2r_layers)
            .map(|l| {
                Ok(I2rLayer {
                    norm_attn: LayerNorm::new(store, &format!("{name}.{l}.norm_attn"), c),
                    attn: DeformableCrossAttention::new(
                        store,
                        &format!("{name}.{l}.attn"),
                        c,
                        cfg.image_channels,
                        cfg.heads,
                        cfg.sampling_points,
                        rng,
                    )?,
                    norm_mlp: LayerNorm::new(store, &format!("{name}.{l}.norm_mlp"), c),
                    mlp: Mlp::new(store, &format!("{name}.{l}.mlp"), c, cfg.mlp_hidden, c, rng),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let aux = Mlp::new(store, &format!("{name}.aux"), c, cfg.mlp_hidden, 1, rng);
        let m = cfg.patch.center();
        Ok(Self { layers, aux, reference: [m, m] })
    }

    /// `x: [n, C]` point features, `patches: [u, s, s, C_img]`, point `i` reads
    /// patch `patch_index[i]`. Returns encoded features and in-box logits `[n, 1]`.
    pub fn forward(&self, g: &mut Graph, x: Var, patches: Var, patch_index: &[usize]) -> Result<(Var, Var)> {
        let n = g.value(x).rows();
        if patch_index.len() != n {
            bail!(Shape, "{n} points with {} patch indices", patch_index.len());
        }
        let refs = alloc::vec![self.reference; n];
        let mut x = x;
        for layer in &self.layers {
            let h = layer.norm_attn.forward(g, x)?;
            let a = layer.attn.forward(g, h, &refs, patches, patch_index)?;
            x = g.add(x, a)?;
            let h = layer.norm_mlp.forward(g, x)?;
            let m = layer.mlp.forward(g, h)?;
            x = g.add(x, m)?;
        }
        let logits = self.aux.forward(g, x)?;
        Ok((x, logits))
    }
}

struct R2iLayer {
    norm_q: LayerNorm,
    norm_kv: LayerNorm,
    attn: MultiHeadCrossAttention,
    norm_mlp: LayerNorm,
    mlp: Mlp,
}

/// Proposal queries attending to their associated radar points, with learned
/// embeddings of positions relative to the proposal center.
pub struct R2iEncoder {
    input: Linear,
    pos: Mlp,
    layers: Vec<R2iLayer>,
    width: usize,
}

impl R2iEncoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &FusionConfig, rng: &mut SeededRng) -> Result<Self> {
        let c = cfg.width;
        let input = Linear::new(store, &format!("{name}.input"), cfg.image_channels, c, true, rng);
        let pos = Mlp::new(store, &format!("{name}.pos"), 2, cfg.mlp_hidden, c, rng);
        let layers = (0..cfg.r2i_layers)
            .map(|l| {
                Ok(R2iLayer {
                    norm_q: LayerNorm::new(store, &format!("{name}.{l}.norm_q"), c),
                    norm_kv: LayerNorm::new(store, &format!("{name}.{l}.norm_kv"), c),
                    attn: MultiHeadCrossAttention::new(store, &format!("{name}.{l}.attn"), c, cfg.heads, cfg.zero_sink, rng)?,
                    norm_mlp: LayerNorm::new(store, &format!("{name}.{l}.norm_mlp"), c),
                    mlp: Mlp::new(store, &format!("{name}.{l}.mlp"), c, cfg.mlp_hidden, c, rng),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { input, pos, layers, width: c })
    }

    /// `proposals: [m, C_img]`, `radar: [p, C]` point features listed per
    /// proposal, `rel: [p, 2]` scaled relative positions, proposal `i` reads
    /// rows `segments[i]`. Returns refined proposal features `[m, C]`.
    pub fn forward(&self, g: &mut Graph, proposals: Var, radar: Var, rel: &Tensor, segments: &[Range<usize>]) -> Result<Var> {
        let m = g.value(proposals).rows();
        let p = g.value(radar).rows();
        if segments.len() != m || rel.shape() != [p, 2] {
            bail!(Shape, "r2i with {m} proposals, {} segments, {p} points, rel {:?}", segments.len(), rel.shape());
        }
        if segments.iter().any(|s| s.start > s.end || s.end > p) {
            bail!(Shape, "r2i segment out of {p} rows");
        }
        let mut x = self.input.forward(g, proposals)?;
        // The query sits at the proposal center: relative position (0, 0).
        let origin = g.constant(Tensor::zeros(&[1, 2]));
        let pe_q = self.pos.forward(g, origin)?;
        let pe_q = g.reshape(pe_q, &[self.width])?;
        let rel = g.constant(rel.clone());
        let pe_kv = self.pos.forward(g, rel)?;
        for layer in &self.layers {
            let q = layer.norm_q.forward(g, x)?;
            let q = g.add_bias(q, pe_q)?;
            let kv = layer.norm_kv.forward(g, radar)?;
            let kv = g.add(kv, pe_kv)?;
            let a = layer.attn.forward(g, q, kv, segments)?;
            x = g.add(x, a)?;
            let h = layer.norm_mlp.forward(g, x)?;
            let h = layer.mlp.forward(g, h)?;
            x = g.add(x, h)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use alloc::vec;
    use rand::Rng;

    fn small_cfg() -> FusionConfig {
        FusionConfig {
            width: 8,
            heads: 2,
            i2r_layers: 2,
            r2i_layers: 2,
            mlp_hidden: 6,
            sampling_points: 2,
            image_channels: 3,
            ..FusionConfig::desk()
        }
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn i2r_zero_patches_leave_only_the_mlp_path() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let enc = I2rEncoder::new(&mut store, "i2r", &cfg, &mut seeded_rng(1)).unwrap();
        let mut g = Graph::new(&store);
        let x0 = g.constant(rand_tensor(&[3, 8], 2));
        let patches = g.constant(Tensor::zeros(&[3, 7, 7, 3]));
        let (y, logits) = enc.forward(&mut g, x0, patches, &[0, 1, 2]).unwrap();
        // Hand trace: zero patches make each attention return its output bias.
        let mut x = x0;
        for layer in &enc.layers {
            let b = g.param(layer.attn.out.b.unwrap());
            x = g.add_bias(x, b).unwrap();
            let h = layer.norm_mlp.forward(&mut g, x).unwrap();
            let h = layer.mlp.forward(&mut g, h).unwrap();
            x = g.add(x, h).unwrap();
        }
        for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let probs: Vec<f64> = g.value(logits).data().iter().map(|l| 1.0 / (1.0 + (-l).exp())).collect();
        assert!(probs.iter().all(|p| *p > 0.0 && *p < 1.0));
    }

    #[test]
    fn i2r_is_per_point() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let enc = I2rEncoder::new(&mut store, "i2r", &cfg, &mut seeded_rng(3)).unwrap();
        let mut g = Graph::new(&store);
        let x = rand_tensor(&[3, 8], 4);
        let patches = g.constant(rand_tensor(&[2, 7, 7, 3], 5));
        let xv = g.constant(x.clone());
        let (y, _) = enc.forward(&mut g, xv, patches, &[0, 1, 1]).unwrap();
        let perm = [2, 0, 1];
        let xp = g.constant(Tensor::from_rows(&perm.map(|i| x.row(i)), 8).unwrap());
        let (yp, _) = enc.forward(&mut g, xp, patches, &[1, 0, 1]).unwrap();
        for (r, &i) in perm.iter().enumerate() {
            assert_eq!(g.value(yp).row(r), g.value(y).row(i));
        }
    }

    #[test]
    fn r2i_empty_segments_follow_the_residual_path() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let enc = R2iEncoder::new(&mut store, "r2i", &cfg, &mut seeded_rng(6)).unwrap();
        let mut g = Graph::new(&store);
        let props = g.constant(rand_tensor(&[2, 3], 7));
        let radar = g.constant(Tensor::zeros(&[0, 8]));
        let y = enc.forward(&mut g, props, radar, &Tensor::zeros(&[0, 2]), &[0..0, 0..0]).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 8]);
        assert!(g.value(y).is_finite());
        let mut x = enc.input.forward(&mut g, props).unwrap();
        for layer in &enc.layers {
            let b = g.param(layer.attn.o.b.unwrap());
            x = g.add_bias(x, b).unwrap();
            let h = layer.norm_mlp.forward(&mut g, x).unwrap();
            let h = layer.mlp.forward(&mut g, h).unwrap();
            x = g.add(x, h).unwrap();
        }
        for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn r2i_duplicated_points_without_sink() {
        let cfg = FusionConfig { zero_sink: false, ..small_cfg() };
        let mut store = ParamStore::new();
        let enc = R2iEncoder::new(&mut store, "r2i", &cfg, &mut seeded_rng(8)).unwrap();
        let mut g = Graph::new(&store);
        let props = g.constant(rand_tensor(&[1, 3], 9));
        let radar = rand_tensor(&[3, 8], 10);
        let rel = rand_tensor(&[3, 2], 11);
        let rv = g.constant(radar.clone());
        let y = enc.forward(&mut g, props, rv, &rel, &[0..3]).unwrap();
        let dup = |t: &Tensor| {
            let rows: Vec<&[f64]> = (0..6).map(|i| t.row(i % 3)).collect();
            Tensor::from_rows(&rows, t.cols()).unwrap()
        };
        let rd = g.constant(dup(&radar));
        let yd = enc.forward(&mut g, props, rd, &dup(&rel), &[0..6]).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(yd).data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn r2i_segments_isolate_proposals() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let enc = R2iEncoder::new(&mut store, "r2i", &cfg, &mut seeded_rng(12)).unwrap();
        let mut g = Graph::new(&store);
        let props = rand_tensor(&[2, 3], 13);
        let radar = rand_tensor(&[5, 8], 14);
        let rel = rand_tensor(&[5, 2], 15);
        let (pv, rv) = (g.constant(props.clone()), g.constant(radar.clone()));
        let both = enc.forward(&mut g, pv, rv, &rel, &[0..2, 2..5]).unwrap();
        let p1 = g.constant(Tensor::from_rows(&[props.row(1)], 3).unwrap());
        let r1 = g.constant(Tensor::from_rows(&[radar.row(2), radar.row(3), radar.row(4)], 8).unwrap());
        let rel1 = Tensor::from_rows(&[rel.row(2), rel.row(3), rel.row(4)], 2).unwrap();
        let one = enc.forward(&mut g, p1, r1, &rel1, &[0..3]).unwrap();
        for (a, b) in g.value(both).row(1).iter().zip(g.value(one).row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(vec![2, 8], g.value(both).shape());
    }
}
