//! Parameterized layers built on [`Graph`] operations.

use alloc::format;
use alloc::vec::Vec;
use core::ops::Range;

#[allow(unused_imports)] // inherent float methods shadow it when std is linked
use num_traits::Float;
use rand::Rng;

use super::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{bail, Result};
use crate::SeededRng;

/// `y = x W + b` with `W: [fan_in, fan_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Uniform init in `±1/sqrt(fan_in)` for weights and bias.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut uniform = |n: usize| (0..n).map(|_| rng.random_range(-bound..bound)).collect::<Vec<f64>>();
        let w = Tensor::new(&[fan_in, fan_out], uniform(fan_in * fan_out)).expect("sized");
        let w = store.add(&format!("{name}.w"), w);
        let b = bias.then(|| store.add(&format!("{name}.b"), Tensor::new(&[fan_out], uniform(fan_out)).expect("sized")));
        Self { w, b, fan_in, fan_out }
    }

    /// All-zero weights and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let w = store.add(&format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
        let b = bias.then(|| store.add(&format!("{name}.b"), Tensor::zeros(&[fan_out])));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gain = store.add(&format!("{name}.gain"), Tensor::full(&[width], 1.0));
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[width]));
        Self { gain, bias, eps: 1e-5 }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(self.gain), g.param(self.bias));
        g.layer_norm(x, gain, bias, self.eps)
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, hidden: usize, fan_out: usize, rng: &mut SeededRng) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.fc1"), fan_in, hidden, true, rng),
            l2: Linear::new(store, &format!("{name}.fc2"), hidden, fan_out, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, x)?;
        let h = g.relu(h);
        self.l2.forward(g, h)
    }
}

/// Multi-head cross-attention with learned query/key/value/output projections.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadCrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub zero_sink: bool,
}

impl MultiHeadCrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, zero_sink: bool, rng: &mut SeededRng) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            bail!(Config, "width {width} is not divisible by {heads} heads");
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), width, width, true, rng),
            k: Linear::new(store, &format!("{name}.k"), width, width, true, rng),
            v: Linear::new(store, &format!("{name}.v"), width, width, true, rng),
            o: Linear::new(store, &format!("{name}.o"), width, width, true, rng),
            heads,
            zero_sink,
        })
    }

    /// Query row `i` attends to `kv` rows `segments[i]`.
    pub fn forward(&self, g: &mut Graph, query: Var, kv: Var, segments: &[Range<usize>]) -> Result<Var> {
        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, kv)?;
        let v = self.v.forward(g, kv)?;
        let a = g.attention(q, k, v, segments, self.heads, self.zero_sink)?;
        self.o.forward(g, a)
    }

    /// Every query attends to every key.
    pub fn forward_dense(&self, g: &mut Graph, query: Var, kv: Var) -> Result<Var> {
        let lk = g.value(kv).rows();
        let segs = alloc::vec![0..lk; g.value(query).rows()];
        self.forward(g, query, kv, &segs)
    }
}

/// Single-scale deformable cross-attention over per-query feature maps.
///
/// Sampling offsets and weight logits are predicted from the query by
/// zero-initialized linears, so the first pass samples every point at the
/// reference. Each head aggregates the raw map channels and then applies its
/// own bias-free value projection (bilinear sampling commutes with a
/// bias-free linear map), followed by the shared output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformableCrossAttention {
    pub offsets: Linear,
    pub logits: Linear,
    pub values: Vec<Linear>,
    pub out: Linear,
    pub heads: usize,
    pub points: usize,
}

impl DeformableCrossAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        map_channels: usize,
        heads: usize,
        points: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 || points == 0 {
            bail!(Config, "deformable attention needs width % heads == 0 and points >= 1");
        }
        let dh = width / heads;
        Ok(Self {
            offsets: Linear::zeros(store, &format!("{name}.offsets"), width, heads * points * 2, true),
            logits: Linear::zeros(store, &format!("{name}.logits"), width, heads * points, true),
            values: (0..heads)
                .map(|h| Linear::new(store, &format!("{name}.value{h}"), map_channels, dh, false, rng))
                .collect(),
            out: Linear::new(store, &format!("{name}.out"), width, width, true, rng),
            heads,
            points,
        })
    }

    /// `query: [n, width]`, `refs[i]`: reference `(x, y)` in map pixels,
    /// `maps: [g, h, w, map_channels]`, query `i` reads map `map_index[i]`.
    /// Returns the output and the normalized sampling weights `[n, heads * points]`.
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        query: Var,
        refs: &[[f64; 2]],
        maps: Var,
        map_index: &[usize],
    ) -> Result<(Var, Var)> {
        let n = g.value(query).rows();
        if refs.len() != n || map_index.len() != n {
            bail!(Shape, "{n} queries with {} refs and {} map indices", refs.len(), map_index.len());
        }
        let hp = self.heads * self.points;
        let off = self.offsets.forward(g, query)?;
        let mut base = Vec::with_capacity(n * hp * 2);
        for r in refs {
            for _ in 0..hp {
                base.extend_from_slice(r);
            }
        }
        let base = g.constant(Tensor::new(&[n, hp * 2], base)?);
        let locs = g.add(off, base)?;
        let logits = self.logits.forward(g, query)?;
        let per_head = g.reshape(logits, &[n * self.heads, self.points])?;
        let w = g.softmax_rows(per_head);
        let w = g.reshape(w, &[n, hp])?;
        let agg = g.deform_aggregate(maps, map_index, locs, w, self.heads, self.points)?;
        let cm = g.value(maps).shape()[3];
        let mut heads = Vec::with_capacity(self.heads);
        for (h, proj) in self.values.iter().enumerate() {
            let part = g.slice_cols(agg, h * cm..(h + 1) * cm)?;
            heads.push(proj.forward(g, part)?);
        }
        let cat = g.concat_cols(&heads)?;
        Ok((self.out.forward(g, cat)?, w))
    }

    pub fn forward(&self, g: &mut Graph, query: Var, refs: &[[f64; 2]], maps: Var, map_index: &[usize]) -> Result<Var> {
        Ok(self.forward_with_weights(g, query, refs, maps, map_index)?.0)
    }
}
