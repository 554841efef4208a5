use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

#[allow(unused_imports)] // inherent float methods shadow it when std is linked
use num_traits::Float;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{bail, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    SoftmaxRows(Var),
    SliceCols(Var, Range<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    GroupMax { x: Var, arg: Vec<usize> },
    Reshape(Var),
    Bilinear { map: Var, locs: Var },
    Deform(Box<DeformOp>),
    Attention(Box<AttentionOp>),
    SelectGroup { x: Var, groups: Vec<usize>, width: usize },
    Sum(Var),
    Bce { x: Var, target: Vec<f64>, weight: Vec<f64> },
    L1 { x: Var, target: Vec<f64>, weight: Vec<f64> },
}

struct DeformOp {
    values: Var,
    locs: Var,
    weights: Var,
    map_index: Vec<usize>,
    heads: usize,
    points: usize,
}

struct AttentionOp {
    q: Var,
    k: Var,
    v: Var,
    segments: Vec<Range<usize>>,
    heads: usize,
    /// Softmax weights per (query, head), sink weight last when present.
    weights: Vec<Vec<f64>>,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Operation tape over a borrowed parameter store.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: BTreeMap<ParamId, Var>,
}

/// Gradients of one backward pass, per node and per parameter.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to a node, `None` when it does not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|(_, v)| self.wrt(*v))
    }

    /// Adds every parameter gradient into the store's `grad` buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, v) in &self.params {
            if let Some(g) = self.wrt(*v) {
                for (a, b) in store.get_mut(*id).grad.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        bail!(Shape, "{what}: {:?} vs {:?}", a.shape(), b.shape());
    }
    Ok(())
}

fn add_into(dst: &mut Option<Tensor>, src: &[f64], shape: &[usize]) {
    match dst {
        Some(t) => t.data_mut().iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(Tensor { shape: shape.to_vec(), data: src.to_vec() }),
    }
}

/// Row-major `[n, k] x [k, m]`.
fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Row-major `[n, m] x [k, m]^T`.
fn matmul_bt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let ar = &a[i * m..(i + 1) * m];
        for j in 0..k {
            out[i * k + j] = ar.iter().zip(&b[j * m..(j + 1) * m]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// Row-major `[n, k]^T x [n, m]`.
fn matmul_at(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let br = &b[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out[p * m..(p + 1) * m].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bilinear taps around continuous pixel `(x, y)`: `(row, col, weight)` for
/// the in-bounds neighbors plus the partial derivatives of each weight.
fn bilinear_taps(h: usize, w: usize, x: f64, y: f64) -> [(usize, usize, f64, f64, f64, bool); 4] {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let mut taps = [(0, 0, 0.0, 0.0, 0.0, false); 4];
    let corners = [
        (0.0, 0.0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
        (1.0, 0.0, fx * (1.0 - fy), 1.0 - fy, -fx),
        (0.0, 1.0, (1.0 - fx) * fy, -fy, 1.0 - fx),
        (1.0, 1.0, fx * fy, fy, fx),
    ];
    for (t, (dx, dy, wt, dwx, dwy)) in taps.iter_mut().zip(corners) {
        let cx = x0 + dx;
        let cy = y0 + dy;
        let inside = cx >= 0.0 && cy >= 0.0 && cx < w as f64 && cy < h as f64;
        if inside {
            *t = (cy as usize, cx as usize, wt, dwx, dwy, true);
        }
    }
    taps
}

/// Samples `map` (`[h, w, c]`, row-major) at continuous pixel `(x, y)`
/// (x = column, y = row) with zero padding, adding `scale * sample` to `out`.
fn sample_into(map: &[f64], h: usize, w: usize, c: usize, x: f64, y: f64, scale: f64, out: &mut [f64]) {
    if !(x > -1.0 && y > -1.0 && x < w as f64 && y < h as f64) {
        return;
    }
    for (r, col, wt, _, _, inside) in bilinear_taps(h, w, x, y) {
        if inside && wt != 0.0 {
            let cell = &map[(r * w + col) * c..(r * w + col + 1) * c];
            let f = scale * wt;
            out.iter_mut().zip(cell).for_each(|(o, v)| *o += f * v);
        }
    }
}

/// Backward of [`sample_into`] for upstream gradient `g` (length `c`):
/// returns `(d/dx, d/dy)` and accumulates into `dmap` when given.
#[allow(clippy::too_many_arguments)]
fn sample_backward(
    map: &[f64],
    h: usize,
    w: usize,
    c: usize,
    x: f64,
    y: f64,
    scale: f64,
    g: &[f64],
    mut dmap: Option<&mut [f64]>,
) -> (f64, f64) {
    if !(x > -1.0 && y > -1.0 && x < w as f64 && y < h as f64) {
        return (0.0, 0.0);
    }
    let mut gx = 0.0;
    let mut gy = 0.0;
    for (r, col, wt, dwx, dwy, inside) in bilinear_taps(h, w, x, y) {
        if !inside {
            continue;
        }
        let off = (r * w + col) * c;
        let dot: f64 = g.iter().zip(&map[off..off + c]).map(|(a, b)| a * b).sum();
        gx += scale * dwx * dot;
        gy += scale * dwy * dot;
        if let Some(dm) = dmap.as_deref_mut() {
            let f = scale * wt;
            dm[off..off + c].iter_mut().zip(g).for_each(|(d, gv)| *d += f * gv);
        }
    }
    (gx, gy)
}

/// Bilinear sample of a `[h, w, c]` map at continuous pixel `(x, y)`;
/// out-of-bounds neighbors contribute zero.
pub fn bilinear_sample(map: &Tensor, x: f64, y: f64) -> Result<Vec<f64>> {
    if map.shape().len() != 3 {
        bail!(Shape, "bilinear_sample expects [h, w, c], got {:?}", map.shape());
    }
    let (h, w, c) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let mut out = vec![0.0; c];
    sample_into(map.data(), h, w, c, x, y, 1.0, &mut out);
    Ok(out)
}

/// Per-(query, head) softmax weights of segmented multi-head attention.
///
/// Query row `i` attends to key rows `segments[i]`; with `zero_sink` one
/// all-zero key (logit 0) is appended, its weight stored last.
pub fn attention_weights(
    q: &Tensor,
    k: &Tensor,
    segments: &[Range<usize>],
    heads: usize,
    zero_sink: bool,
) -> Result<Vec<Vec<f64>>> {
    let c = q.cols();
    if heads == 0 || c % heads != 0 {
        bail!(Config, "width {c} is not divisible by {heads} heads");
    }
    if k.cols() != c {
        bail!(Shape, "query width {c} but key width {}", k.cols());
    }
    if segments.len() != q.rows() {
        bail!(Shape, "{} segments for {} queries", segments.len(), q.rows());
    }
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Vec::with_capacity(q.rows() * heads);
    for (i, seg) in segments.iter().enumerate() {
        if seg.end > k.rows() || seg.start > seg.end {
            bail!(Shape, "segment {seg:?} outside {} keys", k.rows());
        }
        let qi = q.row(i);
        for h in 0..heads {
            let qh = &qi[h * dh..(h + 1) * dh];
            let mut s: Vec<f64> = seg
                .clone()
                .map(|j| scale * qh.iter().zip(&k.row(j)[h * dh..(h + 1) * dh]).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            if zero_sink {
                s.push(0.0);
            }
            softmax_in_place(&mut s);
            out.push(s);
        }
    }
    Ok(out)
}

fn softmax_in_place(s: &mut [f64]) {
    if s.is_empty() {
        return;
    }
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in s.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    s.iter_mut().for_each(|v| *v /= z);
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_vars: BTreeMap::new() }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input whose gradient can be read back.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The node for a stored parameter; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let t = self.store.value(id).clone();
        let v = self.push(t, Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    /// `[.., k] x [k, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 2 || ta.cols() != tb.shape()[0] {
            bail!(Shape, "matmul {:?} x {:?}", ta.shape(), tb.shape());
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        let data = matmul(ta.data(), tb.data(), n, k, m);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor { shape, data }, Op::MatMul(a, b), ng))
    }

    /// Adds a `[m]` vector to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tb.len() != tx.cols() {
            bail!(Shape, "bias of length {} for width {}", tb.len(), tx.cols());
        }
        let m = tx.cols();
        let mut data = tx.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += tb.data()[i % m];
        }
        let shape = tx.shape().to_vec();
        let ng = self.ng(&[x, b]);
        Ok(self.push(Tensor { shape, data }, Op::AddBias(x, b), ng))
    }

    fn elementwise(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, what: &str) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, what)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let shape = ta.shape().to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor { shape, data }, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| f(*v)).collect();
        let shape = t.shape().to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor { shape, data }, op, ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Per-row normalization followed by `gain * x_hat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = tx.cols();
        if c == 0 || tg.len() != c || tb.len() != c {
            bail!(Shape, "layer_norm width {c} with gain {} and bias {}", tg.len(), tb.len());
        }
        let n = tx.rows();
        let mut xhat = vec![0.0; n * c];
        let mut rstd = vec![0.0; n];
        let mut data = vec![0.0; n * c];
        for i in 0..n {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..c {
                let xh = (row[j] - mean) * r;
                xhat[i * c + j] = xh;
                data[i * c + j] = tg.data()[j] * xh + tb.data()[j];
            }
        }
        let shape = tx.shape().to_vec();
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(Tensor { shape, data }, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.cols();
        let mut data = t.data().to_vec();
        if c > 0 {
            data.chunks_mut(c).for_each(softmax_in_place);
        }
        let shape = t.shape().to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor { shape, data }, Op::SoftmaxRows(x), ng)
    }

    pub fn slice_cols(&mut self, x: Var, range: Range<usize>) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if range.end > c || range.start > range.end {
            bail!(Shape, "column slice {range:?} of width {c}");
        }
        let w = range.len();
        let mut data = Vec::with_capacity(t.rows() * w);
        for i in 0..t.rows() {
            data.extend_from_slice(&t.row(i)[range.clone()]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = w;
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor { shape, data }, Op::SliceCols(x, range), ng))
    }

    /// Concatenates 2-D blocks with equal row counts along columns.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(first) = xs.first() else { bail!(Shape, "concat of nothing") };
        let n = self.value(*first).rows();
        let widths: Vec<usize> = xs.iter().map(|v| self.value(*v).cols()).collect();
        if xs.iter().any(|v| self.value(*v).rows() != n) {
            bail!(Shape, "concat_cols with differing row counts");
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for v in xs {
                data.extend_from_slice(self.value(*v).row(i));
            }
        }
        let ng = self.ng(xs);
        Ok(self.push(Tensor { shape: vec![n, total], data }, Op::ConcatCols(xs.to_vec()), ng))
    }

    /// Stacks 2-D blocks with equal widths along rows.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(first) = xs.first() else { bail!(Shape, "concat of nothing") };
        let c = self.value(*first).cols();
        if xs.iter().any(|v| self.value(*v).cols() != c) {
            bail!(Shape, "concat_rows with differing widths");
        }
        let mut data = Vec::new();
        for v in xs {
            data.extend_from_slice(self.value(*v).data());
        }
        let n = data.len() / c.max(1);
        let ng = self.ng(xs);
        Ok(self.push(Tensor { shape: vec![n, c], data }, Op::ConcatRows(xs.to_vec()), ng))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if let Some(bad) = idx.iter().find(|&&i| i >= t.rows()) {
            bail!(Shape, "row {bad} out of {}", t.rows());
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor { shape: vec![idx.len(), c], data }, Op::GatherRows(x, idx.to_vec()), ng))
    }

    /// Column-wise max over consecutive groups of `group` rows.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        if group == 0 || t.rows() % group != 0 {
            bail!(Shape, "{} rows do not split into groups of {group}", t.rows());
        }
        let n = t.rows() / group;
        let mut data = vec![f64::NEG_INFINITY; n * c];
        let mut arg = vec![0usize; n * c];
        for g in 0..n {
            for s in 0..group {
                let r = g * group + s;
                for (j, v) in t.row(r).iter().enumerate() {
                    if *v > data[g * c + j] {
                        data[g * c + j] = *v;
                        arg[g * c + j] = r;
                    }
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor { shape: vec![n, c], data }, Op::GroupMax { x, arg }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Samples a `[h, w, c]` map at `[n, 2]` continuous `(x, y)` pixel locations.
    pub fn bilinear(&mut self, map: Var, locs: Var) -> Result<Var> {
        let (tm, tl) = (self.value(map), self.value(locs));
        if tm.shape().len() != 3 || tl.cols() != 2 {
            bail!(Shape, "bilinear on map {:?} at {:?}", tm.shape(), tl.shape());
        }
        let (h, w, c) = (tm.shape()[0], tm.shape()[1], tm.shape()[2]);
        let n = tl.rows();
        let mut data = vec![0.0; n * c];
        for i in 0..n {
            let l = tl.row(i);
            sample_into(tm.data(), h, w, c, l[0], l[1], 1.0, &mut data[i * c..(i + 1) * c]);
        }
        let ng = self.ng(&[map, locs]);
        Ok(self.push(Tensor { shape: vec![n, c], data }, Op::Bilinear { map, locs }, ng))
    }

    /// Deformable aggregation.
    ///
    /// `values` is `[g, h, w, c]`; query `n` reads map `map_index[n]` at
    /// `heads * points` locations (`locs`: `[n, heads * points * 2]`, `(x, y)`
    /// pairs) and mixes them with `weights` (`[n, heads * points]`). The
    /// result is `[n, heads * c]`, head-major.
    pub fn deform_aggregate(
        &mut self,
        values: Var,
        map_index: &[usize],
        locs: Var,
        weights: Var,
        heads: usize,
        points: usize,
    ) -> Result<Var> {
        let (tv, tl, tw) = (self.value(values), self.value(locs), self.value(weights));
        if tv.shape().len() != 4 {
            bail!(Shape, "deformable values must be [g, h, w, c], got {:?}", tv.shape());
        }
        let (g, h, w, c) = (tv.shape()[0], tv.shape()[1], tv.shape()[2], tv.shape()[3]);
        let n = map_index.len();
        let hp = heads * points;
        if tl.len() != n * hp * 2 || tw.len() != n * hp {
            bail!(Shape, "deformable locs {:?} / weights {:?} for {n} queries x {hp} samples", tl.shape(), tw.shape());
        }
        if map_index.iter().any(|&m| m >= g) {
            bail!(Shape, "map index out of {g} maps");
        }
        let msz = h * w * c;
        let mut data = vec![0.0; n * heads * c];
        for (qi, &mi) in map_index.iter().enumerate() {
            let map = &tv.data()[mi * msz..(mi + 1) * msz];
            for hd in 0..heads {
                let out = &mut data[(qi * heads + hd) * c..(qi * heads + hd + 1) * c];
                for p in 0..points {
                    let s = qi * hp + hd * points + p;
                    let (x, y) = (tl.data()[2 * s], tl.data()[2 * s + 1]);
                    sample_into(map, h, w, c, x, y, tw.data()[s], out);
                }
            }
        }
        let ng = self.ng(&[values, locs, weights]);
        let op = DeformOp { values, locs, weights, map_index: map_index.to_vec(), heads, points };
        Ok(self.push(Tensor { shape: vec![n, heads * c], data }, Op::Deform(Box::new(op)), ng))
    }

    /// Segmented multi-head scaled dot-product attention on projected
    /// queries, keys and values; query row `i` attends to key rows
    /// `segments[i]`, plus an all-zero key/value when `zero_sink` is set.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Range<usize>],
        heads: usize,
        zero_sink: bool,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        same_shape(tk, tv, "attention keys/values")?;
        let weights = attention_weights(tq, tk, segments, heads, zero_sink)?;
        let c = tq.cols();
        let dh = c / heads;
        let n = tq.rows();
        let mut data = vec![0.0; n * c];
        for (i, seg) in segments.iter().enumerate() {
            for h in 0..heads {
                let a = &weights[i * heads + h];
                let out = &mut data[i * c + h * dh..i * c + (h + 1) * dh];
                for (j, aj) in seg.clone().zip(a) {
                    out.iter_mut().zip(&tv.row(j)[h * dh..(h + 1) * dh]).for_each(|(o, x)| *o += aj * x);
                }
            }
        }
        let ng = self.ng(&[q, k, v]);
        let op = AttentionOp { q, k, v, segments: segments.to_vec(), heads, weights };
        Ok(self.push(Tensor { shape: vec![n, c], data }, Op::Attention(Box::new(op)), ng))
    }

    /// Row `i` keeps columns `groups[i] * width .. (groups[i] + 1) * width`.
    pub fn select_group(&mut self, x: Var, groups: &[usize], width: usize) -> Result<Var> {
        let t = self.value(x);
        if groups.len() != t.rows() || groups.iter().any(|g| (g + 1) * width > t.cols()) {
            bail!(Shape, "group selection of width {width} from {:?}", t.shape());
        }
        let mut data = Vec::with_capacity(groups.len() * width);
        for (i, g) in groups.iter().enumerate() {
            data.extend_from_slice(&t.row(i)[g * width..(g + 1) * width]);
        }
        let ng = self.ng(&[x]);
        let op = Op::SelectGroup { x, groups: groups.to_vec(), width };
        Ok(self.push(Tensor { shape: vec![groups.len(), width], data }, op, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// `sum_i weight_i * BCE(sigmoid(x_i), target_i)`, computed from logits.
    pub fn bce_with_logits(&mut self, x: Var, target: &[f64], weight: &[f64]) -> Result<Var> {
        let t = self.value(x);
        if target.len() != t.len() || weight.len() != t.len() {
            bail!(Shape, "bce over {} logits with {} targets / {} weights", t.len(), target.len(), weight.len());
        }
        let s = t
            .data()
            .iter()
            .zip(target)
            .zip(weight)
            .map(|((x, y), w)| w * (x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()))
            .sum();
        let ng = self.ng(&[x]);
        let op = Op::Bce { x, target: target.to_vec(), weight: weight.to_vec() };
        Ok(self.push(Tensor::scalar(s), op, ng))
    }

    /// `sum_i weight_i * |x_i - target_i|`.
    pub fn l1(&mut self, x: Var, target: &[f64], weight: &[f64]) -> Result<Var> {
        let t = self.value(x);
        if target.len() != t.len() || weight.len() != t.len() {
            bail!(Shape, "l1 over {} values with {} targets / {} weights", t.len(), target.len(), weight.len());
        }
        let s = t.data().iter().zip(target).zip(weight).map(|((x, y), w)| w * (x - y).abs()).sum();
        let ng = self.ng(&[x]);
        let op = Op::L1 { x, target: target.to_vec(), weight: weight.to_vec() };
        Ok(self.push(Tensor::scalar(s), op, ng))
    }

    /// Reverse pass from a one-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            bail!(Usage, "backward needs a scalar loss, got shape {:?}", lt.shape());
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor { shape: lt.shape().to_vec(), data: vec![1.0] });
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if self.nodes[idx].needs_grad {
                self.backprop(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let params = self.param_vars.iter().map(|(p, v)| (*p, *v)).collect();
        Ok(Gradients { nodes: grads, params })
    }

    fn backprop(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        let wants = |v: &Var| self.nodes[v.0].needs_grad;
        let shape_of = |v: &Var| self.nodes[v.0].value.shape().to_vec();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                if wants(a) {
                    let da = matmul_bt(gd, tb.data(), n, m, k);
                    add_into(&mut grads[a.0], &da, ta.shape());
                }
                if wants(b) {
                    let db = matmul_at(ta.data(), gd, n, k, m);
                    add_into(&mut grads[b.0], &db, tb.shape());
                }
            }
            Op::AddBias(x, b) => {
                if wants(x) {
                    add_into(&mut grads[x.0], gd, &shape_of(x));
                }
                if wants(b) {
                    let m = self.value(*b).len();
                    let mut db = vec![0.0; m];
                    for (i, v) in gd.iter().enumerate() {
                        db[i % m] += v;
                    }
                    add_into(&mut grads[b.0], &db, &shape_of(b));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        add_into(&mut grads[v.0], gd, &shape_of(v));
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    add_into(&mut grads[a.0], gd, &shape_of(a));
                }
                if wants(b) {
                    let neg: Vec<f64> = gd.iter().map(|v| -v).collect();
                    add_into(&mut grads[b.0], &neg, &shape_of(b));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if wants(a) {
                    let d: Vec<f64> = gd.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    add_into(&mut grads[a.0], &d, ta.shape());
                }
                if wants(b) {
                    let d: Vec<f64> = gd.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    add_into(&mut grads[b.0], &d, tb.shape());
                }
            }
            Op::Scale(x, s) => {
                let d: Vec<f64> = gd.iter().map(|v| v * s).collect();
                add_into(&mut grads[x.0], &d, &shape_of(x));
            }
            Op::Relu(x) => {
                let d: Vec<f64> = gd
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                add_into(&mut grads[x.0], &d, &shape_of(x));
            }
            Op::Sigmoid(x) => {
                let d: Vec<f64> = gd.iter().zip(node.value.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                add_into(&mut grads[x.0], &d, &shape_of(x));
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = node.value.cols();
                let n = node.value.rows();
                let tg = self.value(*gain).data();
                if wants(gain) || wants(bias) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for i in 0..n {
                        for j in 0..c {
                            dg[j] += gd[i * c + j] * xhat[i * c + j];
                            db[j] += gd[i * c + j];
                        }
                    }
                    if wants(gain) {
                        add_into(&mut grads[gain.0], &dg, &shape_of(gain));
                    }
                    if wants(bias) {
                        add_into(&mut grads[bias.0], &db, &shape_of(bias));
                    }
                }
                if wants(x) {
                    let mut dx = vec![0.0; n * c];
                    for i in 0..n {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dxh = gd[i * c + j] * tg[j];
                            m1 += dxh;
                            m2 += dxh * xhat[i * c + j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let dxh = gd[i * c + j] * tg[j];
                            dx[i * c + j] = rstd[i] * (dxh - m1 - xhat[i * c + j] * m2);
                        }
                    }
                    add_into(&mut grads[x.0], &dx, &shape_of(x));
                }
            }
            Op::SoftmaxRows(x) => {
                let c = node.value.cols();
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for i in 0..node.value.rows() {
                    let r = i * c..(i + 1) * c;
                    let dot: f64 = gd[r.clone()].iter().zip(&y[r.clone()]).map(|(a, b)| a * b).sum();
                    for j in r {
                        dx[j] = y[j] * (gd[j] - dot);
                    }
                }
                add_into(&mut grads[x.0], &dx, &shape_of(x));
            }
            Op::SliceCols(x, range) => {
                let t = self.value(*x);
                let c = t.cols();
                let w = range.len();
                let mut dx = vec![0.0; t.len()];
                for i in 0..t.rows() {
                    dx[i * c + range.start..i * c + range.end].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                add_into(&mut grads[x.0], &dx, t.shape());
            }
            Op::ConcatCols(xs) => {
                let total = node.value.cols();
                let mut off = 0;
                for v in xs {
                    let t = self.value(*v);
                    let w = t.cols();
                    if wants(v) {
                        let mut dx = Vec::with_capacity(t.len());
                        for i in 0..t.rows() {
                            dx.extend_from_slice(&gd[i * total + off..i * total + off + w]);
                        }
                        add_into(&mut grads[v.0], &dx, t.shape());
                    }
                    off += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for v in xs {
                    let t = self.value(*v);
                    if wants(v) {
                        add_into(&mut grads[v.0], &gd[off..off + t.len()], t.shape());
                    }
                    off += t.len();
                }
            }
            Op::GatherRows(x, idx) => {
                let t = self.value(*x);
                let c = t.cols();
                let mut dx = vec![0.0; t.len()];
                for (r, &i) in idx.iter().enumerate() {
                    dx[i * c..(i + 1) * c].iter_mut().zip(&gd[r * c..(r + 1) * c]).for_each(|(d, g)| *d += g);
                }
                add_into(&mut grads[x.0], &dx, t.shape());
            }
            Op::GroupMax { x, arg } => {
                let t = self.value(*x);
                let c = t.cols();
                let mut dx = vec![0.0; t.len()];
                for (o, &r) in arg.iter().enumerate() {
                    dx[r * c + o % c] += gd[o];
                }
                add_into(&mut grads[x.0], &dx, t.shape());
            }
            Op::Reshape(x) => add_into(&mut grads[x.0], gd, &shape_of(x)),
            Op::Bilinear { map, locs } => {
                let (tm, tl) = (self.value(*map), self.value(*locs));
                let (h, w, c) = (tm.shape()[0], tm.shape()[1], tm.shape()[2]);
                let mut dmap = wants(map).then(|| vec![0.0; tm.len()]);
                let mut dl = vec![0.0; tl.len()];
                for i in 0..tl.rows() {
                    let l = tl.row(i);
                    let (gx, gy) =
                        sample_backward(tm.data(), h, w, c, l[0], l[1], 1.0, &gd[i * c..(i + 1) * c], dmap.as_deref_mut());
                    dl[2 * i] = gx;
                    dl[2 * i + 1] = gy;
                }
                if let Some(dm) = dmap {
                    add_into(&mut grads[map.0], &dm, tm.shape());
                }
                if wants(locs) {
                    add_into(&mut grads[locs.0], &dl, tl.shape());
                }
            }
            Op::Deform(op) => self.deform_backward(op, gd, grads),
            Op::Attention(op) => self.attention_backward(op, gd, grads),
            Op::SelectGroup { x, groups, width } => {
                let t = self.value(*x);
                let c = t.cols();
                let mut dx = vec![0.0; t.len()];
                for (i, g) in groups.iter().enumerate() {
                    dx[i * c + g * width..i * c + (g + 1) * width].copy_from_slice(&gd[i * width..(i + 1) * width]);
                }
                add_into(&mut grads[x.0], &dx, t.shape());
            }
            Op::Sum(x) => {
                let t = self.value(*x);
                add_into(&mut grads[x.0], &vec![gd[0]; t.len()], t.shape());
            }
            Op::Bce { x, target, weight } => {
                let t = self.value(*x);
                let d: Vec<f64> = t
                    .data()
                    .iter()
                    .zip(target)
                    .zip(weight)
                    .map(|((x, y), w)| gd[0] * w * (sigmoid(*x) - y))
                    .collect();
                add_into(&mut grads[x.0], &d, t.shape());
            }
            Op::L1 { x, target, weight } => {
                let t = self.value(*x);
                let d: Vec<f64> = t
                    .data()
                    .iter()
                    .zip(target)
                    .zip(weight)
                    .map(|((x, y), w)| {
                        let s = if x > y {
                            1.0
                        } else if x < y {
                            -1.0
                        } else {
                            0.0
                        };
                        gd[0] * w * s
                    })
                    .collect();
                add_into(&mut grads[x.0], &d, t.shape());
            }
        }
    }

    fn deform_backward(&self, op: &DeformOp, gd: &[f64], grads: &mut [Option<Tensor>]) {
        let (tv, tl, tw) = (self.value(op.values), self.value(op.locs), self.value(op.weights));
        let (h, w, c) = (tv.shape()[1], tv.shape()[2], tv.shape()[3]);
        let msz = h * w * c;
        let hp = op.heads * op.points;
        let want_v = self.nodes[op.values.0].needs_grad;
        let mut dvals = want_v.then(|| vec![0.0; tv.len()]);
        let mut dl = vec![0.0; tl.len()];
        let mut dw = vec![0.0; tw.len()];
        let mut sample = vec![0.0; c];
        for (qi, &mi) in op.map_index.iter().enumerate() {
            let map = &tv.data()[mi * msz..(mi + 1) * msz];
            for hd in 0..op.heads {
                let g = &gd[(qi * op.heads + hd) * c..(qi * op.heads + hd + 1) * c];
                for p in 0..op.points {
                    let s = qi * hp + hd * op.points + p;
                    let (x, y) = (tl.data()[2 * s], tl.data()[2 * s + 1]);
                    sample.fill(0.0);
                    sample_into(map, h, w, c, x, y, 1.0, &mut sample);
                    dw[s] = g.iter().zip(&sample).map(|(a, b)| a * b).sum();
                    let dm = dvals.as_mut().map(|d| &mut d[mi * msz..(mi + 1) * msz]);
                    let (gx, gy) = sample_backward(map, h, w, c, x, y, tw.data()[s], g, dm);
                    dl[2 * s] = gx;
                    dl[2 * s + 1] = gy;
                }
            }
        }
        if let Some(dv) = dvals {
            add_into(&mut grads[op.values.0], &dv, tv.shape());
        }
        if self.nodes[op.locs.0].needs_grad {
            add_into(&mut grads[op.locs.0], &dl, tl.shape());
        }
        if self.nodes[op.weights.0].needs_grad {
            add_into(&mut grads[op.weights.0], &dw, tw.shape());
        }
    }

    fn attention_backward(&self, op: &AttentionOp, gd: &[f64], grads: &mut [Option<Tensor>]) {
        let (tq, tk, tv) = (self.value(op.q), self.value(op.k), self.value(op.v));
        let c = tq.cols();
        let heads = op.heads;
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; tq.len()];
        let mut dk = vec![0.0; tk.len()];
        let mut dv = vec![0.0; tv.len()];
        let mut da = Vec::new();
        for (i, seg) in op.segments.iter().enumerate() {
            for h in 0..heads {
                let a = &op.weights[i * heads + h];
                let hs = h * dh..(h + 1) * dh;
                let g = &gd[i * c + hs.start..i * c + hs.end];
                da.clear();
                for (j, aj) in seg.clone().zip(a) {
                    let vj = &tv.row(j)[hs.clone()];
                    da.push(g.iter().zip(vj).map(|(x, y)| x * y).sum::<f64>());
                    dv[j * c + hs.start..j * c + hs.end].iter_mut().zip(g).for_each(|(d, gv)| *d += aj * gv);
                }
                // The sink value is zero, so its weight only enters through the softmax.
                let dot: f64 = da.iter().zip(a).map(|(x, y)| x * y).sum();
                let qh = &tq.row(i)[hs.clone()];
                for ((j, aj), daj) in seg.clone().zip(a).zip(&da) {
                    let ds = aj * (daj - dot) * scale;
                    let kj = &tk.row(j)[hs.clone()];
                    dq[i * c + hs.start..i * c + hs.end].iter_mut().zip(kj).for_each(|(d, kv)| *d += ds * kv);
                    dk[j * c + hs.start..j * c + hs.end].iter_mut().zip(qh).for_each(|(d, qv)| *d += ds * qv);
                }
            }
        }
        for (v, d, t) in [(op.q, dq, tq), (op.k, dk, tk), (op.v, dv, tv)] {
            if self.nodes[v.0].needs_grad {
                add_into(&mut grads[v.0], &d, t.shape());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn linear_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.matmul(x, w).unwrap();
        let y = g.add_bias(y, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0]);

        let z = g.constant(Tensor::zeros(&[3, 2]));
        let bias = g.constant(t(&[2], &[0.5, -1.0]));
        let w2 = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.matmul(z, w2).unwrap();
        let y = g.add_bias(y, bias).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.0, 0.5, -1.0, 0.5, -1.0]);

        let bad = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.matmul(bad, x), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let ones = g.constant(Tensor::full(&[2], 1.0));
        let zeros = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(t(&[2, 2], &[3.0, 3.0, -1.0, 1.0]));
        let y = g.layer_norm(x, ones, zeros, 1e-12).unwrap();
        let d = g.value(y).data();
        assert_eq!(&d[..2], &[0.0, 0.0]);
        assert!((d[2] + 1.0).abs() < 1e-9 && (d[3] - 1.0).abs() < 1e-9);

        let gain = g.constant(Tensor::zeros(&[2]));
        let beta = g.constant(t(&[2], &[0.25, 0.25]));
        let y = g.layer_norm(x, gain, beta, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.25));
    }

    #[test]
    fn softmax_examples() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(t(&[3, 2], &[0.0, 0.0, 1000.0, 0.0, 0.0, 0.0]));
        let y = g.softmax_rows(x);
        let d = g.value(y).data();
        assert_eq!(&d[..2], &[0.5, 0.5]);
        assert!((d[2] - 1.0).abs() < 1e-15 && d[3] < 1e-300);

        let x = g.constant(t(&[1, 3], &[1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()]));
        let y = g.softmax_rows(x);
        for (v, e) in g.value(y).data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-15);
        }
    }

    #[test]
    fn bilinear_examples() {
        let map = t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(bilinear_sample(&map, 1.0, 0.0).unwrap(), vec![2.0]);
        assert_eq!(bilinear_sample(&map, 0.5, 0.5).unwrap(), vec![2.5]);
        assert_eq!(bilinear_sample(&map, 5.0, -3.0).unwrap(), vec![0.0]);
        // Half a pixel beyond the right edge blends with zero padding.
        assert_eq!(bilinear_sample(&map, 1.5, 0.0).unwrap(), vec![1.0]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let q = t(&[2, 4], &[0.3, -1.0, 2.0, 0.1, 0.0, 0.5, -0.5, 1.0]);
        let k = t(&[3, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 0.0, 0.5, 0.5, 0.5, 0.5]);
        for sink in [false, true] {
            let w = attention_weights(&q, &k, &[0..3, 1..3], 2, sink).unwrap();
            for row in &w {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let w = attention_weights(&q, &k, &[0..0, 0..0], 2, true).unwrap();
        assert!(w.iter().all(|r| r == &vec![1.0]));
        assert!(matches!(attention_weights(&q, &k, &[0..3, 0..3], 3, false), Err(crate::Error::Config(_))));
    }

    #[test]
    fn backward_of_linear_sum_is_input_structure() {
        let mut store = ParamStore::new();
        let wid = store.add("w", t(&[2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let other = store.add("unused", Tensor::full(&[2], 1.0));
        let mut g = Graph::new(&store);
        let x = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.param(wid);
        let _ = g.param(other);
        let y = g.matmul(x, w).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        // d/dW_ij sum(XW) = sum_n X_ni
        assert_eq!(grads.param(wid).unwrap().data(), &[4.0, 4.0, 4.0, 6.0, 6.0, 6.0]);
        assert!(grads.param(other).is_none());
        assert!(matches!(g.backward(y), Err(crate::Error::Usage(_))));
        drop(g);
        grads.accumulate_into(&mut store);
        assert_eq!(store.get(other).grad.data(), &[0.0, 0.0]);
        assert_eq!(store.get(wid).grad.data(), &[4.0, 4.0, 4.0, 6.0, 6.0, 6.0]);
    }
}
