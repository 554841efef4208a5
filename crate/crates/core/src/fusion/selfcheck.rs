//! Finite-difference checks: every differentiable tensor operation and layer,
//! and the end-to-end fusion loss on a tiny random instance.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::association::AssociationSet;
use crate::error::Result;
use crate::geometry::{BBox3D, Vec3};
use crate::tensor::gradcheck::{check_gradients, GradCheckReport};
use crate::tensor::nn::{DeformableCrossAttention, LayerNorm, Linear, Mlp, MultiHeadCrossAttention};
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::{seeded_rng, SeededRng};

use super::{build_targets, compute_losses, BackboneConfig, CoordMode, FusionConfig, FusionInput, FusionModel, ImageProposal, SaStage};

/// Narrow widths so every parameter can be perturbed in a few seconds.
pub fn tiny_config(coords: CoordMode) -> FusionConfig {
    FusionConfig {
        width: 8,
        heads: 2,
        i2r_layers: 2,
        r2i_layers: 2,
        mlp_hidden: 8,
        sampling_points: 2,
        image_channels: 4,
        num_classes: 2,
        backbone: BackboneConfig {
            stages: vec![
                SaStage { radius: 1.5, nsample: 3, mlp: vec![6, 6] },
                SaStage { radius: 3.0, nsample: 4, mlp: vec![8] },
            ],
        },
        coords,
        ..FusionConfig::desk()
    }
}

fn uniform(rng: &mut SeededRng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()
}

/// Two proposals sharing one of eight radar points, with patches for each
/// (point, camera) couple and targets covering positive and negative labels.
pub fn toy_instance(cfg: &FusionConfig, seed: u64) -> Result<(FusionInput, crate::fusion::TrainingTargets)> {
    let mut rng = seeded_rng(seed);
    let gts = [
        BBox3D::new(Vec3::new(12.0, 3.0, 0.8), [1.9, 4.4, 1.6], 0.3, [2.0, 0.5])?,
        BBox3D::new(Vec3::new(14.0, -2.0, 0.9), [0.8, 1.8, 1.5], -1.2, [-1.0, 1.0])?,
    ];
    let proposals: Vec<ImageProposal> = gts
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let mut bbox = *b;
            bbox.center = b.center + Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5), 0.0);
            ImageProposal {
                bbox,
                depth_var: 0.4,
                class_conf: 0.7,
                class_id: i,
                feature: uniform(&mut rng, cfg.image_channels, 1.0),
                keypoint: [0.0; 2],
                camera_id: i,
            }
        })
        .collect();
    let positions: Vec<Vec3> = (0..8)
        .map(|i| {
            let b = &gts[usize::from(i >= 4)];
            b.center + Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5), rng.random_range(-0.5..0.5))
        })
        .collect();
    let assoc = AssociationSet { entries: vec![vec![0, 1, 2, 3, 4], vec![3, 5, 6, 7]] };
    // Point 3 is seen from both cameras; every other point from one.
    let patch_points = vec![0, 1, 2, 3, 4, 3, 5, 6, 7];
    let pair_patch = vec![0, 1, 2, 3, 4, 5, 6, 7, 8];
    let s = cfg.patch.out_size;
    let patches = Tensor::new(&[9, s, s, cfg.image_channels], uniform(&mut rng, 9 * s * s * cfg.image_channels, 1.0))?;
    let features = Tensor::new(&[8, crate::radar::RADAR_FEATURES], uniform(&mut rng, 8 * crate::radar::RADAR_FEATURES, 1.0))?;
    let targets = build_targets(&proposals, &positions, &assoc, &gts, &[Some(0), Some(1)], cfg.coords, 0.0)?;
    let input = FusionInput {
        proposals,
        backbone_positions: positions.clone(),
        positions,
        features,
        assoc,
        patches,
        patch_points,
        pair_patch,
    };
    Ok((input, targets))
}

/// Builds the tiny model, moves every zero-initialized parameter to random
/// values so all paths carry gradient, and compares the loss gradient with
/// central differences for every parameter.
pub fn check_fusion_gradients(seed: u64, coords: CoordMode, h: f64) -> Result<GradCheckReport> {
    let cfg = tiny_config(coords);
    let mut store = ParamStore::new();
    let mut rng = seeded_rng(seed);
    let model = FusionModel::new(&mut store, &cfg, &mut rng)?;
    for p in store.iter_mut() {
        if p.tensor.data().iter().all(|v| *v == 0.0) {
            let n = p.tensor.len();
            p.tensor.data_mut().copy_from_slice(&uniform(&mut rng, n, 0.3));
        }
    }
    let (input, targets) = toy_instance(&cfg, seed ^ 0x5eed)?;
    check_gradients(&store, &[], h, |g: &mut Graph<'_>, _| {
        let out = model.forward(g, &input)?;
        Ok(compute_losses(g, out.in_box_logits, out.raw, &targets, &cfg)?.0)
    })
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, uniform(&mut seeded_rng(seed), n, 1.0)).expect("shape matches data")
}

/// Random weights so the scalar objective mixes every output entry.
fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let w = g.constant(rand_tensor(g.value(x).shape(), seed));
    let y = g.mul(x, w)?;
    Ok(g.sum(y))
}

/// Checks every tape operation and layer with respect to its inputs and
/// parameters at step `h`. Sampling locations sit away from integer grid
/// lines, where bilinear interpolation is not differentiable.
pub fn check_op_gradients(h: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut out = Vec::new();
    let empty = ParamStore::new();
    let a = rand_tensor(&[3, 4], 1);
    let b = rand_tensor(&[3, 4], 2);

    out.push(("matmul", check_gradients(&empty, &[a.clone(), rand_tensor(&[4, 5], 3)], h, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        weighted_sum(g, y, 10)
    })?));
    out.push(("add/sub/mul/scale", check_gradients(&empty, &[a.clone(), b], h, |g, v| {
        let s = g.add(v[0], v[1])?;
        let d = g.sub(v[0], v[1])?;
        let p = g.mul(s, d)?;
        let p = g.scale(p, 0.7);
        weighted_sum(g, p, 11)
    })?));
    out.push(("add_bias", check_gradients(&empty, &[a.clone(), rand_tensor(&[4], 4)], h, |g, v| {
        let y = g.add_bias(v[0], v[1])?;
        weighted_sum(g, y, 12)
    })?));
    out.push(("relu/sigmoid", check_gradients(&empty, &[a.clone()], h, |g, v| {
        let r = g.relu(v[0]);
        let s = g.sigmoid(v[0]);
        let y = g.add(r, s)?;
        weighted_sum(g, y, 13)
    })?));
    out.push(("softmax", check_gradients(&empty, &[a.clone()], h, |g, v| {
        let y = g.softmax_rows(v[0]);
        weighted_sum(g, y, 14)
    })?));
    out.push(("layer_norm", check_gradients(&empty, &[a, rand_tensor(&[4], 5), rand_tensor(&[4], 6)], h, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(g, y, 15)
    })?));

    let a = rand_tensor(&[6, 4], 20);
    out.push(("slice/concat", check_gradients(&empty, &[a.clone(), rand_tensor(&[6, 2], 21)], h, |g, v| {
        let s = g.slice_cols(v[0], 1..3)?;
        let c = g.concat_cols(&[s, v[1], v[0]])?;
        let r = g.concat_rows(&[c, c])?;
        weighted_sum(g, r, 22)
    })?));
    out.push(("gather_rows", check_gradients(&empty, &[a.clone()], h, |g, v| {
        let y = g.gather_rows(v[0], &[5, 0, 0, 3])?;
        weighted_sum(g, y, 23)
    })?));
    out.push(("group_max", check_gradients(&empty, &[a.clone()], h, |g, v| {
        let y = g.group_max(v[0], 3)?;
        weighted_sum(g, y, 24)
    })?));
    out.push(("reshape/select_group", check_gradients(&empty, &[a], h, |g, v| {
        let r = g.reshape(v[0], &[3, 8])?;
        let y = g.select_group(r, &[1, 0, 3], 2)?;
        weighted_sum(g, y, 25)
    })?));
    let targets = [0.0, 1.0, 1.0, 0.0, 0.3, 1.0];
    let weights = [1.0, 0.5, 2.0, 0.0, 1.0, 1.0];
    out.push(("bce/l1", check_gradients(&empty, &[rand_tensor(&[6], 26)], h, |g, v| {
        let b = g.bce_with_logits(v[0], &targets, &weights)?;
        let l = g.l1(v[0], &[0.9, -0.9, 0.5, 0.0, 2.0, -2.0], &weights)?;
        g.add(b, l)
    })?));

    // Locations partially outside the map exercise the zero padding.
    let locs = Tensor::new(&[4, 2], vec![1.3, 2.6, 4.45, 0.2, -0.4, 3.7, 5.3, 4.35])?;
    out.push(("bilinear", check_gradients(&empty, &[rand_tensor(&[5, 6, 3], 30), locs], h, |g, v| {
        let y = g.bilinear(v[0], v[1])?;
        weighted_sum(g, y, 31)
    })?));
    let locs = Tensor::new(&[3, 8], vec![
        1.2, 1.7, 0.3, 2.4, 2.6, 0.55, 3.3, 3.2, //
        0.45, 0.35, 2.2, 1.15, -0.5, 1.6, 1.9, 2.8, //
        2.3, 2.25, 1.4, 0.6, 0.8, 3.45, 3.6, 1.1,
    ])?;
    out.push(("deform_aggregate", check_gradients(&empty, &[rand_tensor(&[2, 4, 4, 3], 40), locs, rand_tensor(&[3, 4], 41)], h, |g, v| {
        let y = g.deform_aggregate(v[0], &[1, 0, 1], v[1], v[2], 2, 2)?;
        weighted_sum(g, y, 42)
    })?));
    let qkv = [rand_tensor(&[3, 4], 50), rand_tensor(&[5, 4], 51), rand_tensor(&[5, 4], 52)];
    for (name, sink) in [("attention", false), ("attention+sink", true)] {
        out.push((name, check_gradients(&empty, &qkv, h, |g, x| {
            let y = g.attention(x[0], x[1], x[2], &[0..5, 2..4, 3..3], 2, sink)?;
            weighted_sum(g, y, 53)
        })?));
    }

    let mut rng = seeded_rng(60);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "lin", 4, 3, true, &mut rng);
    let ln = LayerNorm::new(&mut store, "ln", 3);
    let mlp = Mlp::new(&mut store, "mlp", 3, 5, 3, &mut rng);
    // Non-trivial norm affine so its gradients are exercised.
    store.get_mut(ln.gain).tensor = rand_tensor(&[3], 61);
    store.get_mut(ln.bias).tensor = rand_tensor(&[3], 62);
    out.push(("linear/layer_norm/mlp", check_gradients(&store, &[rand_tensor(&[2, 4], 63)], h, |g, v| {
        let y = lin.forward(g, v[0])?;
        let y = ln.forward(g, y)?;
        let y = mlp.forward(g, y)?;
        let y = g.softmax_rows(y);
        weighted_sum(g, y, 64)
    })?));

    let mut rng = seeded_rng(70);
    let mut store = ParamStore::new();
    let mha = MultiHeadCrossAttention::new(&mut store, "mha", 4, 2, true, &mut rng)?;
    let def = DeformableCrossAttention::new(&mut store, "def", 4, 3, 2, 2, &mut rng)?;
    // Move offsets and logits off their zero init so their paths carry signal.
    for id in [def.offsets.w, def.offsets.b.expect("biased"), def.logits.w, def.logits.b.expect("biased")] {
        let shape = store.value(id).shape().to_vec();
        let n = store.value(id).len();
        store.get_mut(id).tensor = Tensor::new(&shape, uniform(&mut seeded_rng(71 + id.index() as u64), n, 0.3))?;
    }
    out.push(("multi_head_cross_attention", check_gradients(&store, &[rand_tensor(&[2, 4], 73), rand_tensor(&[3, 4], 74)], h, |g, v| {
        let y = mha.forward(g, v[0], v[1], &[0..3, 1..2])?;
        weighted_sum(g, y, 75)
    })?));
    let maps = rand_tensor(&[2, 5, 5, 3], 72);
    out.push(("deformable_cross_attention", check_gradients(&store, &[rand_tensor(&[2, 4], 76)], h, |g, v| {
        let m = g.constant(maps.clone());
        let y = def.forward(g, v[0], &[[2.13, 1.87], [1.41, 2.62]], m, &[1, 0])?;
        weighted_sum(g, y, 77)
    })?));
    Ok(out)
}
