//! Distance-adaptive image patches around projected radar points.

#[allow(unused_imports)] // inherent float methods shadow it when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::tensor::{bilinear_sample, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchConfig {
    /// Scale constant W.
    pub w_scale: f64,
    /// Exponent offset α.
    pub alpha: f64,
    /// Distance divisor β (m).
    pub beta: f64,
    /// Side of the resized patch.
    pub out_size: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self { w_scale: 3.5, alpha: 2.0, beta: 55.0, out_size: 7 }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_scale > 0.0) || !(self.beta > 0.0) || self.out_size == 0 {
            bail!(Config, "patch config needs w_scale > 0, beta > 0, out_size >= 1");
        }
        Ok(())
    }

    /// Patch-pixel coordinate of the resized patch center.
    pub fn center(&self) -> f64 {
        (self.out_size as f64 - 1.0) / 2.0
    }
}

/// `floor(W · exp(-d / β + α))`.
pub fn adaptive_patch_size_raw(d: f64, cfg: &PatchConfig) -> usize {
    let v = (cfg.w_scale * (-d.max(0.0) / cfg.beta + cfg.alpha).exp()).floor();
    v.max(0.0) as usize
}

/// Raw size raised to at least 3 and then to the next odd integer, so the
/// window always has a center pixel.
pub fn adaptive_patch_size(d: f64, cfg: &PatchConfig) -> usize {
    let t = adaptive_patch_size_raw(d, cfg).max(3);
    t | 1
}

/// Feature-map coordinate of an image pixel coordinate when every map cell
/// covers `stride` pixels (cell centers sit at `stride * j + (stride - 1) / 2`).
pub fn pixel_to_feature(p: f64, stride: usize) -> f64 {
    let s = stride as f64;
    (p - 0.5 * (s - 1.0)) / s
}

/// Resamples a `tau x tau` window centered at `center = (x, y)` of a
/// `[h, w, c]` feature map to `[out, out, c]` with bilinear interpolation;
/// samples outside the map read zero.
pub fn extract_patch(featmap: &Tensor, center: [f64; 2], tau: usize, out: usize) -> Result<Tensor> {
    if tau == 0 {
        bail!(InvalidInput, "patch size must be positive");
    }
    extract_patch_window(featmap, center, tau as f64 - 1.0, out)
}

/// Like [`extract_patch`] with the distance between the outermost sample
/// centers given directly in map cells (`tau - 1`), which may be fractional.
pub fn extract_patch_window(featmap: &Tensor, center: [f64; 2], span: f64, out: usize) -> Result<Tensor> {
    if featmap.shape().len() != 3 {
        bail!(Shape, "feature map must be [h, w, c], got {:?}", featmap.shape());
    }
    if out == 0 || !(span >= 0.0) {
        bail!(InvalidInput, "patch span must be non-negative and output size positive");
    }
    let c = featmap.shape()[2];
    let step = if out > 1 { span / (out as f64 - 1.0) } else { 0.0 };
    let mid = (out as f64 - 1.0) / 2.0;
    let mut data = alloc::vec::Vec::with_capacity(out * out * c);
    for r in 0..out {
        let y = center[1] + (r as f64 - mid) * step;
        for col in 0..out {
            let x = center[0] + (col as f64 - mid) * step;
            data.extend(bilinear_sample(featmap, x, y)?);
        }
    }
    Tensor::new(&[out, out, c], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    #[test]
    fn raw_sizes() {
        let cfg = PatchConfig::default();
        assert_eq!(adaptive_patch_size_raw(0.0, &cfg), 25);
        assert_eq!(adaptive_patch_size_raw(55.0, &cfg), 9);
        assert_eq!(adaptive_patch_size_raw(110.0, &cfg), 3);
        assert_eq!(adaptive_patch_size(0.0, &cfg), 25);
        assert_eq!(adaptive_patch_size(300.0, &cfg), 3);
    }

    #[test]
    fn rounded_sizes_are_odd_and_non_increasing() {
        let cfg = PatchConfig::default();
        let mut prev = usize::MAX;
        for i in 0..2000 {
            let t = adaptive_patch_size(i as f64 * 0.1, &cfg);
            assert!(t % 2 == 1 && t >= 3 && t <= prev);
            prev = t;
        }
    }

    fn ramp(h: usize, w: usize, c: usize) -> Tensor {
        let data: Vec<f64> = (0..h * w * c).map(|i| i as f64 * 0.5 - 3.0).collect();
        Tensor::new(&[h, w, c], data).unwrap()
    }

    #[test]
    fn tau_equal_to_output_copies_the_window() {
        let map = ramp(12, 15, 2);
        let p = extract_patch(&map, [7.0, 5.0], 7, 7).unwrap();
        for r in 0..7 {
            for col in 0..7 {
                for ch in 0..2 {
                    let expect = map.data()[((r + 2) * 15 + col + 4) * 2 + ch];
                    assert!((p.data()[(r * 7 + col) * 2 + ch] - expect).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn constant_map_and_outside_center() {
        let map = Tensor::full(&[10, 10, 3], 1.25);
        let p = extract_patch(&map, [4.3, 5.1], 5, 7).unwrap();
        assert!(p.data().iter().all(|v| (*v - 1.25).abs() < 1e-12));
        let p = extract_patch(&map, [100.0, -60.0], 9, 7).unwrap();
        assert!(p.data().iter().all(|v| *v == 0.0));
    }
}
