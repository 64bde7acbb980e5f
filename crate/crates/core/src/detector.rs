//! Pixel-level change-detection head.

use std::path::Path;

use autograd::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{write_mask_png, Mask};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear};

pub const NUM_CLASSES: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub c_mid: usize,
    /// Change probability at or above which a pixel is exported as change.
    pub threshold: f64,
    /// Clamp inside the logarithms of the detection loss.
    pub log_eps: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { c_mid: 32, threshold: 0.5, log_eps: 1e-7 }
    }
}

/// Per-pixel class probabilities, `B × 2 × H × W` (class 1 = change).
#[derive(Clone, Debug, PartialEq)]
pub struct ChangeMaskPrediction<T> {
    pub probabilities: Tensor<T>,
}

impl<T: Scalar> ChangeMaskPrediction<T> {
    /// Change-class probabilities of item `b`, `[H, W]`.
    pub fn change_prob(&self, b: usize) -> Tensor<T> {
        let s = self.probabilities.shape();
        let hw = s[2] * s[3];
        let start = (b * NUM_CLASSES + 1) * hw;
        Tensor::new(&[s[2], s[3]], self.probabilities.data()[start..start + hw].to_vec())
    }

    pub fn to_mask(&self, b: usize, threshold: f64) -> Mask {
        let p = self.change_prob(b);
        let (h, w) = (p.shape()[0], p.shape()[1]);
        Mask { height: h, width: w, data: p.data().iter().map(|v| u8::from(v.to_f64c() >= threshold)).collect() }
    }

    pub fn write_png(&self, path: &Path, b: usize, threshold: f64) -> Result<()> {
        write_mask_png(path, &self.to_mask(b, threshold))
    }
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub cfg: DetectorConfig,
    pub reduce: Linear,
    pub classify: Linear,
}

impl Detector {
    pub const PREFIX: &'static str = "detector.";

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, cfg: &DetectorConfig, in_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if cfg.c_mid == 0 || !(cfg.log_eps > 0.0 && cfg.log_eps < 0.5) {
            return Err(Error::Config("detector needs c_mid > 0 and 0 < log_eps < 0.5".into()));
        }
        Ok(Self {
            cfg: cfg.clone(),
            reduce: Linear::fan_in(store, "detector.reduce", in_dim, cfg.c_mid, 1.0, rng),
            classify: Linear::fan_in(store, "detector.classify", cfg.c_mid, NUM_CLASSES, 1.0, rng),
        })
    }

    /// `[N, 4C]` features on a `side × side` grid → `[H·W, 2]` probabilities.
    pub fn forward<'g, T: Scalar>(
        &self,
        cx: &Ctx<'g, '_, T>,
        features: Var<'g, T>,
        side: usize,
        height: usize,
        width: usize,
    ) -> Var<'g, T> {
        let reduced = self.reduce.forward(cx, features);
        let up = reduced.upsample_bilinear(side, side, height, width);
        self.classify.forward(cx, up).softmax(false)
    }

    /// Binary cross-entropy of the change channel of `[H·W, 2]` probabilities.
    pub fn loss<'g, T: Scalar>(&self, probs: Var<'g, T>, mask: &Mask) -> Var<'g, T> {
        detection_loss_var(probs, mask, self.cfg.log_eps)
    }
}

pub fn detection_loss_var<'g, T: Scalar>(probs: Var<'g, T>, mask: &Mask, eps: f64) -> Var<'g, T> {
    let targets: Vec<T> = mask.data.iter().map(|&v| if v != 0 { T::one() } else { T::zero() }).collect();
    probs.narrow(1, 1, 1).binary_cross_entropy(&targets, T::from_f64c(eps))
}

/// Mean clamped binary cross-entropy between change probabilities `[H, W]`
/// and a binary mask.
pub fn detection_loss<T: Scalar>(change_prob: &Tensor<T>, mask: &Mask, eps: f64) -> Result<T> {
    if change_prob.shape() != [mask.height, mask.width] {
        return Err(Error::Shape(format!(
            "prediction {:?} vs mask {}x{}",
            change_prob.shape(),
            mask.height,
            mask.width
        )));
    }
    let g = Graph::new();
    let hw = mask.height * mask.width;
    let probs = g.constant(change_prob.clone().reshape(&[hw, 1]));
    let targets: Vec<T> = mask.data.iter().map(|&v| if v != 0 { T::one() } else { T::zero() }).collect();
    Ok(probs.binary_cross_entropy(&targets, T::from_f64c(eps)).item())
}

/// Per-position channel reduction: `B × N × 4C` → `B × N × C_mid`.
pub fn reduce_channels<T: Scalar>(store: &ParamStore<T>, det: &Detector, features: &Tensor<T>) -> Result<Tensor<T>> {
    let s = features.shape();
    if s.len() != 3 || s[2] != det.reduce.in_dim {
        return Err(Error::Shape(format!("expected B x N x {}, got {s:?}", det.reduce.in_dim)));
    }
    let flat = features.clone().reshape(&[s[0] * s[1], s[2]]);
    Ok(det.reduce.apply(store, &flat).reshape(&[s[0], s[1], det.cfg.c_mid]))
}

/// Bilinear resize of `B × C × h × w` to `B × C × H × W` with half-pixel
/// centres. Shrinking is rejected.
pub fn upsample_to_image<T: Scalar>(features: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let s = features.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("expected B x C x h x w, got {s:?}")));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    if height < h || width < w {
        return Err(Error::Config(format!("cannot upsample {h}x{w} to the smaller {height}x{width}")));
    }
    let mut out = Vec::with_capacity(b * c * height * width);
    for i in 0..b {
        let item = Tensor::new(&[c, h * w], features.data()[i * c * h * w..(i + 1) * c * h * w].to_vec()).permute(&[1, 0]);
        let g = Graph::new();
        let up = g.constant(item).upsample_bilinear(h, w, height, width).value().permute(&[1, 0]);
        out.extend_from_slice(up.data());
    }
    Ok(Tensor::new(&[b, c, height, width], out))
}

/// 1×1 classification and per-pixel softmax of `B × C_mid × H × W` features.
pub fn predict_mask<T: Scalar>(store: &ParamStore<T>, det: &Detector, upsampled: &Tensor<T>) -> Result<ChangeMaskPrediction<T>> {
    let s = upsampled.shape();
    if s.len() != 4 || s[1] != det.cfg.c_mid {
        return Err(Error::Shape(format!("expected B x {} x H x W, got {s:?}", det.cfg.c_mid)));
    }
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut out = Vec::with_capacity(b * NUM_CLASSES * hw);
    for i in 0..b {
        let item = Tensor::new(&[c, hw], upsampled.data()[i * c * hw..(i + 1) * c * hw].to_vec()).permute(&[1, 0]);
        let g = Graph::new();
        let cx = Ctx::new(&g, store);
        let probs = det.classify.forward(&cx, cx.constant(item)).softmax(false).value().permute(&[1, 0]);
        out.extend_from_slice(probs.data());
    }
    Ok(ChangeMaskPrediction { probabilities: Tensor::new(&[b, NUM_CLASSES, s[2], s[3]], out) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn detector(store: &mut ParamStore<f64>) -> Detector {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Detector::new(store, &DetectorConfig::default(), 128, &mut rng).unwrap()
    }

    #[test]
    fn reduce_shape() {
        let mut store = ParamStore::new();
        let det = detector(&mut store);
        let out = reduce_channels(&store, &det, &Tensor::zeros(&[2, 64, 128])).unwrap();
        assert_eq!(out.shape(), &[2, 64, 32]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_by_two_rows() {
        let src = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[0.0, 1.0, 0.0, 1.0]);
        let up = upsample_to_image(&src, 4, 4).unwrap();
        for r in 0..4 {
            assert_eq!(&up.data()[r * 4..r * 4 + 4], &[0.0, 0.25, 0.75, 1.0]);
        }
        assert!(matches!(upsample_to_image(&src, 1, 4), Err(Error::Config(_))));
    }

    #[test]
    fn zero_classifier_is_half() {
        let mut store = ParamStore::new();
        let det = detector(&mut store);
        store.set_value(det.classify.w, Tensor::zeros(&[32, 2]));
        let pred = predict_mask(&store, &det, &Tensor::full(&[1, 32, 4, 4], 0.3)).unwrap();
        assert!(pred.probabilities.data().iter().all(|&p| p == 0.5));
        store.set_value(det.classify.b.unwrap(), Tensor::from_f64(&[2], &[0.0, 50.0]));
        let pred = predict_mask(&store, &det, &Tensor::full(&[1, 32, 4, 4], 0.3)).unwrap();
        assert!(pred.change_prob(0).data().iter().all(|&p| p > 1.0 - 1e-12));
        assert_eq!(pred.to_mask(0, 0.5).count_nonzero(), 16);
    }

    #[test]
    fn half_prediction_loss_is_ln2() {
        let mask = Mask { height: 2, width: 2, data: vec![1, 0, 0, 1] };
        let l = detection_loss(&Tensor::<f64>::full(&[2, 2], 0.5), &mask, 1e-7).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let perfect = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert!(detection_loss(&perfect, &mask, 1e-7).unwrap() < 2e-7);
    }
}
