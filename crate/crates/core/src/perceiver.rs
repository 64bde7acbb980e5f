//! Key-change perception: flow estimation, feature warping, residuals and
//! absolute-difference fusion.

use std::path::Path;

use autograd::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::write_gray_png;
use crate::encoder::{MultiLevelFeatureMap, NUM_TAPS};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceiverConfig {
    pub hidden: usize,
    pub leaky_slope: f64,
    /// One flow network per encoder tap instead of one over all taps.
    pub per_level_perceiver: bool,
}

impl Default for PerceiverConfig {
    fn default() -> Self {
        Self { hidden: 64, leaky_slope: 0.1, per_level_perceiver: false }
    }
}

/// Flow fields for both branches, `B × 2 × h × w` in grid cells
/// (channel 0 = x, channel 1 = y).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowFieldPair<T> {
    pub flow_pre: Tensor<T>,
    pub flow_post: Tensor<T>,
}

/// Nonnegative `B × N × 4C` fused difference features.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyChangeFeature<T> {
    pub values: Tensor<T>,
    pub side: usize,
}

impl<T: Scalar> KeyChangeFeature<T> {
    /// `[N, C]` slice of batch item `b`.
    pub fn item(&self, b: usize) -> Tensor<T> {
        let s = self.values.shape();
        let per = s[1] * s[2];
        Tensor::new(&[s[1], s[2]], self.values.data()[b * per..(b + 1) * per].to_vec())
    }
}

/// Two 3×3 convolutions mapping concatenated features to four flow channels.
#[derive(Clone, Debug)]
struct FlowNet {
    conv1: Linear,
    conv2: Linear,
}

impl FlowNet {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, in_ch: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let conv1 = Linear::fan_in(store, &format!("{name}.conv1"), 9 * in_ch, hidden, 1.0, rng);
        let conv2 = Linear::new(store, &format!("{name}.conv2"), 9 * hidden, 4, 0.0, true, rng);
        Self { conv1, conv2 }
    }

    fn forward<'g, T: Scalar>(
        &self,
        cx: &Ctx<'g, '_, T>,
        x: Var<'g, T>,
        side: usize,
        slope: T,
    ) -> (Var<'g, T>, Var<'g, T>) {
        let h = self.conv1.forward(cx, x.im2col3x3(side, side)).leaky_relu(slope);
        let flows = self.conv2.forward(cx, h.im2col3x3(side, side));
        (flows.narrow(1, 0, 2), flows.narrow(1, 2, 2))
    }
}

/// `|(warp(F_pre) − F_pre) − (warp(F_post) − F_post)|` on `[N, C]` maps.
pub fn fuse_residuals<'g, T: Scalar>(
    f_pre: Var<'g, T>,
    f_post: Var<'g, T>,
    flow_pre: Var<'g, T>,
    flow_post: Var<'g, T>,
    side: usize,
) -> Var<'g, T> {
    let r_pre = f_pre.warp(flow_pre, side, side).sub(f_pre);
    let r_post = f_post.warp(flow_post, side, side).sub(f_post);
    r_pre.sub(r_post).abs()
}

/// Graph outputs for one sample.
pub struct PerceiverOutput<'g, T: Scalar> {
    pub key_change: Var<'g, T>,
    /// `[N, 2]` flows, one pair per flow network.
    pub flows: Vec<(Var<'g, T>, Var<'g, T>)>,
}

#[derive(Clone, Debug)]
pub struct Perceiver {
    pub cfg: PerceiverConfig,
    pub feature_dim: usize,
    nets: Vec<FlowNet>,
}

impl Perceiver {
    pub const PREFIX: &'static str = "perceiver.";

    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &PerceiverConfig,
        feature_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.hidden == 0 {
            return Err(Error::Config("perceiver hidden width must be positive".into()));
        }
        let nets = if cfg.per_level_perceiver {
            if !feature_dim.is_multiple_of(NUM_TAPS) {
                return Err(Error::Config(format!("feature width {feature_dim} does not split into {NUM_TAPS} levels")));
            }
            let c = feature_dim / NUM_TAPS;
            (0..NUM_TAPS)
                .map(|l| FlowNet::new(store, &format!("perceiver.level{l}"), 2 * c, cfg.hidden, rng))
                .collect()
        } else {
            vec![FlowNet::new(store, "perceiver.flow", 2 * feature_dim, cfg.hidden, rng)]
        };
        Ok(Self { cfg: cfg.clone(), feature_dim, nets })
    }

    /// `[N, 4C]` pair → key-change features `[N, 4C]`.
    pub fn forward<'g, T: Scalar>(
        &self,
        cx: &Ctx<'g, '_, T>,
        f_pre: Var<'g, T>,
        f_post: Var<'g, T>,
        side: usize,
    ) -> PerceiverOutput<'g, T> {
        let slope = T::from_f64c(self.cfg.leaky_slope);
        let width = self.feature_dim / self.nets.len();
        let mut parts = Vec::with_capacity(self.nets.len());
        let mut flows = Vec::with_capacity(self.nets.len());
        for (l, net) in self.nets.iter().enumerate() {
            let (a, b) = if self.nets.len() == 1 {
                (f_pre, f_post)
            } else {
                (f_pre.narrow(1, l * width, width), f_post.narrow(1, l * width, width))
            };
            let (fp, fq) = net.forward(cx, cx.g.concat(&[a, b], 1), side, slope);
            parts.push(fuse_residuals(a, b, fp, fq, side));
            flows.push((fp, fq));
        }
        let key_change = if parts.len() == 1 { parts[0] } else { cx.g.concat(&parts, 1) };
        PerceiverOutput { key_change, flows }
    }

    fn run_batch<T: Scalar, R>(
        &self,
        store: &ParamStore<T>,
        f_pre: &MultiLevelFeatureMap<T>,
        f_post: &MultiLevelFeatureMap<T>,
        mut each: impl FnMut(PerceiverOutput<'_, T>) -> R,
    ) -> Result<Vec<R>> {
        if f_pre.values.shape() != f_post.values.shape() {
            return Err(Error::Shape(format!(
                "feature maps differ: {:?} vs {:?}",
                f_pre.values.shape(),
                f_post.values.shape()
            )));
        }
        if f_pre.channels() != self.feature_dim {
            return Err(Error::Shape(format!("expected {} channels, got {}", self.feature_dim, f_pre.channels())));
        }
        Ok((0..f_pre.batch())
            .map(|b| {
                let g = Graph::new();
                let cx = Ctx::new(&g, store);
                let out = self.forward(&cx, cx.constant(f_pre.item(b)), cx.constant(f_post.item(b)), f_pre.side);
                each(out)
            })
            .collect())
    }

    /// Flow fields, one pair per flow network (a single pair by default).
    pub fn estimate_flows<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        f_pre: &MultiLevelFeatureMap<T>,
        f_post: &MultiLevelFeatureMap<T>,
    ) -> Result<Vec<FlowFieldPair<T>>> {
        let side = f_pre.side;
        let per_item = self.run_batch(store, f_pre, f_post, |out| {
            out.flows
                .iter()
                .map(|(a, b)| (a.value().permute(&[1, 0]), b.value().permute(&[1, 0])))
                .collect::<Vec<_>>()
        })?;
        let batch = per_item.len();
        Ok((0..self.nets.len())
            .map(|l| {
                let stack = |pick: fn(&(Tensor<T>, Tensor<T>)) -> &Tensor<T>| {
                    let data = per_item.iter().flat_map(|it| pick(&it[l]).data().to_vec()).collect();
                    Tensor::new(&[batch, 2, side, side], data)
                };
                FlowFieldPair { flow_pre: stack(|p| &p.0), flow_post: stack(|p| &p.1) }
            })
            .collect())
    }

    pub fn key_change_features<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        f_pre: &MultiLevelFeatureMap<T>,
        f_post: &MultiLevelFeatureMap<T>,
    ) -> Result<KeyChangeFeature<T>> {
        let items = self.run_batch(store, f_pre, f_post, |out| out.key_change.value().as_ref().clone())?;
        let data = items.iter().flat_map(|t| t.data().to_vec()).collect();
        Ok(KeyChangeFeature { values: Tensor::new(f_pre.values.shape(), data), side: f_pre.side })
    }
}

/// Warps `B × N × C` features by `B × 2 × h × w` flows.
pub fn warp<T: Scalar>(features: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    let s = features.shape();
    let f = flow.shape();
    if s.len() != 3 || f.len() != 4 || f[0] != s[0] || f[1] != 2 || f[2] * f[3] != s[1] || f[2] != f[3] {
        return Err(Error::Shape(format!("cannot warp features {s:?} with flow {f:?}")));
    }
    let (n, c, side) = (s[1], s[2], f[2]);
    let mut out = Vec::with_capacity(features.numel());
    for b in 0..s[0] {
        let g = Graph::new();
        let x = g.constant(Tensor::new(&[n, c], features.data()[b * n * c..(b + 1) * n * c].to_vec()));
        let fl = Tensor::new(&[2, n], flow.data()[b * 2 * n..(b + 1) * 2 * n].to_vec()).permute(&[1, 0]);
        let y = x.warp(g.constant(fl), side, side);
        out.extend_from_slice(y.value().data());
    }
    Ok(Tensor::new(s, out))
}

/// Channel-mean heat map of batch item `b`, scaled so the maximum is 255.
pub fn write_heatmap_png<T: Scalar>(path: &Path, kc: &KeyChangeFeature<T>, b: usize) -> Result<()> {
    let item = kc.item(b);
    let c = item.last_dim();
    let means: Vec<f64> = item.data().chunks(c).map(|row| row.iter().map(|v| v.to_f64c()).sum::<f64>() / c as f64).collect();
    let max = means.iter().cloned().fold(0.0, f64::max);
    let bytes: Vec<u8> = means
        .iter()
        .map(|&m| if max > 0.0 { (m / max * 255.0).round() as u8 } else { 0 })
        .collect();
    write_gray_png(path, kc.side, kc.side, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(b: usize, n: usize, c: usize, seed: u64) -> MultiLevelFeatureMap<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        MultiLevelFeatureMap::new(Tensor::from_fn(&[b, n, c], |_| rng.random_range(-1.0..1.0))).unwrap()
    }

    #[test]
    fn zero_flow_net_gives_zero_output() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Perceiver::new(&mut store, &PerceiverConfig::default(), 128, &mut rng).unwrap();
        let (a, b) = (random_map(2, 64, 128, 2), random_map(2, 64, 128, 3));
        let flows = p.estimate_flows(&store, &a, &b).unwrap();
        assert_eq!(flows.len(), 1);
        assert_eq!(flows[0].flow_pre.shape(), &[2, 2, 8, 8]);
        assert!(flows[0].flow_pre.data().iter().chain(flows[0].flow_post.data()).all(|&v| v == 0.0));
        let kc = p.key_change_features(&store, &a, &b).unwrap();
        assert_eq!(kc.values.shape(), &[2, 64, 128]);
        assert!(kc.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn per_level_mode_concatenates() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = PerceiverConfig { per_level_perceiver: true, hidden: 8, ..PerceiverConfig::default() };
        let p = Perceiver::new(&mut store, &cfg, 16, &mut rng).unwrap();
        let (a, b) = (random_map(1, 16, 16, 2), random_map(1, 16, 16, 3));
        assert_eq!(p.estimate_flows(&store, &a, &b).unwrap().len(), 4);
        assert_eq!(p.key_change_features(&store, &a, &b).unwrap().values.shape(), &[1, 16, 16]);
    }

    #[test]
    fn constant_field_is_warp_invariant() {
        let f = Tensor::<f64>::full(&[1, 16, 3], 2.5);
        let flow = Tensor::full(&[1, 2, 4, 4], 0.5);
        assert_eq!(warp(&f, &flow).unwrap(), f);
    }

    #[test]
    fn non_square_grid_is_rejected() {
        assert!(MultiLevelFeatureMap::new(Tensor::<f64>::zeros(&[1, 12, 4])).is_err());
        let bad = warp(&Tensor::<f64>::zeros(&[1, 12, 4]), &Tensor::zeros(&[1, 2, 3, 4]));
        assert!(matches!(bad, Err(Error::Shape(_))));
    }
}
