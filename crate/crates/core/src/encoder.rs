//! Weight-sharing patch transformer producing multi-level features.
//!
//! Both images of a pair go through the same parameters. Activations are
//! tapped every `tap_interval` blocks and concatenated on the channel axis,
//! so the output width is `taps × channels`. Blocks carry no normalisation
//! or dropout.

use autograd::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{normal, Ctx, Linear, Mlp, SelfAttention};

/// Number of encoder taps concatenated into the multi-level feature.
pub const NUM_TAPS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch_size: usize,
    /// Channels per tap, `C`.
    pub channels: usize,
    pub depth: usize,
    pub tap_interval: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Fine-tune the encoder; when false its parameters are frozen.
    pub trainable: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { patch_size: 8, channels: 32, depth: 8, tap_interval: 2, heads: 4, mlp_ratio: 2, trainable: true }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tap_interval == 0 || !self.depth.is_multiple_of(self.tap_interval) {
            return Err(Error::Config(format!(
                "encoder depth {} is not divisible by tap_interval {}",
                self.depth, self.tap_interval
            )));
        }
        if self.depth / self.tap_interval != NUM_TAPS {
            return Err(Error::Config(format!(
                "encoder depth / tap_interval must be {NUM_TAPS}, got {}",
                self.depth / self.tap_interval
            )));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) || !(self.channels / self.heads).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "encoder channels {} must split into {} heads of even width",
                self.channels, self.heads
            )));
        }
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be positive".into()));
        }
        Ok(())
    }

    /// Width of the concatenated feature, `4C`.
    pub fn feature_dim(&self) -> usize {
        NUM_TAPS * self.channels
    }

    /// Patch grid for an `h × w` image.
    pub fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let p = self.patch_size;
        if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
            return Err(Error::Config(format!("image {h}x{w} is not divisible by patch size {p}")));
        }
        Ok((h / p, w / p))
    }
}

/// `B × N × 4C` features with a square `side × side` patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiLevelFeatureMap<T> {
    pub values: Tensor<T>,
    pub side: usize,
}

impl<T: Scalar> MultiLevelFeatureMap<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.ndim() != 3 {
            return Err(Error::Shape(format!("feature map must be B x N x C, got {:?}", values.shape())));
        }
        let n = values.shape()[1];
        let side = (n as f64).sqrt().round() as usize;
        if side * side != n {
            return Err(Error::Shape(format!("N = {n} is not a square number")));
        }
        Ok(Self { values, side })
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    /// `[N, C]` slice of batch item `b`.
    pub fn item(&self, b: usize) -> Tensor<T> {
        let (n, c) = (self.tokens(), self.channels());
        Tensor::new(&[n, c], self.values.data()[b * n * c..(b + 1) * n * c].to_vec())
    }

    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Input("empty batch".into()))?;
        let (n, c) = (first.shape()[0], first.shape()[1]);
        let mut data = Vec::with_capacity(items.len() * n * c);
        for it in items {
            if it.shape() != first.shape() {
                return Err(Error::Shape("batch items differ in shape".into()));
            }
            data.extend_from_slice(it.data());
        }
        Self::new(Tensor::new(&[items.len(), n, c], data))
    }
}

/// Splits an `[H, W, 3]` image into row-major `p × p` patches, each
/// flattened in `(dy, dx, channel)` order: `[N, p²·3]` with `N = HW/p²`.
pub fn patchify<T: Scalar>(image: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Shape(format!("expected H x W x 3 image, got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Config(format!("image {h}x{w} is not divisible by patch size {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(h * w * 3);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..p {
                let row = ((py * p + dy) * w + px * p) * 3;
                out.extend_from_slice(&image.data()[row..row + p * 3]);
            }
        }
    }
    Ok(Tensor::new(&[gh * gw, p * p * 3], out))
}

#[derive(Clone, Debug)]
struct Block {
    attn: SelfAttention,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub grid: (usize, usize),
    patch: Linear,
    pos: ParamId,
    blocks: Vec<Block>,
}

impl Encoder {
    pub const PREFIX: &'static str = "encoder.";

    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &EncoderConfig,
        image_h: usize,
        image_w: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid(image_h, image_w)?;
        let c = cfg.channels;
        let p = cfg.patch_size;
        let patch = Linear::fan_in(store, "encoder.patch", p * p * 3, c, 1.0, rng);
        let pos = store.add("encoder.pos", normal(&[grid.0 * grid.1, c], 0.02, rng));
        let out_std = 0.02;
        let blocks = (0..cfg.depth)
            .map(|i| Block {
                attn: SelfAttention::new(store, &format!("encoder.block{i}.attn"), c, cfg.heads, false, None, out_std, rng),
                mlp: Mlp::new(store, &format!("encoder.block{i}.mlp"), c, c * cfg.mlp_ratio, out_std, rng),
            })
            .collect();
        Ok(Self { cfg: cfg.clone(), grid, patch, pos, blocks })
    }

    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// `[N, p²·3]` patches → `[N, 4C]` multi-level features.
    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, '_, T>, patches: Var<'g, T>) -> Var<'g, T> {
        let mut x = self.patch.forward(cx, patches).add(cx.p(self.pos));
        let mut taps = Vec::with_capacity(NUM_TAPS);
        for (i, block) in self.blocks.iter().enumerate() {
            x = x.add(block.attn.forward(cx, x));
            x = x.add(block.mlp.forward(cx, x));
            if (i + 1) % self.cfg.tap_interval == 0 {
                taps.push(x);
            }
        }
        cx.g.concat(&taps, 1)
    }

    /// Encodes one `[H, W, 3]` image on the graph.
    pub fn encode_image<'g, T: Scalar>(&self, cx: &Ctx<'g, '_, T>, image: &Tensor<T>) -> Result<Var<'g, T>> {
        let s = image.shape();
        if s.len() != 3 || self.cfg.grid(s[0], s[1])? != self.grid {
            return Err(Error::Shape(format!("image {s:?} does not match the encoder grid {:?}", self.grid)));
        }
        let patches = patchify(image, self.cfg.patch_size)?;
        Ok(self.forward(cx, cx.constant(patches)))
    }

    /// Batch inference: `[B, H, W, 3]` pair → (`F_pre`, `F_post`), each `B × N × 4C`.
    pub fn encode_multilevel<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        pre: &Tensor<T>,
        post: &Tensor<T>,
    ) -> Result<(MultiLevelFeatureMap<T>, MultiLevelFeatureMap<T>)> {
        if pre.shape() != post.shape() {
            return Err(Error::Input(format!(
                "image pair shapes differ: {:?} vs {:?}",
                pre.shape(),
                post.shape()
            )));
        }
        if pre.ndim() != 4 {
            return Err(Error::Shape(format!("expected B x H x W x 3 batch, got {:?}", pre.shape())));
        }
        let per = pre.numel() / pre.shape()[0];
        let item_shape = &pre.shape()[1..];
        let run = |batch: &Tensor<T>| -> Result<MultiLevelFeatureMap<T>> {
            let items = batch
                .data()
                .chunks(per)
                .map(|chunk| {
                    let g = Graph::new();
                    let cx = Ctx::new(&g, store);
                    let img = Tensor::new(item_shape, chunk.to_vec());
                    Ok(self.encode_image(&cx, &img)?.value().as_ref().clone())
                })
                .collect::<Result<Vec<_>>>()?;
            MultiLevelFeatureMap::stack(&items)
        };
        Ok((run(pre)?, run(post)?))
    }
}
