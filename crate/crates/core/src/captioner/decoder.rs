use autograd::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{normal, Ctx, Linear, Mlp, SelfAttention};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Longest generated caption, `<eos>` included.
    pub max_len: usize,
    /// Longest total sequence (instruction plus caption).
    pub max_context: usize,
    pub rope_base: f64,
    /// Keep the language model fixed during joint training.
    pub frozen: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { d_model: 128, layers: 4, heads: 4, mlp_ratio: 4, max_len: 40, max_context: 320, rope_base: 10000.0, frozen: true }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) || !(self.d_model / self.heads).is_multiple_of(2) {
            return Err(Error::Config(format!(
                "d_model {} must split into {} heads of even width",
                self.d_model, self.heads
            )));
        }
        if self.layers == 0 || self.max_len < 2 || self.max_context <= self.max_len {
            return Err(Error::Config("decoder needs layers > 0 and max_context > max_len >= 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Layer {
    norm1: ParamId,
    attn: SelfAttention,
    norm2: ParamId,
    mlp: Mlp,
}

/// Causal pre-norm transformer language model with rotary positions.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub vocab_size: usize,
    pub embed: ParamId,
    layers: Vec<Layer>,
    final_norm: ParamId,
    pub head: Linear,
}

const NORM_EPS: f64 = 1e-6;

impl Decoder {
    pub const PREFIX: &'static str = "decoder.";

    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: &DecoderConfig,
        vocab_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let out_std = 0.02 / (2.0 * cfg.layers as f64).sqrt();
        let embed = store.add("decoder.embed", normal(&[vocab_size, d], 0.5, rng));
        let layers = (0..cfg.layers)
            .map(|i| Layer {
                norm1: store.add(format!("decoder.layer{i}.norm1"), Tensor::full(&[d], T::one())),
                attn: SelfAttention::new(
                    store,
                    &format!("decoder.layer{i}.attn"),
                    d,
                    cfg.heads,
                    true,
                    Some(cfg.rope_base),
                    out_std,
                    rng,
                ),
                norm2: store.add(format!("decoder.layer{i}.norm2"), Tensor::full(&[d], T::one())),
                mlp: Mlp::new(store, &format!("decoder.layer{i}.mlp"), d, d * cfg.mlp_ratio, out_std, rng),
            })
            .collect();
        let final_norm = store.add("decoder.norm", Tensor::full(&[d], T::one()));
        let head = Linear::fan_in(store, "decoder.head", d, vocab_size, 1.0, rng);
        Ok(Self { cfg: cfg.clone(), vocab_size, embed, layers, final_norm, head })
    }

    /// Embedding-table rows for `ids`, `[len, d_model]`.
    pub fn embed_ids<'g, T: Scalar>(&self, cx: &Ctx<'g, '_, T>, ids: &[usize]) -> Var<'g, T> {
        cx.p(self.embed).gather_rows(ids)
    }

    /// Runs the transformer over `prefix ∥ embed(ids)` and returns logits
    /// `[ids.len(), V]` at the token positions.
    pub fn forward<'g, T: Scalar>(
        &self,
        cx: &Ctx<'g, '_, T>,
        prefix: Option<Var<'g, T>>,
        ids: &[usize],
    ) -> Result<Var<'g, T>> {
        let p = prefix.map_or(0, |v| v.shape()[0]);
        let total = p + ids.len();
        if total > self.cfg.max_context {
            return Err(Error::Input(format!("sequence of {total} exceeds max context {}", self.cfg.max_context)));
        }
        if ids.is_empty() {
            return Err(Error::Input("decoder needs at least one token".into()));
        }
        let tokens = self.embed_ids(cx, ids);
        let mut x = match prefix {
            Some(pre) => cx.g.concat(&[pre, tokens], 0),
            None => tokens,
        };
        let eps = T::from_f64c(NORM_EPS);
        for layer in &self.layers {
            x = x.add(layer.attn.forward(cx, x.rms_norm(cx.p(layer.norm1), eps)));
            x = x.add(layer.mlp.forward(cx, x.rms_norm(cx.p(layer.norm2), eps)));
        }
        let x = if p > 0 { x.narrow(0, p, ids.len()) } else { x };
        Ok(self.head.forward(cx, x.rms_norm(cx.p(self.final_norm), eps)))
    }

    /// Greedy decoding from `<bos>`; stops at `<eos>` or after `max_len`
    /// tokens. Ties go to the lowest id. The result excludes `<bos>` and
    /// includes `<eos>` when one was produced.
    pub fn generate<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        prefix: Option<&Tensor<T>>,
        bos: usize,
        eos: usize,
    ) -> Result<Vec<usize>> {
        let mut ids = vec![bos];
        while ids.len() <= self.cfg.max_len {
            let g = Graph::new();
            let cx = Ctx::new(&g, store);
            let pre = prefix.map(|t| cx.constant(t.clone()));
            let logits = self.forward(&cx, pre, &ids)?.value();
            let v = logits.last_dim();
            let last = &logits.data()[(ids.len() - 1) * v..];
            let next = argmax(last);
            ids.push(next);
            if next == eos {
                break;
            }
        }
        ids.remove(0);
        Ok(ids)
    }
}

/// Index of the largest value, first one on ties.
pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Mean token cross-entropy over non-pad targets. An all-pad target gives 0.
pub fn caption_loss<'g, T: Scalar>(logits: Var<'g, T>, targets: &[usize], pad: usize) -> Var<'g, T> {
    let t: Vec<Option<usize>> = targets.iter().map(|&id| (id != pad).then_some(id)).collect();
    if t.iter().all(Option::is_none) {
        log::warn!("caption target contains only padding; loss set to 0");
    }
    logits.cross_entropy(&t)
}
