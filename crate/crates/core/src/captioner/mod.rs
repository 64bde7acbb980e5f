//! Instruction handling, visual-token projection and the caption decoder.

mod decoder;
mod instruction;

pub use decoder::{argmax, caption_loss, Decoder, DecoderConfig};
pub use instruction::{
    instruction_words, load_templates, splice_image_tokens, splice_vars, ImageTokenMode, InstructionEmbedding,
    InstructionTemplate, Piece, DEFAULT_TEMPLATES,
};

use autograd::{ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;

use crate::datagen::Vocabulary;
use crate::error::{Error, Result};
use crate::nn::{normal, Ctx, Linear};

/// Affine map from visual features into the decoder's embedding space.
#[derive(Clone, Debug)]
pub struct Projection {
    pub linear: Linear,
    /// Learned `[tokens, d_model]` table added to the projected tokens, so a
    /// visual token carries its grid location.
    pub pos: ParamId,
    pub tokens: usize,
}

impl Projection {
    pub const PREFIX: &'static str = "projection.";

    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        in_dim: usize,
        d_model: usize,
        tokens: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let linear = Linear::fan_in(store, "projection", in_dim, d_model, 1.0, rng);
        let pos = store.add("projection.pos", normal(&[tokens, d_model], 0.5, rng));
        Self { linear, pos, tokens }
    }

    /// `[tokens, in_dim]` → `[tokens, d_model]`.
    pub fn forward<'g, T: Scalar>(&self, cx: &Ctx<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        self.linear.forward(cx, x).add(cx.p(self.pos))
    }
}

/// `B × N × 4C` → `B × N × d_model`, applied per position.
pub fn project_v2l<T: Scalar>(store: &ParamStore<T>, proj: &Projection, features: &Tensor<T>) -> Result<Tensor<T>> {
    let s = features.shape();
    if s.len() != 3 || s[2] != proj.linear.in_dim {
        return Err(Error::Shape(format!("expected B x N x {}, got {s:?}", proj.linear.in_dim)));
    }
    if s[1] != proj.tokens {
        return Err(Error::Shape(format!("expected {} tokens, got {}", proj.tokens, s[1])));
    }
    let flat = features.clone().reshape(&[s[0] * s[1], s[2]]);
    let mut out = proj.linear.apply(store, &flat);
    let pos = store.value(proj.pos);
    let n = pos.numel();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += pos.data()[i % n];
    }
    Ok(out.reshape(&[s[0], s[1], proj.linear.out_dim]))
}

/// Embeds the text words of `template` and leaves the image slots unfilled:
/// returns the pieces and the `[text words, d_model]` vectors.
pub fn embed_instruction<T: Scalar>(
    store: &ParamStore<T>,
    decoder: &Decoder,
    template: &InstructionTemplate,
    vocab: &Vocabulary,
) -> (Vec<Piece>, Tensor<T>) {
    let pieces = template.pieces(vocab);
    let table = store.value(decoder.embed);
    let d = table.last_dim();
    let mut data = Vec::new();
    for p in &pieces {
        if let Piece::Text(id) = p {
            data.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
        }
    }
    let rows = data.len() / d;
    (pieces, Tensor::new(&[rows, d], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::build_vocab;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn projection_zero_and_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let proj = Projection::new(&mut store, 4, 4, 3, &mut rng);
        store.set_value(proj.pos, Tensor::zeros(&[3, 4]));
        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f64 - 5.0);
        store.set_value(proj.linear.w, Tensor::zeros(&[4, 4]));
        assert!(project_v2l(&store, &proj, &x).unwrap().data().iter().all(|&v| v == 0.0));
        store.set_value(proj.linear.w, Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 }));
        assert_eq!(project_v2l(&store, &proj, &x).unwrap(), x);
    }

    #[test]
    fn embed_instruction_uses_table_rows() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vocab = build_vocab(&DEFAULT_TEMPLATES);
        let cfg = DecoderConfig { d_model: 8, layers: 1, heads: 2, ..DecoderConfig::default() };
        let dec = Decoder::new(&mut store, &cfg, vocab.len(), &mut rng).unwrap();
        let tpl = InstructionTemplate::new(DEFAULT_TEMPLATES[0], ImageTokenMode::Change).unwrap();
        let (pieces, text) = embed_instruction(&store, &dec, &tpl, &vocab);
        assert_eq!(text.rows(), pieces.len() - 1);
        let id = vocab.id("this").unwrap();
        assert_eq!(&text.data()[..8], &store.value(dec.embed).data()[id * 8..(id + 1) * 8]);
    }
}
