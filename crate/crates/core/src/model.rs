//! The assembled change captioner: shared encoder, key-change perceiver,
//! visual projection, instruction decoder and detection head.

use autograd::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::captioner::{
    splice_vars, Decoder, DecoderConfig, ImageTokenMode, InstructionTemplate, Piece, Projection, DEFAULT_TEMPLATES,
};
use crate::datagen::{BiTemporalSample, Mask, Vocabulary};
use crate::detector::{ChangeMaskPrediction, Detector, DetectorConfig, NUM_CLASSES};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::perceiver::{Perceiver, PerceiverConfig};

/// Architecture hyperparameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub perceiver: PerceiverConfig,
    pub decoder: DecoderConfig,
    pub detector: DetectorConfig,
}

/// Which optional parts are built and how the instruction is filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub use_cfe: bool,
    pub use_cdh: bool,
    pub image_token_mode: ImageTokenMode,
}

impl Default for Variant {
    fn default() -> Self {
        Self { use_cfe: true, use_cdh: true, image_token_mode: ImageTokenMode::Change }
    }
}

/// A sample converted for the model: images in `T`, caption token ids.
#[derive(Clone, Debug)]
pub struct PreparedSample<T> {
    pub pre: Tensor<T>,
    pub post: Tensor<T>,
    pub mask: Mask,
    /// Token ids of every reference caption, without specials.
    pub captions: Vec<Vec<usize>>,
}

/// Per-sample losses on a graph.
pub struct SampleLosses<'g, T: Scalar> {
    pub caption: Var<'g, T>,
    pub detection: Option<Var<'g, T>>,
}

#[derive(Clone, Debug)]
pub struct Prediction<T> {
    /// Generated ids, `<eos>` excluded.
    pub ids: Vec<usize>,
    pub text: String,
    pub mask: Option<ChangeMaskPrediction<T>>,
}

#[derive(Clone, Debug)]
pub struct ChangeCaptioner {
    pub config: ModelConfig,
    pub variant: Variant,
    pub image_size: (usize, usize),
    pub vocab: Vocabulary,
    pub encoder: Encoder,
    pub perceiver: Option<Perceiver>,
    pub projection: Projection,
    pub decoder: Decoder,
    pub detector: Option<Detector>,
    templates: Vec<Vec<Piece>>,
}

impl ChangeCaptioner {
    /// Builds all parameters into `store`. `templates` are base templates
    /// with one `<image>` each; `None` uses the defaults.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        config: &ModelConfig,
        variant: Variant,
        vocab: Vocabulary,
        templates: Option<&[String]>,
        image_size: (usize, usize),
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if variant.use_cdh && !variant.use_cfe {
            return Err(Error::Config("the detection head requires the key-change perceiver (use_cdh needs use_cfe)".into()));
        }
        let encoder = Encoder::new(store, &config.encoder, image_size.0, image_size.1, rng)?;
        let dim = config.encoder.feature_dim();
        let perceiver = variant.use_cfe.then(|| Perceiver::new(store, &config.perceiver, dim, rng)).transpose()?;
        let projection = Projection::new(store, dim, config.decoder.d_model, encoder.tokens(), rng);
        let decoder = Decoder::new(store, &config.decoder, vocab.len(), rng)?;
        let detector = variant.use_cdh.then(|| Detector::new(store, &config.detector, dim, rng)).transpose()?;
        let base: Vec<String> = match templates {
            Some(t) if !t.is_empty() => t.to_vec(),
            Some(_) => return Err(Error::Config("empty template list".into())),
            None => DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
        };
        let templates = base
            .iter()
            .map(|b| Ok(InstructionTemplate::expand(b, variant.image_token_mode)?.pieces(&vocab)))
            .collect::<Result<Vec<_>>>()?;
        let model = Self {
            config: config.clone(),
            variant,
            image_size,
            vocab,
            encoder,
            perceiver,
            projection,
            decoder,
            detector,
            templates,
        };
        let longest = model.templates.iter().map(|t| model.prefix_len(t)).max().unwrap_or(0);
        if longest + config.decoder.max_len > config.decoder.max_context {
            return Err(Error::Config(format!(
                "instruction of {longest} positions plus max_len {} exceeds max_context {}",
                config.decoder.max_len, config.decoder.max_context
            )));
        }
        Ok(model)
    }

    pub fn num_templates(&self) -> usize {
        self.templates.len()
    }

    fn prefix_len(&self, pieces: &[Piece]) -> usize {
        let n = self.encoder.tokens();
        pieces.iter().map(|p| if *p == Piece::Image { n } else { 1 }).sum()
    }

    /// Parameters tuned at the vision learning rate.
    pub fn is_vision_param<T: Scalar>(store: &ParamStore<T>, id: ParamId) -> bool {
        let name = &store.get(id).name;
        name.starts_with(Encoder::PREFIX) || name.starts_with(Projection::PREFIX)
    }

    pub fn prepare<T: Scalar>(&self, sample: &BiTemporalSample) -> Result<PreparedSample<T>> {
        let s = sample.image_pre.shape();
        if (s[0], s[1]) != self.image_size {
            return Err(Error::Input(format!(
                "sample is {}x{} but the model expects {}x{}",
                s[0], s[1], self.image_size.0, self.image_size.1
            )));
        }
        let keep = self.config.decoder.max_len - 1;
        Ok(PreparedSample {
            pre: sample.image_pre.cast(),
            post: sample.image_post.cast(),
            mask: sample.change_mask.clone(),
            captions: sample
                .captions
                .iter()
                .map(|c| {
                    let mut ids = self.vocab.encode(c);
                    ids.truncate(keep);
                    ids
                })
                .collect(),
        })
    }

    /// Key-change features (or the raw difference without the perceiver)
    /// and the visual token sets for the instruction slots.
    fn visual<'g, T: Scalar>(
        &self,
        cx: &Ctx<'g, '_, T>,
        pre: &Tensor<T>,
        post: &Tensor<T>,
    ) -> Result<(Var<'g, T>, Vec<Var<'g, T>>)> {
        let f_pre = self.encoder.encode_image(cx, pre)?;
        let f_post = self.encoder.encode_image(cx, post)?;
        let mode = self.variant.image_token_mode;
        let side = self.encoder.grid.0;
        let kc = match &self.perceiver {
            Some(p) => p.forward(cx, f_pre, f_post, side).key_change,
            None => f_pre.sub(f_post).abs(),
        };
        let proj = |v| self.projection.forward(cx, v);
        let sets = match mode {
            ImageTokenMode::Change => vec![proj(kc)],
            ImageTokenMode::Bitemporal => vec![proj(f_pre), proj(f_post)],
            ImageTokenMode::Both => vec![proj(f_pre), proj(f_post), proj(kc)],
        };
        Ok((kc, sets))
    }

    fn prefix<'g, T: Scalar>(&self, cx: &Ctx<'g, '_, T>, template: usize, sets: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        let pieces = self
            .templates
            .get(template)
            .ok_or_else(|| Error::Input(format!("template {template} out of range")))?;
        let ids: Vec<usize> = pieces.iter().filter_map(|p| if let Piece::Text(id) = p { Some(*id) } else { None }).collect();
        let text = (!ids.is_empty()).then(|| self.decoder.embed_ids(cx, &ids));
        Ok(splice_vars(cx.g, pieces, text, sets)?.0)
    }

    /// Caption and detection losses of one sample, teacher-forced on
    /// reference `caption` with instruction `template`.
    pub fn forward_train<'g, T: Scalar>(
        &self,
        cx: &Ctx<'g, '_, T>,
        sample: &PreparedSample<T>,
        template: usize,
        caption: usize,
    ) -> Result<SampleLosses<'g, T>> {
        let (kc, sets) = self.visual(cx, &sample.pre, &sample.post)?;
        let prefix = self.prefix(cx, template, &sets)?;
        let target = sample
            .captions
            .get(caption)
            .ok_or_else(|| Error::Input(format!("caption {caption} out of range")))?;
        let mut input = vec![self.vocab.bos()];
        input.extend_from_slice(target);
        let mut output = target.clone();
        output.push(self.vocab.eos());
        let logits = self.decoder.forward(cx, Some(prefix), &input)?;
        let caption = crate::captioner::caption_loss(logits, &output, self.vocab.pad());
        let detection = match &self.detector {
            Some(det) => {
                let (h, w) = self.image_size;
                let probs = det.forward(cx, kc, self.encoder.grid.0, h, w);
                Some(det.loss(probs, &sample.mask))
            }
            None => None,
        };
        Ok(SampleLosses { caption, detection })
    }

    /// Greedy caption (first template) and, with the head, the change mask.
    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, pre: &Tensor<T>, post: &Tensor<T>) -> Result<Prediction<T>> {
        let g = Graph::new();
        let cx = Ctx::new(&g, store);
        let (kc, sets) = self.visual(&cx, pre, post)?;
        let prefix = self.prefix(&cx, 0, &sets)?.value();
        let mask = match &self.detector {
            Some(det) => {
                let (h, w) = self.image_size;
                let probs = det.forward(&cx, kc, self.encoder.grid.0, h, w).value();
                Some(ChangeMaskPrediction {
                    probabilities: probs.permute(&[1, 0]).reshape(&[1, NUM_CLASSES, h, w]),
                })
            }
            None => None,
        };
        let mut ids = self.decoder.generate(store, Some(&prefix), self.vocab.bos(), self.vocab.eos())?;
        if ids.last() == Some(&self.vocab.eos()) {
            ids.pop();
        }
        let text = self.vocab.decode(&ids);
        Ok(Prediction { ids, text, mask })
    }
}
