//! Language-model pretraining, joint training, evaluation and checkpoints.

mod ablation;
mod checkpoint;
mod dwa;
mod schedule;

pub use ablation::{ablation_markdown, median, run_ablation, AblationResult, AblationRow, ABLATION_GRID};
pub use checkpoint::{read_manifest, Checkpoint, CheckpointKind, Manifest, ParamEntry, FORMAT_VERSION, MANIFEST, WEIGHTS};
pub use dwa::{dwa_weights, total_loss, DwaConfig, DwaGranularity, TaskWeightState, NUM_TASKS};
pub use schedule::CosineSchedule;

use std::io::Write;
use std::path::Path;

use autograd::{AdamW, Grads, Graph, ParamStore, Scalar};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::captioner::{
    caption_loss, splice_vars, Decoder, DecoderConfig, ImageTokenMode, InstructionTemplate, Piece, DEFAULT_TEMPLATES,
};
use crate::config::RunConfig;
use crate::datagen::{build_vocab, tokenize, BiTemporalSample, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::{Confusion, MetricsReport};
use crate::model::{ChangeCaptioner, PreparedSample};
use crate::nn::Ctx;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate of every trainable group except the vision one.
    pub lr: f64,
    /// Learning rate of the encoder and the visual projection.
    pub vision_lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub seed: u64,
    pub finetune_vision: bool,
    pub use_cfe: bool,
    pub use_cdh: bool,
    pub use_dwa: bool,
    pub freeze_lm: bool,
    pub image_token_mode: ImageTokenMode,
    pub dwa: DwaConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 4,
            lr: 3e-3,
            vision_lr: 1e-3,
            weight_decay: 5e-4,
            warmup_ratio: 0.03,
            seed: 0,
            finetune_vision: true,
            use_cfe: true,
            use_cdh: true,
            use_dwa: true,
            freeze_lm: true,
            image_token_mode: ImageTokenMode::Change,
            dwa: DwaConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.vision_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!("warmup_ratio {} not in [0, 1)", self.warmup_ratio)));
        }
        if self.weight_decay < 0.0 || !(self.dwa.temperature > 0.0) {
            return Err(Error::Config("weight_decay must be >= 0 and the DWA temperature > 0".into()));
        }
        if self.use_cdh && !self.use_cfe {
            return Err(Error::Config("use_cdh requires use_cfe".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub seed: u64,
    /// Condition each caption on a paraphrase placed in the instruction's
    /// image slot; plain next-token training when false.
    pub paraphrase_context: bool,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr: 3e-3,
            weight_decay: 5e-4,
            warmup_ratio: 0.03,
            seed: 0,
            paraphrase_context: true,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) || !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config("lm needs positive epochs, batch_size, lr and warmup_ratio in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Vocabulary over the captions and the instruction templates.
pub fn corpus_vocab<S: AsRef<str>>(captions: &[S], templates: &[String]) -> Vocabulary {
    let mut all: Vec<&str> = captions.iter().map(AsRef::as_ref).collect();
    all.extend(templates.iter().map(String::as_str));
    build_vocab(&all)
}

pub fn default_templates() -> Vec<String> {
    DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect()
}

fn sum_grads<T: Scalar>(parts: Vec<Grads<T>>) -> Grads<T> {
    let mut total = Grads::new();
    for g in parts {
        total.merge(g);
    }
    total
}

/// Decoder trained as a next-token model.
pub struct LmOutcome<T> {
    pub decoder: Decoder,
    pub store: ParamStore<T>,
    pub vocab: Vocabulary,
    /// Training perplexity per epoch, measured during the epoch.
    pub perplexity: Vec<f64>,
}

impl<T: Scalar> LmOutcome<T> {
    pub fn checkpoint(&self, config: &RunConfig, templates: Vec<String>) -> Checkpoint<T> {
        let epochs = self.perplexity.len();
        let mut ck = Checkpoint::new(CheckpointKind::Lm, epochs, config.clone(), self.vocab.clone(), templates, self.store.clone());
        ck.manifest.metrics = self.perplexity.last().map(|p| serde_json::json!({ "perplexity": p }));
        ck
    }
}

/// Trains the decoder on `corpus` with teacher forcing. `corpus` holds the
/// reference captions grouped by image. With `cfg.paraphrase_context`, each
/// caption is predicted after an instruction whose image slot holds the word
/// embeddings of another caption of the same group.
pub fn pretrain_lm<T: Scalar>(
    corpus: &[Vec<String>],
    vocab: Vocabulary,
    templates: &[String],
    decoder_cfg: &DecoderConfig,
    cfg: &LmConfig,
) -> Result<LmOutcome<T>> {
    cfg.validate()?;
    let encoded: Vec<Vec<Vec<usize>>> = corpus
        .iter()
        .filter(|g| !g.is_empty())
        .map(|g| {
            g.iter()
                .map(|c| {
                    let mut ids = vocab.encode(c);
                    ids.truncate(decoder_cfg.max_len - 1);
                    ids
                })
                .collect()
        })
        .collect();
    let items: Vec<(usize, usize)> =
        encoded.iter().enumerate().flat_map(|(g, caps)| (0..caps.len()).map(move |c| (g, c))).collect();
    if items.is_empty() {
        return Err(Error::Config("empty language-model corpus".into()));
    }
    if items.len() < cfg.batch_size {
        return Err(Error::Config(format!(
            "corpus of {} sentences is smaller than the batch size {}",
            items.len(),
            cfg.batch_size
        )));
    }
    let pieces: Vec<Vec<Piece>> = templates
        .iter()
        .map(|t| Ok(InstructionTemplate::expand(t, ImageTokenMode::Change)?.pieces(&vocab)))
        .collect::<Result<_>>()?;
    if cfg.paraphrase_context && pieces.is_empty() {
        return Err(Error::Config("paraphrase context needs at least one template".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::<T>::new();
    let decoder = Decoder::new(&mut store, decoder_cfg, vocab.len(), &mut rng)?;
    let steps_per_epoch = items.len() / cfg.batch_size;
    let schedule = CosineSchedule::new(cfg.epochs * steps_per_epoch, cfg.warmup_ratio);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut perplexity = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut nll, mut tokens) = (0.0, 0usize);
        for batch in order.chunks_exact(cfg.batch_size) {
            let picks: Vec<(usize, usize, usize, usize)> = batch
                .iter()
                .map(|&i| {
                    let (g, c) = items[i];
                    let n = encoded[g].len();
                    let ctx = if n > 1 { (c + rng.random_range(1..n)) % n } else { c };
                    let t = if cfg.paraphrase_context { rng.random_range(0..pieces.len()) } else { 0 };
                    (g, c, ctx, t)
                })
                .collect();
            let batch_tokens: usize = picks.iter().map(|&(g, c, _, _)| encoded[g][c].len() + 1).sum();
            let weight = T::from_f64c(1.0 / batch_tokens as f64);
            let results: Vec<Result<(f64, Grads<T>)>> = picks
                .par_iter()
                .map(|&(g, c, ctx, t)| {
                    let ids = &encoded[g][c];
                    let mut input = vec![vocab.bos()];
                    input.extend_from_slice(ids);
                    let mut target = ids.clone();
                    target.push(vocab.eos());
                    let graph = Graph::new();
                    let cx = Ctx::new(&graph, &store);
                    let prefix = if cfg.paraphrase_context {
                        Some(paraphrase_prefix(&cx, &decoder, &pieces[t], &encoded[g][ctx], vocab.pad())?)
                    } else {
                        None
                    };
                    let logits = decoder.forward(&cx, prefix, &input)?;
                    let loss = caption_loss(logits, &target, vocab.pad());
                    let n = target.len() as f64;
                    let sample_nll = loss.item().to_f64c() * n;
                    Ok((sample_nll, graph.backward(loss.scale(T::from_f64c(n) * weight)).into_params()))
                })
                .collect();
            let mut parts = Vec::with_capacity(batch.len());
            for r in results {
                let (l, g) = r?;
                nll += l;
                parts.push(g);
            }
            tokens += batch_tokens;
            let grads = sum_grads(parts);
            if !grads.is_finite() {
                return Err(Error::NonFinite(format!("language-model gradient at epoch {}", epoch + 1)));
            }
            let lr = cfg.lr * schedule.factor(step);
            opt.step(&mut store, &grads, |_| lr);
            step += 1;
        }
        let ppl = (nll / tokens as f64).exp();
        log::info!("lm epoch {}: perplexity {ppl:.4}", epoch + 1);
        perplexity.push(ppl);
    }
    Ok(LmOutcome { decoder, store, vocab, perplexity })
}

fn paraphrase_prefix<'g, T: Scalar>(
    cx: &Ctx<'g, '_, T>,
    decoder: &Decoder,
    pieces: &[Piece],
    context: &[usize],
    pad: usize,
) -> Result<autograd::Var<'g, T>> {
    let ids: Vec<usize> = pieces.iter().filter_map(|p| if let Piece::Text(id) = p { Some(*id) } else { None }).collect();
    let text = (!ids.is_empty()).then(|| decoder.embed_ids(cx, &ids));
    let slot = if context.is_empty() { vec![decoder.embed_ids(cx, &[pad])] } else { vec![decoder.embed_ids(cx, context)] };
    Ok(splice_vars(cx.g, pieces, text, &slot)?.0)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_cap: f64,
    pub l_det: Option<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Global learning rate at the last step of the epoch.
    pub lr: f64,
    /// Encoder and projection learning rate at the same step.
    pub lr_vision: f64,
}

/// A trained model with its parameters.
pub struct Trained<T> {
    pub model: ChangeCaptioner,
    pub store: ParamStore<T>,
    pub config: RunConfig,
    pub templates: Vec<String>,
}

impl<T: Scalar> Trained<T> {
    pub fn checkpoint(&self, epoch: usize) -> Checkpoint<T> {
        Checkpoint::new(
            CheckpointKind::Model,
            epoch,
            self.config.clone(),
            self.model.vocab.clone(),
            self.templates.clone(),
            self.store.clone(),
        )
    }

    /// Rebuilds a model from a joint-training checkpoint.
    pub fn from_checkpoint(ckpt: Checkpoint<T>) -> Result<Self> {
        let m = ckpt.manifest;
        if m.kind != CheckpointKind::Model {
            return Err(Error::Input("expected a model checkpoint, found a language-model one".into()));
        }
        let config = m.config;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let size = config.data.image_size;
        let model = ChangeCaptioner::new(
            &mut store,
            &config.model,
            config.variant(),
            m.vocab,
            Some(&m.templates),
            (size, size),
            &mut rng,
        )?;
        let copied = store.load_matching(&ckpt.store);
        if copied.len() != store.len() || store.len() != ckpt.store.len() {
            return Err(Error::Format {
                file: MANIFEST.into(),
                reason: format!("{} of {} parameters matched the checkpoint", copied.len(), store.len()),
            });
        }
        for (id, p) in ckpt.store.iter() {
            let own = store.find(&p.name).expect("matched above");
            store.set_trainable(own, ckpt.store.is_trainable(id));
        }
        Ok(Self { model, store, config, templates: m.templates })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(dir)?)
    }
}

#[derive(Default)]
pub struct FitOptions<'a> {
    /// Saved after every epoch, so it holds the last good state on failure.
    pub checkpoint_dir: Option<&'a Path>,
    /// JSON lines, one [`EpochLog`] per epoch.
    pub log: Option<&'a mut dyn Write>,
}

pub struct FitOutcome<T> {
    pub trained: Trained<T>,
    pub log: Vec<EpochLog>,
}

/// Joint training on `samples`. With `lm`, the decoder starts from its
/// weights and the vocabulary is taken from it.
pub fn fit<T: Scalar>(
    samples: &[BiTemporalSample],
    config: &RunConfig,
    lm: Option<&Checkpoint<T>>,
    templates: Option<&[String]>,
    mut opts: FitOptions<'_>,
) -> Result<FitOutcome<T>> {
    config.validate()?;
    let tc = &config.train;
    let first = samples.first().ok_or_else(|| Error::Input("no training samples".into()))?;
    let shape = first.image_pre.shape();
    let (h, w) = (shape[0], shape[1]);
    if h != w {
        return Err(Error::Input(format!("images must be square, got {h}x{w}")));
    }
    let mut config = config.clone();
    config.data.image_size = h;
    let templates: Vec<String> = match (templates, lm) {
        (Some(t), _) => t.to_vec(),
        (None, Some(ck)) => ck.manifest.templates.clone(),
        (None, None) => default_templates(),
    };
    let vocab = match lm {
        Some(ck) => ck.manifest.vocab.clone(),
        None => {
            log::warn!("no language-model checkpoint: the decoder starts from random weights");
            let caps: Vec<&str> = samples.iter().flat_map(|s| s.captions.iter().map(String::as_str)).collect();
            corpus_vocab(&caps, &templates)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut store = ParamStore::new();
    let model = ChangeCaptioner::new(&mut store, &config.model, config.variant(), vocab, Some(&templates), (h, w), &mut rng)?;
    if let Some(ck) = lm {
        if ck.manifest.kind != CheckpointKind::Lm {
            return Err(Error::Input("expected a language-model checkpoint".into()));
        }
        if ck.manifest.config.model.decoder != config.model.decoder {
            let mut a = ck.manifest.config.model.decoder.clone();
            a.frozen = config.model.decoder.frozen;
            if a != config.model.decoder {
                return Err(Error::Config("decoder settings differ from the language-model checkpoint".into()));
            }
        }
        let copied = store.load_matching(&ck.store);
        let expected = store.iter().filter(|(_, p)| p.name.starts_with(Decoder::PREFIX)).count();
        if copied.len() != expected {
            return Err(Error::Format {
                file: MANIFEST.into(),
                reason: format!("language model supplied {} of {expected} decoder tensors", copied.len()),
            });
        }
    }
    store.set_trainable_prefix(Decoder::PREFIX, !tc.freeze_lm);
    store.set_trainable_prefix(crate::encoder::Encoder::PREFIX, tc.finetune_vision);

    let prepared: Vec<PreparedSample<T>> = samples.iter().map(|s| model.prepare(s)).collect::<Result<_>>()?;
    let steps_per_epoch = prepared.len().div_ceil(tc.batch_size);
    let schedule = CosineSchedule::new(tc.epochs * steps_per_epoch, tc.warmup_ratio);
    let vision: Vec<bool> = store.ids().map(|id| ChangeCaptioner::is_vision_param(&store, id)).collect();
    let mut opt = AdamW::new(tc.weight_decay);
    let mut dwa = TaskWeightState::new(tc.dwa.temperature);
    let use_dwa = tc.use_dwa && tc.use_cdh;
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut log_rows = Vec::with_capacity(tc.epochs);
    let mut step = 0;
    let mut trained = Trained { model, store, config: config.clone(), templates };
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let (mut cap_sum, mut det_sum) = (0.0, 0.0);
        let mut lr_last = (0.0, 0.0);
        for batch in order.chunks(tc.batch_size) {
            let lambda = if use_dwa { dwa.lambda } else { [1.0, 1.0] };
            let picks: Vec<(usize, usize, usize)> = batch
                .iter()
                .map(|&i| {
                    let t = rng.random_range(0..trained.model.num_templates());
                    let c = rng.random_range(0..prepared[i].captions.len());
                    (i, t, c)
                })
                .collect();
            let scale = 1.0 / batch.len() as f64;
            let model = &trained.model;
            let store = &trained.store;
            let results: Vec<Result<(f64, Option<f64>, Grads<T>)>> = picks
                .par_iter()
                .map(|&(i, t, c)| {
                    let g = Graph::new();
                    let cx = Ctx::new(&g, store);
                    let losses = model.forward_train(&cx, &prepared[i], t, c)?;
                    let lc = losses.caption.item().to_f64c();
                    let ld = losses.detection.map(|d| d.item().to_f64c());
                    let mut total = losses.caption.scale(T::from_f64c(lambda[0] * scale));
                    if let Some(d) = losses.detection {
                        total = total.add(d.scale(T::from_f64c(lambda[1] * scale)));
                    }
                    Ok((lc, ld, g.backward(total).into_params()))
                })
                .collect();
            let (mut bc, mut bd) = (0.0, 0.0);
            let mut parts = Vec::with_capacity(batch.len());
            for r in results {
                let (lc, ld, g) = r?;
                total_loss(lc, ld.unwrap_or(0.0), (lambda[0], lambda[1]))
                    .map_err(|e| Error::NonFinite(format!("epoch {epoch}: {e}")))?;
                bc += lc;
                bd += ld.unwrap_or(0.0);
                parts.push(g);
            }
            let grads = sum_grads(parts);
            if !grads.is_finite() {
                return Err(Error::NonFinite(format!("gradient at epoch {epoch}")));
            }
            cap_sum += bc;
            det_sum += bd;
            let f = schedule.factor(step);
            lr_last = (tc.lr * f, tc.vision_lr * f);
            opt.step(&mut trained.store, &grads, |id| if vision[id.0] { lr_last.1 } else { lr_last.0 });
            step += 1;
            if use_dwa && tc.dwa.granularity == DwaGranularity::Step {
                let n = batch.len() as f64;
                dwa.record([bc / n, bd / n]);
            }
        }
        let n = prepared.len() as f64;
        let (l_cap, l_det) = (cap_sum / n, det_sum / n);
        let used = if use_dwa { dwa.lambda } else { [1.0, 1.0] };
        if use_dwa && tc.dwa.granularity == DwaGranularity::Epoch {
            dwa.record([l_cap, l_det]);
        }
        let row = EpochLog {
            epoch,
            l_cap,
            l_det: tc.use_cdh.then_some(l_det),
            lambda1: used[0],
            lambda2: used[1],
            lr: lr_last.0,
            lr_vision: lr_last.1,
        };
        log::info!(
            "epoch {epoch}: l_cap {l_cap:.4} l_det {l_det:.4} lambda ({:.3}, {:.3}) lr {:.2e}",
            used[0],
            used[1],
            lr_last.0
        );
        if let Some(w) = opts.log.as_mut() {
            let line = serde_json::to_string(&row).expect("log row serializes");
            writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        log_rows.push(row);
        if let Some(dir) = opts.checkpoint_dir {
            trained.checkpoint(epoch).save(dir)?;
        }
    }
    Ok(FitOutcome { trained, log: log_rows })
}

/// Predictions and scores over a sample set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// Fraction of samples whose caption equals one of its references.
    pub exact_match: f64,
    pub predictions: Vec<String>,
}

/// True when `candidate` equals one of `references` after tokenisation.
pub fn is_exact_match(candidate: &str, references: &[String]) -> bool {
    let c = tokenize(candidate);
    references.iter().any(|r| tokenize(r) == c)
}

pub fn evaluate<T: Scalar>(trained: &Trained<T>, samples: &[BiTemporalSample]) -> Result<Evaluation> {
    let model = &trained.model;
    let threshold = model.config.detector.threshold;
    let outputs: Vec<Result<(String, Option<Confusion>)>> = samples
        .par_iter()
        .map(|s| {
            let p = model.prepare::<T>(s)?;
            let pred = model.predict(&trained.store, &p.pre, &p.post)?;
            let conf = match &pred.mask {
                Some(m) => Some(Confusion::from_masks(&m.to_mask(0, threshold), &s.change_mask)?),
                None => None,
            };
            Ok((pred.text, conf))
        })
        .collect();
    let mut predictions = Vec::with_capacity(samples.len());
    let mut confusion: Option<Confusion> = None;
    for o in outputs {
        let (text, conf) = o?;
        predictions.push(text);
        if let Some(c) = conf {
            confusion.get_or_insert_with(Confusion::default).add(c);
        }
    }
    let refs: Vec<Vec<String>> = samples.iter().map(|s| s.captions.clone()).collect();
    let mut report = MetricsReport::from_captions(&predictions, &refs)?;
    if let Some(c) = confusion {
        report = report.with_detection(c);
    }
    let hits = predictions.iter().zip(&refs).filter(|(p, r)| is_exact_match(p, r)).count();
    Ok(Evaluation { report, exact_match: hits as f64 / samples.len().max(1) as f64, predictions })
}
