//! Caption metrics, the composite score and mask agreement.
//!
//! Caption metrics take one candidate and a nonempty reference list per
//! sample and return values on the ×100 scale.

mod align;
mod ngram;
mod stem;

pub use stem::stem;

use serde::{Deserialize, Serialize};

use crate::datagen::{tokenize, Mask};
use crate::error::{Error, Result};

/// Lowercase, strip punctuation, split on whitespace.
pub fn tokenize_for_metrics(text: &str) -> Vec<String> {
    tokenize(text)
}

struct Corpus {
    cands: Vec<Vec<String>>,
    refs: Vec<Vec<Vec<String>>>,
}

impl Corpus {
    fn new<S: AsRef<str>, R: AsRef<str>>(cands: &[S], refs: &[Vec<R>]) -> Result<Self> {
        if cands.len() != refs.len() {
            return Err(Error::Input(format!("{} candidates but {} reference sets", cands.len(), refs.len())));
        }
        if cands.is_empty() {
            return Err(Error::Input("empty corpus".into()));
        }
        if let Some(i) = refs.iter().position(Vec::is_empty) {
            return Err(Error::Input(format!("sample {i} has no references")));
        }
        Ok(Self {
            cands: cands.iter().map(|c| tokenize(c.as_ref())).collect(),
            refs: refs.iter().map(|rs| rs.iter().map(|r| tokenize(r.as_ref())).collect()).collect(),
        })
    }

    fn mean_of_max(&self, pair: fn(&[String], &[String]) -> f64) -> f64 {
        let total: f64 = self
            .cands
            .iter()
            .zip(&self.refs)
            .map(|(c, rs)| rs.iter().map(|r| pair(c, r)).fold(0.0, f64::max))
            .sum();
        total / self.cands.len() as f64
    }
}

/// Corpus BLEU-`n`, `n` in `1..=4`.
pub fn bleu<S: AsRef<str>, R: AsRef<str>>(cands: &[S], refs: &[Vec<R>], n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(Error::Input(format!("BLEU order must be 1..=4, got {n}")));
    }
    let c = Corpus::new(cands, refs)?;
    Ok(100.0 * ngram::bleu_raw(&c.cands, &c.refs, n))
}

/// ROUGE-L F-measure (β = 1.2), best reference per sample, corpus mean.
pub fn rouge_l<S: AsRef<str>, R: AsRef<str>>(cands: &[S], refs: &[Vec<R>]) -> Result<f64> {
    Ok(100.0 * Corpus::new(cands, refs)?.mean_of_max(align::rouge_pair))
}

/// METEOR with exact and stemmed matching only, best reference per sample.
pub fn meteor_stem<S: AsRef<str>, R: AsRef<str>>(cands: &[S], refs: &[Vec<R>]) -> Result<f64> {
    Ok(100.0 * Corpus::new(cands, refs)?.mean_of_max(align::meteor_pair))
}

/// CIDEr-D, reported as the conventional value ×100.
pub fn cider_d<S: AsRef<str>, R: AsRef<str>>(cands: &[S], refs: &[Vec<R>]) -> Result<f64> {
    let c = Corpus::new(cands, refs)?;
    if c.cands.len() < 2 {
        log::warn!("CIDEr-D on a single sample: document frequencies are degenerate");
    }
    let scores = ngram::cider_raw(&c.cands, &c.refs);
    Ok(100.0 * scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Mean of BLEU-4, METEOR, ROUGE-L and CIDEr-D.
pub fn s_star_m(bleu4: f64, meteor: f64, rouge_l: f64, cider_d: f64) -> f64 {
    (bleu4 + meteor + rouge_l + cider_d) / 4.0
}

/// Pixel counts of the change class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn from_masks(pred: &Mask, gt: &Mask) -> Result<Self> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Input(format!(
                "mask shapes differ: {}x{} vs {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let mut c = Self::default();
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            match (p != 0, g != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                _ => {}
            }
        }
        Ok(c)
    }

    pub fn add(&mut self, other: Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// `(IoU, F1)`; both are 1 when prediction and truth are empty.
    pub fn scores(&self) -> (f64, f64) {
        let (tp, fp, fn_) = (self.tp as f64, self.fp as f64, self.fn_ as f64);
        if tp + fp + fn_ == 0.0 {
            return (1.0, 1.0);
        }
        (tp / (tp + fp + fn_), 2.0 * tp / (2.0 * tp + fp + fn_))
    }
}

/// IoU and F1 of the change class for one mask pair.
pub fn detection_metrics(pred: &Mask, gt: &Mask) -> Result<(f64, f64)> {
    Ok(Confusion::from_masks(pred, gt)?.scores())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MetricsReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub meteor: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    #[serde(rename = "ciderD")]
    pub cider_d: f64,
    #[serde(rename = "sStarM")]
    pub s_star_m: f64,
    /// Pooled over all pixels of the corpus; absent without masks.
    pub iou: Option<f64>,
    pub f1: Option<f64>,
    pub num_samples: usize,
}

impl MetricsReport {
    /// Caption metrics for a corpus; detection fields are left empty.
    pub fn from_captions<S: AsRef<str>, R: AsRef<str>>(cands: &[S], refs: &[Vec<R>]) -> Result<Self> {
        let b: Vec<f64> = (1..=4).map(|n| bleu(cands, refs, n)).collect::<Result<_>>()?;
        let meteor = meteor_stem(cands, refs)?;
        let rouge = rouge_l(cands, refs)?;
        let cider = cider_d(cands, refs)?;
        Ok(Self {
            bleu1: b[0],
            bleu2: b[1],
            bleu3: b[2],
            bleu4: b[3],
            meteor,
            rouge_l: rouge,
            cider_d: cider,
            s_star_m: s_star_m(b[3], meteor, rouge, cider),
            iou: None,
            f1: None,
            num_samples: cands.len(),
        })
    }

    pub fn with_detection(mut self, confusion: Confusion) -> Self {
        let (iou, f1) = confusion.scores();
        self.iou = Some(iou);
        self.f1 = Some(f1);
        self
    }
}
