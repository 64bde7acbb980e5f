use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use autograd::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::datagen::{tokenize, Vocabulary, IMAGE};
use crate::error::{Error, Result};

/// Default instruction set. Each line opens with a single `<image>`.
pub const DEFAULT_TEMPLATES: [&str; 5] = [
    "<image> This represents the change features of geographic targets extracted from remote sensing images. Does this feature contain any information about changes in the geographic targets? If so, please describe the change information.",
    "<image> These are the change characteristics of geographic targets derived from remote sensing images. Do these features reflect any changes in the geographic targets? If yes, please provide details on the changes.",
    "<image> These are the geographic target change features extracted from remote sensing images. Do these features indicate any changes in the geographic targets? If so, please describe the changes.",
    "<image> This is the change information of geographic targets extracted from remote sensing images. Does this information reveal any changes in the geographic targets? If so, please describe the changes.",
    "<image> Here are the change features of geographic targets pulled from remote sensing images. Do these features suggest any changes in the geographic targets? If they do, please describe the nature of those changes.",
];

/// Which visual features fill the instruction's image slots.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageTokenMode {
    /// Key-change features only (one slot).
    #[default]
    Change,
    /// Pre- and post-image features (two slots).
    Bitemporal,
    /// Pre, post, then key-change features (three slots).
    Both,
}

impl ImageTokenMode {
    pub const ALL: [ImageTokenMode; 3] = [Self::Change, Self::Bitemporal, Self::Both];

    pub fn slots(self) -> usize {
        match self {
            Self::Change => 1,
            Self::Bitemporal => 2,
            Self::Both => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Change => "change",
            Self::Bitemporal => "bitemporal",
            Self::Both => "both",
        }
    }
}

impl fmt::Display for ImageTokenMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ImageTokenMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown image token mode {s:?} (change|bitemporal|both)")))
    }
}

/// A word of an instruction: text or an image slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Piece {
    Text(usize),
    Image,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstructionTemplate {
    pub text: String,
    pub mode: ImageTokenMode,
}

/// Splits on whitespace, keeping `<image>` intact and normalising other words.
pub fn instruction_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .flat_map(|w| if w == IMAGE { vec![IMAGE.to_string()] } else { tokenize(w) })
        .collect()
}

impl InstructionTemplate {
    /// A template whose placeholder count must match `mode`.
    pub fn new(text: impl Into<String>, mode: ImageTokenMode) -> Result<Self> {
        let text = text.into();
        let found = instruction_words(&text).iter().filter(|w| *w == IMAGE).count();
        if found != mode.slots() {
            return Err(Error::Config(format!(
                "template has {found} {IMAGE} placeholders but mode {mode} needs {}",
                mode.slots()
            )));
        }
        Ok(Self { text, mode })
    }

    /// Expands the single placeholder of `base` into as many slots as `mode` needs.
    pub fn expand(base: &str, mode: ImageTokenMode) -> Result<Self> {
        let slots = vec![IMAGE; mode.slots()].join(" ");
        let words = instruction_words(base);
        if words.iter().filter(|w| *w == IMAGE).count() != 1 {
            return Err(Error::Config(format!("base template must contain exactly one {IMAGE}: {base:?}")));
        }
        let text = words.iter().map(|w| if w == IMAGE { slots.as_str() } else { w.as_str() }).collect::<Vec<_>>().join(" ");
        Self::new(text, mode)
    }

    /// Word ids with placeholder positions marked; unknown words map to `<unk>`.
    pub fn pieces(&self, vocab: &Vocabulary) -> Vec<Piece> {
        instruction_words(&self.text)
            .iter()
            .map(|w| if w == IMAGE { Piece::Image } else { Piece::Text(vocab.id_or_unk(w)) })
            .collect()
    }

    /// Number of words `m`, placeholders included.
    pub fn len(&self) -> usize {
        instruction_words(&self.text).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Reads one template per nonempty line; each must contain `<image>`.
pub fn load_templates(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })?;
    let lines: Vec<String> = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect();
    if lines.is_empty() {
        return Err(Error::Format { file: path.display().to_string(), reason: "no templates".into() });
    }
    for (i, l) in lines.iter().enumerate() {
        if instruction_words(l).iter().filter(|w| *w == IMAGE).count() != 1 {
            return Err(Error::Format {
                file: path.display().to_string(),
                reason: format!("line {} must contain exactly one {IMAGE}", i + 1),
            });
        }
    }
    Ok(lines)
}

/// Instruction sequence after substitution.
#[derive(Clone, Debug, PartialEq)]
pub struct InstructionEmbedding<T> {
    /// `[L, d_model]` vectors.
    pub vectors: Tensor<T>,
    /// Rows occupied by each visual token set, in slot order.
    pub visual_spans: Vec<Range<usize>>,
    /// Instruction length `m`, placeholders included.
    pub text_len: usize,
}

/// Replaces each image slot of `pieces`, in order, by the rows of the matching
/// visual set. `text` holds one row per text piece.
pub fn splice_vars<'g, T: Scalar>(
    g: &'g Graph<T>,
    pieces: &[Piece],
    text: Option<Var<'g, T>>,
    visual: &[Var<'g, T>],
) -> Result<(Var<'g, T>, Vec<Range<usize>>)> {
    let slots = pieces.iter().filter(|p| **p == Piece::Image).count();
    if slots != visual.len() {
        return Err(Error::Input(format!("{slots} image slots but {} visual token sets", visual.len())));
    }
    let n_text = pieces.len() - slots;
    if let Some(t) = text {
        if t.shape()[0] != n_text {
            return Err(Error::Shape(format!("{n_text} text pieces but {} text rows", t.shape()[0])));
        }
    } else if n_text > 0 {
        return Err(Error::Input("text pieces without text vectors".into()));
    }
    let mut parts = Vec::new();
    let mut spans = Vec::with_capacity(slots);
    let (mut row, mut text_row, mut next_set) = (0, 0, 0);
    let mut run_start = None;
    let flush = |parts: &mut Vec<Var<'g, T>>, start: &mut Option<usize>, end: usize| {
        if let (Some(s), Some(t)) = (start.take(), text) {
            parts.push(t.narrow(0, s, end - s));
        }
    };
    for p in pieces {
        match p {
            Piece::Text(_) => {
                run_start.get_or_insert(text_row);
                text_row += 1;
                row += 1;
            }
            Piece::Image => {
                flush(&mut parts, &mut run_start, text_row);
                let v = visual[next_set];
                next_set += 1;
                let n = v.shape()[0];
                spans.push(row..row + n);
                parts.push(v);
                row += n;
            }
        }
    }
    flush(&mut parts, &mut run_start, text_row);
    if parts.is_empty() {
        return Err(Error::Input("empty instruction".into()));
    }
    let out = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0) };
    Ok((out, spans))
}

/// Tensor-level splice; see [`splice_vars`].
pub fn splice_image_tokens<T: Scalar>(
    pieces: &[Piece],
    text: &Tensor<T>,
    visual: &[Tensor<T>],
) -> Result<InstructionEmbedding<T>> {
    let g = Graph::new();
    let t = (text.rows() > 0).then(|| g.constant(text.clone()));
    let sets: Vec<_> = visual.iter().map(|v| g.constant(v.clone())).collect();
    let (out, visual_spans) = splice_vars(&g, pieces, t, &sets)?;
    Ok(InstructionEmbedding { vectors: out.value().as_ref().clone(), visual_spans, text_len: pieces.len() })
}
