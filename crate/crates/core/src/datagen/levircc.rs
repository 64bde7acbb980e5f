//! LEVIR-CC directory layout: `A/`, `B/`, `label/` PNGs and `captions.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    read_mask_png, read_rgb_png, write_mask_png, write_rgb_png, BiTemporalSample, ChangeEvent, Split,
    CAPTIONS_PER_SAMPLE,
};
use crate::error::{Error, Result};

pub const CAPTIONS_JSON: &str = "captions.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CaptionsFile {
    pub images: Vec<ImageEntry>,
}

/// A sentence is either a bare string or the original `{"raw": ...}` object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sentence {
    Text(String),
    Raw { raw: String },
}

impl Sentence {
    pub fn text(&self) -> &str {
        match self {
            Sentence::Text(s) | Sentence::Raw { raw: s } => s,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageEntry {
    pub filename: String,
    pub split: String,
    pub sentences: Vec<Sentence>,
    /// Generator metadata; absent in real LEVIR-CC files.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub changes: Option<Vec<ChangeEvent>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub filename: String,
    pub split: Split,
    pub sentences: Vec<String>,
    pub events: Option<Vec<ChangeEvent>>,
}

/// Resolved dataset: every referenced file was checked to exist.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub samples: Vec<SampleRecord>,
    pub split_sizes: BTreeMap<Split, usize>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn paths(&self, i: usize) -> [PathBuf; 3] {
        let f = &self.samples[i].filename;
        [self.root.join("A").join(f), self.root.join("B").join(f), self.root.join("label").join(f)]
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    /// Reads the images and mask of sample `i`.
    pub fn load(&self, i: usize) -> Result<BiTemporalSample> {
        let rec = &self.samples[i];
        let [a, b, label] = self.paths(i);
        let sample = BiTemporalSample {
            image_pre: read_rgb_png(&a)?,
            image_post: read_rgb_png(&b)?,
            change_mask: read_mask_png(&label)?,
            captions: rec.sentences.clone(),
            change_events: rec.events.clone().unwrap_or_default(),
            split: rec.split,
        };
        sample.validate().map_err(|e| Error::Format { file: rec.filename.clone(), reason: e.to_string() })?;
        Ok(sample)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<BiTemporalSample>> {
        self.indices(split).into_par_iter().map(|i| self.load(i)).collect()
    }

    pub fn load_all(&self) -> Result<Vec<BiTemporalSample>> {
        (0..self.len()).into_par_iter().map(|i| self.load(i)).collect()
    }
}

/// Reads `captions.json` under `root` and checks that every image exists.
pub fn load_levircc(root: &Path) -> Result<DatasetIndex> {
    let json_path = root.join(CAPTIONS_JSON);
    let text = fs::read_to_string(&json_path)
        .map_err(|e| Error::Load { path: json_path.clone(), reason: e.to_string() })?;
    let file: CaptionsFile = serde_json::from_str(&text).map_err(|e| Error::json(&json_path, e))?;
    let mut samples = Vec::with_capacity(file.images.len());
    let mut split_sizes = BTreeMap::new();
    for entry in file.images {
        if entry.sentences.len() != CAPTIONS_PER_SAMPLE {
            return Err(Error::Format {
                file: entry.filename,
                reason: format!("expected {CAPTIONS_PER_SAMPLE} sentences, found {}", entry.sentences.len()),
            });
        }
        let split: Split = entry
            .split
            .parse()
            .map_err(|e: Error| Error::Format { file: entry.filename.clone(), reason: e.to_string() })?;
        for dir in ["A", "B", "label"] {
            let p = root.join(dir).join(&entry.filename);
            if !p.is_file() {
                return Err(Error::Load { path: p, reason: "file not found".into() });
            }
        }
        *split_sizes.entry(split).or_insert(0) += 1;
        samples.push(SampleRecord {
            filename: entry.filename,
            split,
            sentences: entry.sentences.iter().map(|s| s.text().to_string()).collect(),
            events: entry.changes,
        });
    }
    Ok(DatasetIndex { root: root.to_path_buf(), samples, split_sizes })
}

/// Writes samples in LEVIR-CC layout. Files are named `<split>_<nnnnnn>.png`,
/// numbered per split in input order.
pub fn save_levircc(root: &Path, samples: &[BiTemporalSample]) -> Result<()> {
    for dir in ["A", "B", "label"] {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut counters: BTreeMap<Split, usize> = BTreeMap::new();
    let named: Vec<(String, &BiTemporalSample)> = samples
        .iter()
        .map(|s| {
            let c = counters.entry(s.split).or_insert(0);
            let name = format!("{}_{:06}.png", s.split.as_str(), *c);
            *c += 1;
            (name, s)
        })
        .collect();
    named.par_iter().try_for_each(|(name, s)| -> Result<()> {
        write_rgb_png(&root.join("A").join(name), &s.image_pre)?;
        write_rgb_png(&root.join("B").join(name), &s.image_post)?;
        write_mask_png(&root.join("label").join(name), &s.change_mask)
    })?;
    let file = CaptionsFile {
        images: named
            .iter()
            .map(|(name, s)| ImageEntry {
                filename: name.clone(),
                split: s.split.as_str().to_string(),
                sentences: s.captions.iter().cloned().map(Sentence::Text).collect(),
                changes: Some(s.change_events.clone()),
            })
            .collect(),
    };
    let path = root.join(CAPTIONS_JSON);
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}
