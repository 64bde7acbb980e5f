//! Synthetic bi-temporal scenes, the LEVIR-CC directory layout, and the
//! caption vocabulary.
//!
//! Scenes are drawn on a grid of `patch_size` cells. Buildings and roads are
//! *relevant* changes: they are rasterised into the change mask and named in
//! the captions. Trees are distractors that alter pixels only.

mod captions;
mod imageio;
mod levircc;
mod vocab;

use autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use captions::{region_phrase, render_captions, NO_CHANGE_CAPTION};
pub use imageio::{read_mask_png, read_rgb_png, write_gray_png, write_mask_png, write_rgb_png};
pub use levircc::{load_levircc, save_levircc, CaptionsFile, DatasetIndex, ImageEntry, SampleRecord, Sentence};
pub use vocab::{build_vocab, tokenize, Vocabulary, BOS, EOS, IMAGE, PAD, SPECIALS, UNK};

use crate::error::{Error, Result};

/// Longest caption, in whitespace tokens.
pub const MAX_CAPTION_TOKENS: usize = 39;
pub const CAPTIONS_PER_SAMPLE: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Building,
    Road,
    Tree,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Appear,
    Disappear,
}

/// Axis-aligned pixel rectangle `[x, x + w) × [y, y + h)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x as f64 + self.w as f64 / 2.0, self.y as f64 + self.h as f64 / 2.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChangeEvent {
    pub kind: EventKind,
    pub rect: Rect,
    pub polarity: Polarity,
}

impl ChangeEvent {
    /// Buildings and roads; trees are distractors.
    pub fn is_relevant(&self) -> bool {
        matches!(self.kind, EventKind::Building | EventKind::Road)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Input(format!("unknown split {other:?} (train|val|test)"))),
        }
    }
}

/// Binary single-channel mask, 1 = relevant change.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    /// Rasterised union of rectangles.
    pub fn from_rects<'a>(height: usize, width: usize, rects: impl IntoIterator<Item = &'a Rect>) -> Self {
        let mut m = Self::zeros(height, width);
        for r in rects {
            for y in r.y..(r.y + r.h).min(height) {
                for x in r.x..(r.x + r.w).min(width) {
                    m.data[y * width + x] = 1;
                }
            }
        }
        m
    }
}

/// One image pair with its relevant-change mask, five captions and the
/// events that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct BiTemporalSample {
    /// `[H, W, 3]`, values in `[0, 1]`.
    pub image_pre: Tensor<f32>,
    pub image_post: Tensor<f32>,
    pub change_mask: Mask,
    pub captions: Vec<String>,
    pub change_events: Vec<ChangeEvent>,
    pub split: Split,
}

impl BiTemporalSample {
    pub fn height(&self) -> usize {
        self.image_pre.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image_pre.shape()[1]
    }

    /// Checks the structural invariants of a sample.
    pub fn validate(&self) -> Result<()> {
        let s = self.image_pre.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::Shape(format!("image_pre must be HxWx3, got {s:?}")));
        }
        if self.image_post.shape() != s {
            return Err(Error::Shape(format!(
                "image_post {:?} differs from image_pre {s:?}",
                self.image_post.shape()
            )));
        }
        if self.change_mask.height != s[0] || self.change_mask.width != s[1] {
            return Err(Error::Shape("change_mask does not match the images".into()));
        }
        if self.captions.len() != CAPTIONS_PER_SAMPLE {
            return Err(Error::Input(format!("expected 5 captions, got {}", self.captions.len())));
        }
        if let Some(c) = self.captions.iter().find(|c| c.split_whitespace().count() > MAX_CAPTION_TOKENS) {
            return Err(Error::Input(format!("caption longer than {MAX_CAPTION_TOKENS} tokens: {c:?}")));
        }
        Ok(())
    }
}

/// Synthetic dataset parameters. Serialised as the generation config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub image_size: usize,
    pub num_train: usize,
    pub num_val: usize,
    pub num_test: usize,
    pub distractor_rate: f64,
    pub max_events: usize,
    pub seed: u64,
    /// Scene objects snap to this grid; must divide `image_size`.
    pub patch_size: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_train: 512,
            num_val: 64,
            num_test: 64,
            distractor_rate: 0.5,
            max_events: 3,
            seed: 0,
            patch_size: 8,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.image_size / self.patch_size < 3 {
            return Err(Error::Config("image must span at least 3 patches per side".into()));
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return Err(Error::Config(format!("distractor_rate {} outside [0, 1]", self.distractor_rate)));
        }
        if self.max_events == 0 {
            return Err(Error::Config("max_events must be at least 1".into()));
        }
        Ok(())
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::Train => self.num_train,
            Split::Val => self.num_val,
            Split::Test => self.num_test,
        }
    }
}

/// SplitMix64 finaliser; used to derive independent per-sample seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of sample `index` within `split` of a dataset generated from `seed`.
pub fn sample_seed(seed: u64, split: Split, index: usize) -> u64 {
    mix_seed(mix_seed(seed, split as u64 + 1), index as u64)
}

const TEMPLATE_STREAM: u64 = 0x7e3_11a7e;

/// Draws a random scene from `seed` and renders it.
pub fn generate_scene_pair(seed: u64, cfg: &GenConfig) -> Result<BiTemporalSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layout = Layout::new(cfg);
    let statics = layout.place_statics(&mut rng);
    let mut events = layout.draw_relevant(&mut rng, cfg.max_events);
    // distractors are drawn after the relevant events so that the relevant
    // subset does not depend on distractor_rate
    events.extend(layout.draw_distractors(&mut rng, cfg.distractor_rate));
    render_scene(seed, cfg, &statics, &events, &mut rng)
}

/// Renders a scene with a fixed event list (no static structures besides
/// what `seed` produces for the background).
pub fn generate_scene_from_events(seed: u64, cfg: &GenConfig, events: &[ChangeEvent]) -> Result<BiTemporalSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    render_scene(seed, cfg, &[], events, &mut rng)
}

fn render_scene(
    seed: u64,
    cfg: &GenConfig,
    statics: &[Rect],
    events: &[ChangeEvent],
    rng: &mut ChaCha8Rng,
) -> Result<BiTemporalSample> {
    let n = cfg.image_size;
    let mut pre = Canvas::background(n, rng);
    let mut post = pre.clone();
    let roof_pick = |r: &mut ChaCha8Rng| ROOFS[r.random_range(0..ROOFS.len())];
    for rect in statics {
        let roof = roof_pick(rng);
        pre.building(rect, roof);
        post.building(rect, roof);
    }
    for ev in events {
        let target = match ev.polarity {
            Polarity::Appear => &mut post,
            Polarity::Disappear => &mut pre,
        };
        match ev.kind {
            EventKind::Building => {
                let roof = roof_pick(rng);
                target.building(&ev.rect, roof)
            }
            EventKind::Road => target.road(&ev.rect),
            EventKind::Tree => target.tree(&ev.rect),
        }
    }
    // illumination shift and sensor noise: irrelevant, scene-wide changes
    let gain = 1.0 + rng.random_range(-0.05..0.05);
    pre.finish(1.0, rng);
    post.finish(gain, rng);

    let mask = Mask::from_rects(n, n, events.iter().filter(|e| e.is_relevant()).map(|e| &e.rect));
    let mut template_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, TEMPLATE_STREAM));
    let captions = render_captions(events, n, &mut template_rng);
    let sample = BiTemporalSample {
        image_pre: pre.into_tensor(),
        image_post: post.into_tensor(),
        change_mask: mask,
        captions,
        change_events: events.to_vec(),
        split: Split::Train,
    };
    sample.validate()?;
    Ok(sample)
}

/// Generates every split of a dataset in memory.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Vec<BiTemporalSample>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.num_train + cfg.num_val + cfg.num_test);
    for split in Split::ALL {
        for i in 0..cfg.split_size(split) {
            let mut s = generate_scene_pair(sample_seed(cfg.seed, split, i), cfg)?;
            s.split = split;
            out.push(s);
        }
    }
    Ok(out)
}

const ROOFS: [[f64; 3]; 3] = [[0.72, 0.36, 0.30], [0.62, 0.62, 0.64], [0.45, 0.52, 0.66]];

/// Occupancy of the cell grid while placing objects.
struct Layout {
    cell: usize,
    grid: usize,
    used: Vec<bool>,
}

impl Layout {
    fn new(cfg: &GenConfig) -> Self {
        let grid = cfg.image_size / cfg.patch_size;
        Self { cell: cfg.patch_size, grid, used: vec![false; grid * grid] }
    }

    /// Places a `cw × ch` cell block somewhere free; falls back to a scan.
    fn place(&mut self, rng: &mut ChaCha8Rng, cw: usize, ch: usize) -> Option<Rect> {
        if cw > self.grid || ch > self.grid {
            return None;
        }
        let fits = |used: &[bool], gx: usize, gy: usize| {
            (gy..gy + ch).all(|y| (gx..gx + cw).all(|x| !used[y * self.grid + x]))
        };
        let mut spot = None;
        for _ in 0..64 {
            let gx = rng.random_range(0..=self.grid - cw);
            let gy = rng.random_range(0..=self.grid - ch);
            if fits(&self.used, gx, gy) {
                spot = Some((gx, gy));
                break;
            }
        }
        if spot.is_none() {
            spot = (0..=self.grid - ch)
                .flat_map(|gy| (0..=self.grid - cw).map(move |gx| (gx, gy)))
                .find(|&(gx, gy)| fits(&self.used, gx, gy));
        }
        let (gx, gy) = spot?;
        for y in gy..gy + ch {
            for x in gx..gx + cw {
                self.used[y * self.grid + x] = true;
            }
        }
        Some(Rect { x: gx * self.cell, y: gy * self.cell, w: cw * self.cell, h: ch * self.cell })
    }

    fn place_statics(&mut self, rng: &mut ChaCha8Rng) -> Vec<Rect> {
        let count = rng.random_range(0..=2);
        (0..count)
            .filter_map(|_| {
                let (cw, ch) = (rng.random_range(1..=2), 1);
                self.place(rng, cw, ch)
            })
            .collect()
    }

    fn draw_relevant(&mut self, rng: &mut ChaCha8Rng, max_events: usize) -> Vec<ChangeEvent> {
        let count = if rng.random_bool(0.25) { 0 } else { rng.random_range(1..=max_events) };
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let roll: f64 = rng.random();
            let (kind, polarity, cw, ch) = if roll < 0.4 {
                (EventKind::Building, Polarity::Appear, rng.random_range(1..=2), rng.random_range(1..=2))
            } else if roll < 0.7 {
                (EventKind::Building, Polarity::Disappear, rng.random_range(1..=2), rng.random_range(1..=2))
            } else {
                let len = rng.random_range(3..=self.grid.min(6));
                if rng.random_bool(0.5) {
                    (EventKind::Road, Polarity::Appear, len, 1)
                } else {
                    (EventKind::Road, Polarity::Appear, 1, len)
                }
            };
            if let Some(rect) = self.place(rng, cw, ch) {
                out.push(ChangeEvent { kind, rect, polarity });
            }
        }
        out
    }

    fn draw_distractors(&mut self, rng: &mut ChaCha8Rng, rate: f64) -> Vec<ChangeEvent> {
        if !rng.random_bool(rate) {
            return Vec::new();
        }
        let count = rng.random_range(1..=2);
        (0..count)
            .filter_map(|_| {
                let polarity = if rng.random_bool(0.5) { Polarity::Appear } else { Polarity::Disappear };
                self.place(rng, 1, 1).map(|rect| ChangeEvent { kind: EventKind::Tree, rect, polarity })
            })
            .collect()
    }
}

/// RGB float canvas used while rendering.
#[derive(Clone)]
struct Canvas {
    size: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn background(size: usize, rng: &mut ChaCha8Rng) -> Self {
        let base = [0.76, 0.70, 0.52];
        let (p1, p2): (f64, f64) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
        let mut px = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let tex = 0.05 * (x as f64 * 0.31 + p1).sin() * (y as f64 * 0.23 + p2).cos();
                let grain = rng.random_range(-0.03..0.03);
                px.push([base[0] + tex + grain, base[1] + tex + grain, base[2] + 0.5 * tex + grain]);
            }
        }
        Self { size, px }
    }

    fn fill(&mut self, r: &Rect, color: [f64; 3]) {
        for y in r.y..(r.y + r.h).min(self.size) {
            for x in r.x..(r.x + r.w).min(self.size) {
                self.px[y * self.size + x] = color;
            }
        }
    }

    fn building(&mut self, r: &Rect, roof: [f64; 3]) {
        self.fill(r, [0.25, 0.22, 0.20]);
        if r.w > 2 && r.h > 2 {
            self.fill(&Rect { x: r.x + 1, y: r.y + 1, w: r.w - 2, h: r.h - 2 }, roof);
        }
    }

    fn road(&mut self, r: &Rect) {
        self.fill(r, [0.30, 0.30, 0.33]);
        let line = [0.85, 0.85, 0.80];
        if r.w > r.h {
            let y = r.y + r.h / 2;
            for x in (r.x..r.x + r.w).step_by(4) {
                self.fill(&Rect { x, y, w: 2, h: 1 }, line);
            }
        } else {
            let x = r.x + r.w / 2;
            for y in (r.y..r.y + r.h).step_by(4) {
                self.fill(&Rect { x, y, w: 1, h: 2 }, line);
            }
        }
    }

    fn tree(&mut self, r: &Rect) {
        let (cx, cy) = r.center();
        let radius = r.w.min(r.h) as f64 / 2.0 - 0.5;
        for y in r.y..r.y + r.h {
            for x in r.x..r.x + r.w {
                let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                if d <= radius {
                    let shade = 0.08 * (1.0 - d / radius);
                    self.px[y * self.size + x] = [0.16 - shade, 0.48 + shade, 0.18 - shade];
                }
            }
        }
    }

    fn finish(&mut self, gain: f64, rng: &mut ChaCha8Rng) {
        for p in &mut self.px {
            for c in p.iter_mut() {
                *c = *c * gain + rng.random_range(-0.01..0.01);
            }
        }
    }

    /// Quantises to 8 bits so that a PNG round trip is lossless.
    fn into_tensor(self) -> Tensor<f32> {
        let data = self
            .px
            .iter()
            .flat_map(|p| p.iter().map(|&c| (c.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0))
            .collect();
        Tensor::new(&[self.size, self.size, 3], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_distractors() -> GenConfig {
        GenConfig { distractor_rate: 0.0, ..GenConfig::default() }
    }

    #[test]
    fn mask_is_union_of_relevant_rects() {
        let s = generate_scene_pair(7, &no_distractors()).unwrap();
        let expected = Mask::from_rects(64, 64, s.change_events.iter().map(|e| &e.rect));
        assert_eq!(s.change_mask, expected);
        let area: usize = s.change_events.iter().map(|e| e.rect.area()).sum();
        // placement never overlaps, so the union area is the plain sum
        assert_eq!(s.change_mask.count_nonzero(), area);
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GenConfig::default();
        assert_eq!(generate_scene_pair(7, &cfg).unwrap(), generate_scene_pair(7, &cfg).unwrap());
        assert_ne!(
            generate_scene_pair(7, &cfg).unwrap().image_post,
            generate_scene_pair(8, &cfg).unwrap().image_post
        );
    }

    #[test]
    fn empty_event_list_gives_no_change() {
        let s = generate_scene_from_events(3, &GenConfig::default(), &[]).unwrap();
        assert_eq!(s.change_mask.count_nonzero(), 0);
        assert!(s.captions.iter().all(|c| c == NO_CHANGE_CAPTION));
        assert_eq!(s.captions.len(), 5);
    }

    #[test]
    fn bad_size_is_config_error() {
        let cfg = GenConfig { image_size: 60, ..GenConfig::default() };
        assert!(matches!(generate_scene_pair(1, &cfg), Err(Error::Config(_))));
        let cfg = GenConfig { max_events: 0, ..GenConfig::default() };
        assert!(matches!(generate_scene_pair(1, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn trees_never_touch_mask_or_captions() {
        let cfg = GenConfig { distractor_rate: 1.0, ..GenConfig::default() };
        let plain = GenConfig { distractor_rate: 0.0, ..GenConfig::default() };
        for seed in 0..40 {
            let s = generate_scene_pair(seed, &cfg).unwrap();
            assert!(s.change_events.iter().any(|e| e.kind == EventKind::Tree), "seed {seed}");
            for e in s.change_events.iter().filter(|e| !e.is_relevant()) {
                for y in e.rect.y..e.rect.y + e.rect.h {
                    for x in e.rect.x..e.rect.x + e.rect.w {
                        assert_eq!(s.change_mask.get(x, y), 0);
                    }
                }
            }
            // same seed without distractors: identical relevant events and captions
            let p = generate_scene_pair(seed, &plain).unwrap();
            let rel: Vec<_> = s.change_events.iter().filter(|e| e.is_relevant()).copied().collect();
            assert_eq!(rel, p.change_events);
            assert_eq!(s.captions, p.captions);
            assert_eq!(s.change_mask, p.change_mask);
        }
    }

    #[test]
    fn images_are_eight_bit_quantised() {
        let s = generate_scene_pair(11, &GenConfig::default()).unwrap();
        for &v in s.image_pre.data().iter().chain(s.image_post.data()) {
            assert!((0.0..=1.0).contains(&v));
            assert_eq!((v * 255.0).round() / 255.0, v);
        }
    }
}
