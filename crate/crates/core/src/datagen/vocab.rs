use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const IMAGE: &str = "<image>";

/// Special tokens, in id order 0..=4.
pub const SPECIALS: [&str; 5] = [PAD, BOS, EOS, UNK, IMAGE];

/// Lowercase, drop everything that is not alphanumeric or whitespace, split
/// on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Bijective token ↔ id map with the five specials at ids 0..=4.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, String> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(format!("vocabulary must start with the specials {SPECIALS:?}"));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(format!("duplicate token {t:?}"));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or of `<unk>`.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(self.unk())
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad(&self) -> usize {
        0
    }
    pub fn bos(&self) -> usize {
        1
    }
    pub fn eos(&self) -> usize {
        2
    }
    pub fn unk(&self) -> usize {
        3
    }
    pub fn image(&self) -> usize {
        4
    }

    /// Tokenises a caption and maps it to ids (no `<bos>`/`<eos>`).
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id_or_unk(t)).collect()
    }

    /// Joins ids back into text, skipping specials.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= SPECIALS.len())
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = String;

    fn try_from(tokens: Vec<String>) -> Result<Self, String> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// Builds a vocabulary: specials first, then tokens by descending frequency,
/// ties broken lexicographically.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S]) -> Vocabulary {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in corpus {
        for t in tokenize(text.as_ref()) {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut words: Vec<(String, usize)> = counts.into_iter().filter(|(w, _)| !SPECIALS.contains(&w.as_str())).collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = SPECIALS.iter().map(|s| s.to_string()).chain(words.into_iter().map(|(w, _)| w)).collect();
    Vocabulary::from_tokens(tokens).expect("specials are prepended")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frequency_order() {
        let v = build_vocab(&["a a b"]);
        assert_eq!(v.id("<pad>"), Some(0));
        assert_eq!(v.id("<image>"), Some(4));
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.id("b"), Some(6));
        assert_eq!(v.len(), 7);
    }

    #[test]
    fn empty_caption_gives_specials_only() {
        let v = build_vocab(&[""]);
        assert_eq!(v.tokens(), &SPECIALS.map(String::from));
    }

    #[test]
    fn lexicographic_tie_break() {
        let v = build_vocab(&["b a"]);
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.id("b"), Some(6));
    }

    #[test]
    fn tokenize_strips_punctuation() {
        assert_eq!(tokenize("A house, is Built."), vec!["a", "house", "is", "built"]);
        assert!(tokenize("").is_empty());
    }

    #[test]
    fn serde_roundtrip_and_bijection() {
        let v = build_vocab(&["the road is new", "a road"]);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), Some(i));
        }
        assert!(serde_json::from_str::<Vocabulary>(r#"["a","b"]"#).is_err());
    }

    #[test]
    fn encode_decode() {
        let v = build_vocab(&["a building appears"]);
        let ids = v.encode("A building vanishes");
        assert_eq!(ids[2], v.unk());
        assert_eq!(v.decode(&[v.bos(), ids[0], ids[1], v.eos()]), "a building");
    }
}
