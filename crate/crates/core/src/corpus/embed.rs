use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::text;

pub const DEFAULT_DIM: usize = 1024;

#[derive(Debug, Clone, thiserror::Error)]
#[error("embedder {embedder}: {message}")]
pub struct EmbedError {
    pub embedder: String,
    pub message: String,
}

pub trait Embedder: Send + Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    /// A unit-norm vector of length `dim()`.
    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbedError>;
}

/// Token hashing into `dim` signed buckets, L2-normalized.
///
/// Buckets come from 64-bit FNV-1a of each content token; the top bit of
/// the hash picks the sign. Text with no content tokens is hashed whole so
/// the vector is never zero.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "dimension must be positive");
        HashEmbedder { dim }
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        HashEmbedder::new(DEFAULT_DIM)
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

impl Embedder for HashEmbedder {
    fn id(&self) -> String {
        format!("hash-fnv1a-{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, input: &str) -> Result<Vec<f32>, EmbedError> {
        let dim = self.dim;
        let add = |v: &mut [f64], bytes: &[u8]| {
            let h = fnv1a(bytes);
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            v[(h % dim as u64) as usize] += sign;
        };
        let mut v = vec![0f64; dim];
        for t in text::tokenize(input).into_iter().filter(|t| !text::is_stopword(t)) {
            add(&mut v, t.as_bytes());
        }
        if v.iter().all(|x| *x == 0.0) {
            // no content tokens, or hash collisions that cancelled out
            add(&mut v, input.as_bytes());
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        Ok(v.into_iter().map(|x| (x / norm) as f32).collect())
    }
}

/// Cosine similarity computed in f64. Zero vectors give 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Views of a chunk that get their own vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Facet {
    FullText,
    Summary,
    Entities,
    /// Hypothetical question number `n` (1-based).
    Hyde(u8),
}

impl fmt::Display for Facet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Facet::FullText => f.write_str("full-text"),
            Facet::Summary => f.write_str("summary"),
            Facet::Entities => f.write_str("entities"),
            Facet::Hyde(n) => write!(f, "hyde-question-{n}"),
        }
    }
}

impl FromStr for Facet {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full-text" => Ok(Facet::FullText),
            "summary" => Ok(Facet::Summary),
            "entities" => Ok(Facet::Entities),
            _ => s
                .strip_prefix("hyde-question-")
                .and_then(|n| n.parse().ok())
                .filter(|n| *n >= 1)
                .map(Facet::Hyde)
                .ok_or_else(|| format!("unknown facet {s:?}")),
        }
    }
}

impl Serialize for Facet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Facet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FacetConfig {
    #[serde(default = "yes")]
    pub summary: bool,
    #[serde(default = "yes")]
    pub entities: bool,
    #[serde(default = "one")]
    pub hyde_questions: u8,
}

fn yes() -> bool {
    true
}
fn one() -> u8 {
    1
}

impl Default for FacetConfig {
    fn default() -> Self {
        FacetConfig { summary: true, entities: true, hyde_questions: 1 }
    }
}

impl FacetConfig {
    pub fn full_text_only() -> Self {
        FacetConfig { summary: false, entities: false, hyde_questions: 0 }
    }

    /// Extractive facet texts for a chunk: the first sentence as summary,
    /// capitalized words as entities, and sentence `n` recast as a question
    /// for HyDE facet `n`. Facets with no material are left out.
    pub fn extractive(&self, chunk_text: &str) -> Vec<(Facet, String)> {
        let mut out = vec![(Facet::FullText, chunk_text.to_string())];
        let sents = text::sentences(chunk_text);
        if self.summary {
            if let Some(first) = sents.first() {
                out.push((Facet::Summary, first.to_string()));
            }
        }
        if self.entities {
            let mut seen = Vec::new();
            for w in chunk_text.split_whitespace() {
                let w = w.trim_matches(|c: char| !c.is_alphanumeric());
                if w.chars().next().is_some_and(char::is_uppercase) && !seen.contains(&w) {
                    seen.push(w);
                }
            }
            if !seen.is_empty() {
                out.push((Facet::Entities, seen.join(" ")));
            }
        }
        for n in 1..=self.hyde_questions {
            if let Some(s) = sents.get(n as usize - 1) {
                let body = s.trim_end_matches(['.', '!', '?', '…', ' ']).trim_start_matches(['¿', '¡']);
                out.push((Facet::Hyde(n), format!("¿{body}?")));
            }
        }
        out
    }
}
