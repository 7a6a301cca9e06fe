use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::embed::{cosine, Embedder};
use super::{CorpusError, SourceDocument};
use crate::text;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    /// Char offsets `[start, end)` into the document text.
    pub span: (usize, usize),
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "kebab-case")]
pub enum ChunkingStrategy {
    Recursive { max_chars: usize, overlap: usize },
    Semantic { threshold: f64 },
}

impl Default for ChunkingStrategy {
    fn default() -> Self {
        ChunkingStrategy::Recursive { max_chars: 600, overlap: 80 }
    }
}

pub(crate) fn chunk_id(doc_id: &str, i: usize) -> String {
    format!("{doc_id}#{i:03}")
}

static PARAGRAPH: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\n[ \t\r]*\n\s*").unwrap());

/// Candidate cut positions (char offsets, strictly inside the text) for
/// each separator level: paragraph, sentence, whitespace.
fn boundaries(t: &str) -> [Vec<usize>; 3] {
    let offs = text::char_offsets(t);
    let to_char = |byte: usize| offs.partition_point(|&b| b < byte);
    let n = offs.len() - 1;
    let inner = |v: Vec<usize>| -> Vec<usize> {
        let mut v: Vec<usize> = v.into_iter().filter(|&c| c > 0 && c < n).collect();
        v.dedup();
        v
    };
    let para = inner(PARAGRAPH.find_iter(t).map(|m| to_char(m.end())).collect());
    let sent = inner(text::sentence_spans(t).iter().skip(1).map(|r| to_char(r.start)).collect());
    let chars: Vec<char> = t.chars().collect();
    let ws = inner((1..n).filter(|&i| chars[i - 1].is_whitespace() && !chars[i].is_whitespace()).collect());
    [para, sent, ws]
}

fn split(lo: usize, hi: usize, level: usize, budget: usize, cuts: &[Vec<usize>; 3]) -> Vec<(usize, usize)> {
    if hi - lo <= budget {
        return vec![(lo, hi)];
    }
    if level == cuts.len() {
        return (lo..hi).step_by(budget).map(|s| (s, (s + budget).min(hi))).collect();
    }
    let inside: Vec<usize> = cuts[level].iter().copied().filter(|&c| c > lo && c < hi).collect();
    if inside.is_empty() {
        return split(lo, hi, level + 1, budget, cuts);
    }
    let mut edges = vec![lo];
    edges.extend(inside);
    edges.push(hi);
    let mut pieces = Vec::new();
    for w in edges.windows(2) {
        pieces.extend(split(w[0], w[1], level + 1, budget, cuts));
    }
    let mut merged: Vec<(usize, usize)> = Vec::new();
    for p in pieces {
        match merged.last_mut() {
            Some(last) if p.1 - last.0 <= budget => last.1 = p.1,
            _ => merged.push(p),
        }
    }
    merged
}

/// Splits a document into chunks of at most `max_chars` chars. Cuts fall on
/// paragraph breaks when possible, then sentence ends, then whitespace,
/// and only as a last resort inside a word. Each chunk after the first
/// repeats up to `overlap` chars of the previous one, starting on a word
/// boundary.
pub fn chunk_recursive(doc: &SourceDocument, max_chars: usize, overlap: usize) -> Result<Vec<Chunk>, CorpusError> {
    if overlap >= max_chars {
        return Err(CorpusError::Chunking(format!("overlap {overlap} must be below max_chars {max_chars}")));
    }
    if doc.text.trim().is_empty() {
        return Err(CorpusError::EmptyDocument(doc.doc_id.clone()));
    }
    let n = text::char_len(&doc.text);
    let budget = max_chars - overlap;
    let cores = split(0, n, 0, budget, &boundaries(&doc.text));
    let chars: Vec<char> = doc.text.chars().collect();
    let word_start = |from: usize, limit: usize| {
        let mut i = from;
        if i > 0 && !chars[i - 1].is_whitespace() {
            while i < limit && !chars[i].is_whitespace() {
                i += 1;
            }
        }
        while i < limit && chars[i].is_whitespace() {
            i += 1;
        }
        i
    };
    Ok(cores
        .iter()
        .enumerate()
        .map(|(i, &(s, e))| {
            let start = if i == 0 { s } else { word_start(s.saturating_sub(overlap), s) };
            Chunk {
                chunk_id: chunk_id(&doc.doc_id, i),
                doc_id: doc.doc_id.clone(),
                span: (start, e),
                text: text::char_slice(&doc.text, start, e).to_string(),
            }
        })
        .collect())
}

/// Groups consecutive sentences while the cosine between neighbouring
/// sentence embeddings stays at or above `threshold`.
pub fn chunk_semantic(doc: &SourceDocument, embedder: &dyn Embedder, threshold: f64) -> Result<Vec<Chunk>, CorpusError> {
    let spans = text::sentence_spans(&doc.text);
    if spans.is_empty() {
        return Err(CorpusError::EmptyDocument(doc.doc_id.clone()));
    }
    let vectors = spans.iter().map(|r| embedder.embed(&doc.text[r.clone()])).collect::<Result<Vec<_>, _>>()?;
    let mut groups: Vec<(usize, usize)> = vec![(spans[0].start, spans[0].end)];
    for i in 1..spans.len() {
        if cosine(&vectors[i - 1], &vectors[i]) >= threshold {
            groups.last_mut().unwrap().1 = spans[i].end;
        } else {
            groups.push((spans[i].start, spans[i].end));
        }
    }
    let offs = text::char_offsets(&doc.text);
    let to_char = |byte: usize| offs.partition_point(|&b| b < byte);
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(i, (bs, be))| Chunk {
            chunk_id: chunk_id(&doc.doc_id, i),
            doc_id: doc.doc_id.clone(),
            span: (to_char(bs), to_char(be)),
            text: doc.text[bs..be].to_string(),
        })
        .collect())
}
