//! Text primitives shared by indexing, retrieval and verification.
//!
//! Everything here is deterministic and locale-independent: lowercase
//! Unicode word segmentation without stemming, a rule-based sentence
//! splitter tuned for Spanish legal prose, and Spanish numeral parsing.

use std::collections::BTreeSet;
use std::ops::Range;

use unicode_segmentation::UnicodeSegmentation;

/// Lowercased Unicode words, in order, duplicates kept.
pub fn tokenize(text: &str) -> Vec<String> {
    text.unicode_words().map(|w| w.to_lowercase()).collect()
}

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.binary_search(&token).is_ok()
}

/// Distinct non-stopword tokens that contain at least one letter.
pub fn content_terms(text: &str) -> BTreeSet<String> {
    tokenize(text)
        .into_iter()
        .filter(|t| t.chars().any(char::is_alphabetic) && !is_stopword(t))
        .collect()
}

/// Fraction of the query's content terms present in `text`. Zero when the
/// query has no content terms.
pub fn overlap_ratio(query: &str, text: &str) -> f64 {
    let q = content_terms(query);
    if q.is_empty() {
        return 0.0;
    }
    let t = content_terms(text);
    q.intersection(&t).count() as f64 / q.len() as f64
}

pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

/// Byte offset of every char boundary, plus the final `text.len()`.
/// `offsets[i]` is the byte position of char `i`.
pub fn char_offsets(text: &str) -> Vec<usize> {
    let mut v: Vec<usize> = text.char_indices().map(|(i, _)| i).collect();
    v.push(text.len());
    v
}

/// Substring by char positions `[start, end)`.
pub fn char_slice(text: &str, start: usize, end: usize) -> &str {
    let mut it = text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len()));
    let b0 = it.by_ref().nth(start).unwrap_or(text.len());
    let b1 = if end > start {
        it.nth(end - start - 1).unwrap_or(text.len())
    } else {
        b0
    };
    &text[b0..b1]
}

const ABBREVIATIONS: &[&str] = &[
    "ap", "apdo", "art", "arts", "av", "avda", "cfr", "d", "dª", "dña", "dr", "dra", "ee.uu",
    "excmo", "excma", "fj", "fs", "ilmo", "ilma", "lit", "n", "n.º", "nº", "núm", "núms", "num",
    "p", "p.ej", "pág", "págs", "párr", "s.a", "s.l", "sec", "sr", "sra", "srta", "ss", "st",
    "sts", "vid", "vs",
];

fn is_abbreviation(word: &str) -> bool {
    let w = word.trim_start_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
    if w.chars().count() == 1 && w.chars().all(char::is_alphabetic) {
        // initials such as "J. Pérez"
        return true;
    }
    ABBREVIATIONS.contains(&w.as_str())
}

fn opens_sentence(c: char) -> bool {
    c.is_uppercase() || c.is_ascii_digit() || matches!(c, '¿' | '¡' | '«' | '"' | '“' | '[' | '(' | '—' | '-')
}

/// Byte spans of sentences, trimmed of surrounding whitespace.
///
/// A sentence ends at `.`, `!`, `?` or `…` (plus any closing quote or
/// bracket) when followed by whitespace and a sentence-opening character,
/// or by the end of the text, unless the word before a period is a known
/// abbreviation. A blank line always ends a sentence.
pub fn sentence_spans(text: &str) -> Vec<Range<usize>> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut spans = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    let push = |spans: &mut Vec<Range<usize>>, s: usize, e: usize| {
        let piece = &text[s..e];
        let lead = piece.len() - piece.trim_start().len();
        let trimmed = piece.trim();
        if !trimmed.is_empty() {
            spans.push(s + lead..s + lead + trimmed.len());
        }
    };
    while i < chars.len() {
        let (pos, c) = chars[i];
        if c == '\n' {
            // blank line (only whitespace between two newlines)
            let mut j = i + 1;
            while j < chars.len() && chars[j].1 != '\n' && chars[j].1.is_whitespace() {
                j += 1;
            }
            if j < chars.len() && chars[j].1 == '\n' {
                push(&mut spans, start, pos);
                start = chars[j].0;
                i = j + 1;
                continue;
            }
        }
        if matches!(c, '.' | '!' | '?' | '…') {
            let mut j = i + 1;
            while j < chars.len() && matches!(chars[j].1, '.' | '!' | '?' | '…' | '"' | '”' | '»' | ')' | ']' | '\'') {
                j += 1;
            }
            let end_byte = if j < chars.len() { chars[j].0 } else { text.len() };
            let at_end = text[end_byte..].trim().is_empty();
            let boundary = if at_end {
                true
            } else if j < chars.len() && chars[j].1.is_whitespace() {
                let mut k = j;
                while k < chars.len() && chars[k].1.is_whitespace() {
                    k += 1;
                }
                k < chars.len() && opens_sentence(chars[k].1)
            } else {
                false
            };
            let abbreviated = c == '.' && {
                let before = &text[start..pos];
                let word = before.rsplit(char::is_whitespace).next().unwrap_or("");
                !word.is_empty() && is_abbreviation(word)
            };
            if boundary && !abbreviated {
                push(&mut spans, start, end_byte);
                start = end_byte;
                i = j;
                continue;
            }
        }
        i += 1;
    }
    push(&mut spans, start, text.len());
    spans
}

pub fn sentences(text: &str) -> Vec<&str> {
    sentence_spans(text).into_iter().map(|r| &text[r]).collect()
}

/// Numeric values written in the text, Spanish convention: `.` groups
/// thousands, `,` marks decimals (`90.000` → 90000, `1.234,5` → 1234.5).
/// A lone `.` followed by one or two digits reads as a decimal (`24.2`).
pub fn numbers(text: &str) -> Vec<f64> {
    let mut out = Vec::new();
    for token in text.split(|c: char| !(c.is_ascii_digit() || c == '.' || c == ',')) {
        let token = token.trim_matches(|c| c == '.' || c == ',');
        if token.is_empty() || !token.starts_with(|c: char| c.is_ascii_digit()) {
            continue;
        }
        if let Some(v) = parse_spanish_number(token) {
            out.push(v);
        }
    }
    out
}

fn parse_spanish_number(token: &str) -> Option<f64> {
    let (int_part, frac) = match token.split_once(',') {
        Some((a, b)) => (a, Some(b)),
        None => (token, None),
    };
    let groups: Vec<&str> = int_part.split('.').collect();
    let int_digits = if groups.len() > 1 && groups[1..].iter().all(|g| g.len() == 3) && groups[0].len() <= 3 {
        groups.concat()
    } else if groups.len() == 2 && frac.is_none() {
        return format!("{}.{}", groups[0], groups[1]).parse().ok();
    } else if groups.len() == 1 {
        groups[0].to_string()
    } else {
        return None;
    };
    let s = match frac {
        Some(f) if f.chars().all(|c| c.is_ascii_digit()) && !f.is_empty() => format!("{int_digits}.{f}"),
        Some(_) => return None,
        None => int_digits,
    };
    s.parse().ok()
}

const HEDGES: &[&str] = &[
    "al parecer", "aparentemente", "posible", "posiblemente", "presunta", "presuntamente",
    "presunto", "probablemente", "podría", "podrían", "parece", "supuesta", "supuestamente",
    "supuesto", "indicios", "sospecha", "quizá", "quizás",
];

/// Whether the sentence hedges its assertion ("presuntamente", "podría"...).
pub fn is_hedged(text: &str) -> bool {
    let lower = format!(" {} ", tokenize(text).join(" "));
    HEDGES.iter().any(|h| lower.contains(&format!(" {h} ")))
}

const NEGATIONS: &[&str] = &["no", "nunca", "jamás", "tampoco", "ni", "ningún", "ninguna", "ninguno", "nadie", "sin"];

pub fn is_negated(text: &str) -> bool {
    tokenize(text).iter().any(|t| NEGATIONS.contains(&t.as_str()))
}

// Sorted for binary search.
const STOPWORDS: &[&str] = &[
    "a", "al", "algo", "algunas", "algunos", "an", "and", "ante", "antes", "are", "as", "así",
    "at", "aun", "aunque", "be", "by", "cada", "como", "con", "contra", "cual", "cuando", "de",
    "del", "desde", "donde", "dos", "durante", "e", "el", "ella", "ellas", "ellos", "en",
    "entre", "era", "es", "esa", "esas", "ese", "eso", "esos", "esta", "estaba", "estado",
    "estas", "este", "esto", "estos", "está", "están", "for", "fue", "fueron", "ha", "haber",
    "había", "han", "has", "hasta", "hay", "he", "in", "is", "it", "la", "las", "le", "les",
    "lo", "los", "mas", "mismo", "muy", "más", "ni", "no", "nos", "o", "of", "on", "or", "os",
    "otra", "otras", "otro", "otros", "para", "pero", "poco", "por", "porque", "que", "qué",
    "se", "sea", "ser", "si", "sido", "sin", "sobre", "son", "su", "sus", "sí", "también",
    "tan", "tanto", "the", "to", "todo", "todos", "tras", "u", "un", "una", "unas", "uno",
    "unos", "was", "with", "y", "ya", "yo", "él",
];
