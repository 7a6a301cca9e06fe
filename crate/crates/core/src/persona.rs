//! A scripted drafting backend with planted error rates.
//!
//! It writes a short opinion with a facts section and a legal-grounds
//! section. Without retrieved sources in the prompt it behaves as a
//! generative model, otherwise as a consultative one; each profile has
//! its own false-citation and fabricated-fact rates. Planted errors are
//! built so the machine verifier classifies them as the intended type, which
//! makes the planted rates the ground truth for measured rates. Asked to
//! correct a draft, it drops every sentence containing a listed item.

use std::collections::BTreeSet;
use std::sync::LazyLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{BackendError, CompletionBackend};
use crate::citation::{self, CitationKey, CitationKind, Court};
use crate::corpus::IndexBundle;
use crate::prompt;
use crate::text;
use crate::verification::{remove_spans, CitationStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub citations: usize,
    pub false_citation_rate: f64,
    pub facts: usize,
    pub fabricated_fact_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaConfig {
    pub id: String,
    #[serde(default = "generative")]
    pub generative: Profile,
    #[serde(default = "consultative")]
    pub consultative: Profile,
    /// Relative weights of the false-citation types.
    #[serde(default = "default_mix")]
    pub false_mix: Vec<(CitationStatus, f64)>,
}

fn generative() -> Profile {
    Profile { citations: 10, false_citation_rate: 0.30, facts: 6, fabricated_fact_rate: 0.156 }
}

fn consultative() -> Profile {
    Profile { citations: 10, false_citation_rate: 0.08, facts: 6, fabricated_fact_rate: 0.061 }
}

fn default_mix() -> Vec<(CitationStatus, f64)> {
    vec![
        (CitationStatus::Nonexistent, 0.4),
        (CitationStatus::MisattributedCourt, 0.2),
        (CitationStatus::Misgrounded, 0.2),
        (CitationStatus::TemporalRepealed, 0.2),
    ]
}

impl PersonaConfig {
    pub fn new(id: &str) -> Self {
        PersonaConfig { id: id.to_string(), generative: generative(), consultative: consultative(), false_mix: default_mix() }
    }
}

#[derive(Debug, Clone)]
struct Source {
    key: CitationKey,
    sentences: Vec<String>,
}

/// Sentences a persona puts behind unrelated citations.
const OFF_TOPIC: &[&str] = &[
    "la aeronavegabilidad de las avionetas exige revisar periódicamente hélices y trenes de aterrizaje",
    "el cultivo del olivo en bancales requiere podas escalonadas durante el invierno",
    "las mareas vivas coinciden con las fases lunares de novilunio y plenilunio",
    "la maduración del queso curado depende de la humedad constante de la cueva",
    "los glaciares pirenaicos retroceden por el ascenso sostenido de las temperaturas estivales",
];

const INVENTED_SUBJECTS: &[&str] = &[
    "La mercantil Halcón Dorado Logística",
    "El perito naval Anselmo Briviesca",
    "La asociación vecinal Mirasierra Alta",
    "El notario Evaristo Quintanilla",
    "La aseguradora Pléyade Mutua",
];

const INVENTED_PREDICATES: &[&str] = &[
    "remitió un burofax reconociendo la totalidad de la deuda",
    "levantó acta de presencia en las instalaciones",
    "suscribió un pacto de confidencialidad con ambas partes",
    "intervino como testigo presencial de los hechos",
    "abonó una penalización adicional por demora",
];

pub struct PersonaBackend {
    config: PersonaConfig,
    /// Sources in force at the snapshot date.
    memory: Vec<Source>,
    repealed: Vec<Source>,
    registry: BTreeSet<CitationKey>,
}

fn usable_sentences(body: &str) -> Vec<String> {
    text::sentences(body)
        .into_iter()
        .filter(|s| s.ends_with('.') && citation::parse_citations(s).is_empty() && text::content_terms(s).len() >= 4)
        .map(|s| s.trim_end_matches('.').to_string())
        .collect()
}

impl PersonaBackend {
    /// Builds the persona's knowledge of the corpus from a bundle. It needs
    /// enough keyed sources to write its citations without repeats.
    pub fn new(config: PersonaConfig, bundle: &IndexBundle) -> Result<Self, BackendError> {
        let snapshot = bundle.snapshot_date();
        let (mut memory, mut repealed) = (Vec::new(), Vec::new());
        let mut registry = BTreeSet::new();
        for doc in bundle.docs.values() {
            let Some(key) = &doc.citation_key else { continue };
            registry.insert(key.clone());
            let src = Source { key: key.clone(), sentences: usable_sentences(&doc.text) };
            if src.sentences.is_empty() {
                continue;
            }
            if doc.repealed_at(snapshot) { repealed.push(src) } else { memory.push(src) }
        }
        let need = [&config.generative, &config.consultative].iter().map(|p| p.citations).max().unwrap_or(0);
        if memory.len() < need {
            return Err(BackendError::Config {
                backend: config.id.clone(),
                message: format!("corpus has {} usable sources in force, persona needs {need}", memory.len()),
            });
        }
        Ok(PersonaBackend { config, memory, repealed, registry })
    }

    pub fn config(&self) -> &PersonaConfig {
        &self.config
    }

    fn rng(&self, prompt: &str, temperature: f64, seed: u64) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(format!("archivist-persona/v1|{}|{seed}|{temperature}|", self.config.id).as_bytes());
        h.update(prompt.as_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    fn correct(&self, prompt: &str) -> String {
        let draft = prompt::previous_draft(prompt).unwrap_or_default();
        let items = prompt::correction_items(prompt);
        let positions: Vec<usize> = items
            .iter()
            .flat_map(|item| draft.match_indices(item.as_str()).map(|(i, _)| i).collect::<Vec<_>>())
            .collect();
        let bad = crate::verification::sentences_at(draft, positions);
        let mut out = remove_spans(draft, &bad);
        out.push('\n');
        out
    }

    fn draft(&self, prompt: &str, temperature: f64, seed: u64) -> String {
        let mut rng = self.rng(prompt, temperature, seed);
        let sources = context_sources(prompt);
        let profile = if sources.is_empty() && !prompt.contains(prompt::SOURCES_HEADER) {
            &self.config.generative
        } else {
            &self.config.consultative
        };
        let n_false = stochastic_round(profile.citations as f64 * profile.false_citation_rate, &mut rng).min(profile.citations);
        let n_real = profile.citations - n_false;

        // real sources: retrieved ones first, then recalled ones
        let mut pool: Vec<(Source, Option<String>)> = Vec::new();
        for (tag, key, repealed, body) in &sources {
            if *repealed || pool.iter().any(|(s, _)| s.key == *key) {
                continue;
            }
            let sentences = usable_sentences(body);
            if !sentences.is_empty() {
                pool.push((Source { key: key.clone(), sentences }, Some(tag.clone())));
            }
        }
        let mut recalled: Vec<&Source> = self.memory.iter().filter(|m| !pool.iter().any(|(s, _)| s.key == m.key)).collect();
        recalled.shuffle(&mut rng);
        pool.extend(recalled.into_iter().map(|s| (s.clone(), None)));

        let mut citations: Vec<String> = Vec::new();
        let mut used: Vec<CitationKey> = Vec::new();
        for (src, tag) in pool.iter().take(n_real) {
            let body = &src.sentences[rng.random_range(0..src.sentences.len())];
            citations.push(citation_sentence(&src.key, tag.as_deref(), body));
            used.push(src.key.clone());
        }
        let spare: Vec<&Source> = pool.iter().skip(n_real).map(|(s, _)| s).collect();
        let mut spare = spare.into_iter();
        let mut repealed = self.repealed.iter();
        for _ in 0..n_false {
            let kind = pick_weighted(&self.config.false_mix, &mut rng);
            let planted = match kind {
                CitationStatus::TemporalRepealed => repealed.next().map(|s| {
                    let body = &s.sentences[rng.random_range(0..s.sentences.len())];
                    citation_sentence(&s.key, None, body)
                }),
                CitationStatus::Misgrounded => spare.next().and_then(|s| {
                    let doc_text = s.sentences.join(". ");
                    OFF_TOPIC
                        .iter()
                        .find(|o| text::overlap_ratio(o, &doc_text) < 0.1)
                        .map(|o| citation_sentence(&s.key, None, o))
                }),
                CitationStatus::MisattributedCourt => self.swapped_court(&used, &mut rng).map(|k| {
                    let s = self.memory.iter().find(|m| m.key.number == k.number && m.key.year == k.year).expect("swap of a known key");
                    citation_sentence(&k, None, &s.sentences[0])
                }),
                _ => None,
            };
            let planted = planted.unwrap_or_else(|| self.nonexistent(&used, &mut rng));
            for k in citation::parse_citations(&planted) {
                used.push(k);
            }
            citations.push(planted);
        }
        citations.shuffle(&mut rng);

        let facts = self.facts(prompt, profile, &mut rng);
        let mut out = String::from("# Dictamen\n\n## Hechos\n\n");
        out.push_str(&facts.join(" "));
        out.push_str("\n\n## Fundamentos de derecho\n\n");
        out.push_str(&citations.join(" "));
        out.push('\n');
        out
    }

    fn swapped_court(&self, used: &[CitationKey], rng: &mut ChaCha8Rng) -> Option<CitationKey> {
        let mut candidates: Vec<CitationKey> = self
            .memory
            .iter()
            .filter(|m| m.key.kind != CitationKind::StatuteArticle)
            .filter_map(|m| {
                let court = match m.key.court {
                    Court::SupremeCourt => Court::ConstitutionalCourt,
                    _ => Court::SupremeCourt,
                };
                let k = CitationKey { court, date: None, subdivision: None, ..m.key.clone() };
                let clash = self.registry.iter().chain(used).any(|r| r.same_reference(&k));
                (!clash).then_some(k)
            })
            .collect();
        candidates.shuffle(rng);
        candidates.into_iter().next()
    }

    fn nonexistent(&self, used: &[CitationKey], rng: &mut ChaCha8Rng) -> String {
        loop {
            let number = rng.random_range(5000..9000u32);
            let year = rng.random_range(2005..2024i32);
            let key: CitationKey = format!("STS {number}/{year}").parse().expect("well-formed citation");
            if !self.registry.iter().chain(used).any(|r| r.number == key.number && r.year == key.year) {
                let body = "la doctrina consolidada de la Sala avala plenamente la pretensión ejercitada por esta parte";
                return citation_sentence(&key, None, body);
            }
        }
    }

    fn facts(&self, prompt: &str, profile: &Profile, rng: &mut ChaCha8Rng) -> Vec<String> {
        let brief = section(prompt, "## Escrito de partida").unwrap_or_default();
        let mut supported: Vec<String> = text::sentences(brief)
            .into_iter()
            .filter(|s| s.ends_with('.') && citation::parse_citations(s).is_empty() && text::content_terms(s).len() >= 3)
            .map(str::to_string)
            .collect();
        supported.shuffle(rng);
        let n = profile.facts.min(supported.len().max(1));
        let n_fab = stochastic_round(n as f64 * profile.fabricated_fact_rate, rng).min(n);
        let mut facts: Vec<String> = supported.iter().take(n - n_fab).cloned().collect();
        let numeric: Vec<&String> = supported.iter().filter(|s| !text::numbers(s).is_empty()).collect();
        for i in 0..n_fab {
            let exaggerate = rng.random_bool(0.5);
            let fab = match (exaggerate, numeric.get(i)) {
                (true, Some(s)) => inflate_first_number(s),
                _ => {
                    let subj = INVENTED_SUBJECTS[rng.random_range(0..INVENTED_SUBJECTS.len())];
                    let pred = INVENTED_PREDICATES[rng.random_range(0..INVENTED_PREDICATES.len())];
                    format!("{subj} {pred}.")
                }
            };
            if !facts.contains(&fab) {
                facts.push(fab);
            }
        }
        facts.shuffle(rng);
        facts
    }
}

fn stochastic_round(x: f64, rng: &mut ChaCha8Rng) -> usize {
    let floor = x.floor();
    floor as usize + usize::from(rng.random::<f64>() < x - floor)
}

fn pick_weighted(mix: &[(CitationStatus, f64)], rng: &mut ChaCha8Rng) -> CitationStatus {
    let total: f64 = mix.iter().map(|m| m.1).sum();
    if mix.is_empty() || total <= 0.0 {
        return CitationStatus::Nonexistent;
    }
    let mut x = rng.random::<f64>() * total;
    for (s, w) in mix {
        if x < *w {
            return *s;
        }
        x -= w;
    }
    mix[mix.len() - 1].0
}

fn citation_sentence(key: &CitationKey, tag: Option<&str>, body: &str) -> String {
    let lead = if key.kind == CitationKind::StatuteArticle { "Conforme al" } else { "Conforme a la" };
    let mut chars = body.trim().chars();
    let first = chars.next().map(|c| c.to_lowercase().collect::<String>()).unwrap_or_default();
    let tag = tag.map(|t| format!(" [{t}]")).unwrap_or_default();
    format!("{lead} {}{tag}, {first}{}.", key.normalized(), chars.as_str().trim_end_matches('.'))
}

static NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d+").unwrap());

/// Multiplies the first number of the sentence by ten.
fn inflate_first_number(s: &str) -> String {
    match NUMBER.find(s) {
        Some(m) => format!("{}0{}", &s[..m.end()], &s[m.end()..]),
        None => s.to_string(),
    }
}

fn section<'a>(prompt: &'a str, header: &str) -> Option<&'a str> {
    let start = prompt.find(header)? + header.len();
    let rest = &prompt[start..];
    let end = rest.find("\n## ").unwrap_or(rest.len());
    Some(rest[..end].trim())
}

static BLOCK: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?m)^\[(S\d+)\] \(([^)]*)\) (.*)$").unwrap());

/// Source blocks of a prompt: tag, key, repeal flag and text.
fn context_sources(prompt: &str) -> Vec<(String, CitationKey, bool, String)> {
    let Some(body) = section(prompt, prompt::SOURCES_HEADER) else {
        return Vec::new();
    };
    BLOCK
        .captures_iter(body)
        .filter_map(|c| {
            let (label, repealed) = match c[2].strip_suffix("; derogada") {
                Some(l) => (l, true),
                None => (&c[2], false),
            };
            let key: CitationKey = label.parse().ok()?;
            Some((c[1].to_string(), key, repealed, c[3].to_string()))
        })
        .collect()
}

impl CompletionBackend for PersonaBackend {
    fn id(&self) -> &str {
        &self.config.id
    }

    fn generate(&self, prompt: &str, temperature: f64, seed: u64) -> Result<String, BackendError> {
        if prompt.contains(prompt::CORRECTION_HEADER) {
            return Ok(self.correct(prompt));
        }
        Ok(self.draft(prompt, temperature, seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inflation_multiplies_by_ten() {
        let s = inflate_first_number("Los daños ascienden a 9.000 euros.");
        assert_eq!(s, "Los daños ascienden a 90.000 euros.");
        assert_eq!(text::numbers(&s), vec![90000.0]);
    }

    #[test]
    fn stochastic_rounding_is_unbiased() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let total: usize = (0..n).map(|_| stochastic_round(0.8, &mut rng)).sum();
        assert!((total as f64 / n as f64 - 0.8).abs() < 0.02);
        assert_eq!(stochastic_round(3.0, &mut rng), 3);
    }

    #[test]
    fn citation_sentence_parses_back() {
        let k: CitationKey = "STS 123/2020".parse().unwrap();
        let s = citation_sentence(&k, Some("S2"), "El plazo es de caducidad.");
        assert_eq!(s, "Conforme a la STS 123/2020 [S2], el plazo es de caducidad.");
        let back = citation::parse_citations(&s);
        assert_eq!(back.len(), 1);
        assert!(back[0].same_reference(&k));
    }
}
