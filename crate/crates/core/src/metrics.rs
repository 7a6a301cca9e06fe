//! Per-response scores and grouped reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::citation::CitationKey;
use crate::dataset::GoldStandard;
use crate::generation::{Condition, ExperimentCell};
use crate::stats::{self, MannWhitney, PMethod, SufficientStats};
use crate::verification::{CitationStatus, Detectability, FactStatus, FidelityReport, Severity};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_K: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelSource {
    Machine,
    Human,
}

impl LabelSource {
    /// How reports built from this source are labelled.
    pub fn report_label(self) -> &'static str {
        match self {
            LabelSource::Machine => "machine-estimated",
            LabelSource::Human => "human-arbitrated",
        }
    }
}

impl FromStr for LabelSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "machine" => Ok(LabelSource::Machine),
            "human" => Ok(LabelSource::Human),
            _ => Err(format!("unknown label source {s:?} (expected machine or human)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CitationLabel {
    /// Normalized citation text.
    pub key: String,
    pub status: CitationStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity: Option<Severity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detectability: Option<Detectability>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactLabel {
    pub claim: String,
    pub status: FactStatus,
}

/// The labels of one response from a single source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseLabels {
    pub record_id: String,
    pub source: LabelSource,
    pub citations: Vec<CitationLabel>,
    pub facts: Vec<FactLabel>,
    /// Usefulness of each listed argument, in listing order.
    #[serde(default)]
    pub likert: Vec<u8>,
    #[serde(default)]
    pub review_minutes: Option<f64>,
}

impl ResponseLabels {
    pub fn from_report(report: &FidelityReport) -> Self {
        ResponseLabels {
            record_id: report.record_id.clone(),
            source: LabelSource::Machine,
            citations: report
                .citation_verdicts
                .iter()
                .map(|v| CitationLabel { key: v.key.normalized(), status: v.status, severity: v.severity, detectability: v.detectability })
                .collect(),
            facts: report.fact_verdicts.iter().map(|v| FactLabel { claim: v.text.clone(), status: v.status }).collect(),
            likert: Vec::new(),
            review_minutes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("record {record_id}: labels come from {found:?}, expected {expected:?}")]
    MixedSources { record_id: String, expected: LabelSource, found: LabelSource },
    #[error("record {record_id}: likert[{index}] = {value} is outside 1..=5")]
    Likert { record_id: String, index: usize, value: u8 },
    #[error("unknown grouping key {0:?} (expected condition, backend, temperature or template)")]
    UnknownGroupKey(String),
    #[error("no scores to aggregate")]
    Empty,
    #[error("k must be positive")]
    ZeroK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseScore {
    pub record_id: String,
    pub label_source: LabelSource,
    pub n_total_citations: usize,
    pub n_false_citations: usize,
    pub n_asserted_facts: usize,
    pub n_fabricated_facts: usize,
    pub fcr: Option<f64>,
    pub ffr: Option<f64>,
    /// Undefined when the task names no gold cases.
    pub coverage: Option<f64>,
    pub useful_at_k: Option<bool>,
    pub review_minutes: Option<f64>,
    #[serde(default)]
    pub citation_errors: BTreeMap<CitationStatus, usize>,
    #[serde(default)]
    pub fact_errors: BTreeMap<FactStatus, usize>,
}

fn covers(cited: &CitationKey, gold: &CitationKey) -> bool {
    cited.same_reference(gold) || (cited.subdivision.is_some() && CitationKey { subdivision: None, ..cited.clone() }.same_reference(gold))
}

/// Scores one response. Citations are counted once per normalized key,
/// keeping the first label. The cited set for coverage is every labelled
/// citation, whatever its status; a cited subdivision covers its article.
pub fn score_response(labels: &ResponseLabels, gold: &GoldStandard, k: usize, source: LabelSource) -> Result<ResponseScore, MetricsError> {
    if labels.source != source {
        return Err(MetricsError::MixedSources { record_id: labels.record_id.clone(), expected: source, found: labels.source });
    }
    if k == 0 {
        return Err(MetricsError::ZeroK);
    }
    if let Some((index, &value)) = labels.likert.iter().enumerate().find(|(_, v)| !(1..=5).contains(*v)) {
        return Err(MetricsError::Likert { record_id: labels.record_id.clone(), index, value });
    }
    let mut seen = BTreeSet::new();
    let unique: Vec<&CitationLabel> = labels.citations.iter().filter(|c| seen.insert(c.key.clone())).collect();
    let n_total = unique.len();
    let mut citation_errors = BTreeMap::new();
    for c in unique.iter().filter(|c| c.status.is_false()) {
        *citation_errors.entry(c.status).or_default() += 1;
    }
    let n_false: usize = citation_errors.values().sum();
    let mut fact_errors = BTreeMap::new();
    for f in labels.facts.iter().filter(|f| f.status.is_fabricated()) {
        *fact_errors.entry(f.status).or_default() += 1;
    }
    let n_fab: usize = fact_errors.values().sum();
    let n_facts = labels.facts.len();
    let cited: Vec<CitationKey> = unique.iter().filter_map(|c| c.key.parse().ok()).collect();
    let coverage = (!gold.cases.is_empty()).then(|| {
        let hit = gold.cases.iter().filter(|g| cited.iter().any(|c| covers(c, g))).count();
        hit as f64 / gold.cases.len() as f64
    });
    Ok(ResponseScore {
        record_id: labels.record_id.clone(),
        label_source: source,
        n_total_citations: n_total,
        n_false_citations: n_false,
        n_asserted_facts: n_facts,
        n_fabricated_facts: n_fab,
        fcr: (n_total > 0).then(|| n_false as f64 / n_total as f64),
        ffr: (n_facts > 0).then(|| n_fab as f64 / n_facts as f64),
        coverage,
        useful_at_k: (!labels.likert.is_empty()).then(|| labels.likert.iter().take(k).any(|&v| v >= 4)),
        review_minutes: labels.review_minutes,
        citation_errors,
        fact_errors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupKey {
    Condition,
    Backend,
    Temperature,
    Template,
}

impl GroupKey {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupKey::Condition => "condition",
            GroupKey::Backend => "backend",
            GroupKey::Temperature => "temperature",
            GroupKey::Template => "template",
        }
    }

    fn value(self, cell: &ExperimentCell) -> String {
        match self {
            GroupKey::Condition => cell.condition.to_string(),
            GroupKey::Backend => cell.backend_id.clone(),
            GroupKey::Temperature => cell.temperature.to_string(),
            GroupKey::Template => cell.template.to_string(),
        }
    }
}

impl FromStr for GroupKey {
    type Err = MetricsError;
    fn from_str(s: &str) -> Result<Self, MetricsError> {
        match s {
            "condition" => Ok(GroupKey::Condition),
            "backend" => Ok(GroupKey::Backend),
            "temperature" => Ok(GroupKey::Temperature),
            "template" => Ok(GroupKey::Template),
            _ => Err(MetricsError::UnknownGroupKey(s.to_string())),
        }
    }
}

pub fn parse_grouping(keys: &[&str]) -> Result<Vec<GroupKey>, MetricsError> {
    keys.iter().map(|k| k.parse()).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    /// Responses where the metric is defined.
    pub n: usize,
    /// Responses left out because the metric is undefined for them.
    pub excluded: usize,
    pub mean: Option<f64>,
    /// Undefined below two responses.
    pub se: Option<f64>,
    pub stats: SufficientStats,
}

impl MetricSummary {
    fn from_values(values: impl Iterator<Item = Option<f64>>) -> Self {
        let mut stats = SufficientStats::default();
        let mut excluded = 0;
        for v in values {
            match v {
                Some(x) => stats.push(x),
                None => excluded += 1,
            }
        }
        MetricSummary { n: stats.n, excluded, mean: stats.mean(), se: stats.se(), stats }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub counts: BTreeMap<String, usize>,
    /// Each count over all errors of its family in the group.
    pub shares: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub key: BTreeMap<String, String>,
    pub n: usize,
    pub fcr: MetricSummary,
    pub ffr: MetricSummary,
    pub coverage: MetricSummary,
    pub review_minutes: MetricSummary,
    /// Share of responses with a useful argument among the first k, with
    /// responses lacking usefulness scores excluded.
    pub useful_at_k: MetricSummary,
    pub citation_taxonomy: Taxonomy,
    pub fact_taxonomy: Taxonomy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub metric: String,
    pub a: Condition,
    pub b: Condition,
    pub n_a: usize,
    pub n_b: usize,
    pub u_a: f64,
    pub u_b: f64,
    pub p: f64,
    pub method: PMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub schema_version: u32,
    pub label_source: LabelSource,
    /// `machine-estimated` or `human-arbitrated`.
    pub label: String,
    pub k: usize,
    pub grouping: Vec<GroupKey>,
    pub groups: Vec<GroupReport>,
    pub pair_tests: Vec<PairTest>,
    pub notes: Vec<String>,
}

fn taxonomy<S: Copy + Ord>(maps: &[&BTreeMap<S, usize>], name: impl Fn(S) -> &'static str) -> Taxonomy {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for m in maps {
        for (s, c) in *m {
            *counts.entry(name(*s).to_string()).or_default() += c;
        }
    }
    let total: usize = counts.values().sum();
    let shares = counts.iter().map(|(k, c)| (k.clone(), *c as f64 / total as f64)).collect();
    Taxonomy { counts, shares }
}

/// Groups scores by the given keys and tests every pair of conditions
/// with Mann-Whitney on per-response FCR and FFR, pooling over the other
/// axes. All scores must come from one label source.
pub fn aggregate(scores: &[(ExperimentCell, ResponseScore)], grouping: &[GroupKey], k: usize) -> Result<AggregateReport, MetricsError> {
    let Some((_, first)) = scores.first() else {
        return Err(MetricsError::Empty);
    };
    let source = first.label_source;
    if let Some((_, s)) = scores.iter().find(|(_, s)| s.label_source != source) {
        return Err(MetricsError::MixedSources { record_id: s.record_id.clone(), expected: source, found: s.label_source });
    }
    let mut groups: BTreeMap<Vec<String>, Vec<&ResponseScore>> = BTreeMap::new();
    for (cell, s) in scores {
        groups.entry(grouping.iter().map(|g| g.value(cell)).collect()).or_default().push(s);
    }
    let groups = groups
        .into_iter()
        .map(|(values, members)| GroupReport {
            key: grouping.iter().map(|g| g.as_str().to_string()).zip(values).collect(),
            n: members.len(),
            fcr: MetricSummary::from_values(members.iter().map(|s| s.fcr)),
            ffr: MetricSummary::from_values(members.iter().map(|s| s.ffr)),
            coverage: MetricSummary::from_values(members.iter().map(|s| s.coverage)),
            review_minutes: MetricSummary::from_values(members.iter().map(|s| s.review_minutes)),
            useful_at_k: MetricSummary::from_values(members.iter().map(|s| s.useful_at_k.map(|u| if u { 1.0 } else { 0.0 }))),
            citation_taxonomy: taxonomy(&members.iter().map(|s| &s.citation_errors).collect::<Vec<_>>(), CitationStatus::as_str),
            fact_taxonomy: taxonomy(&members.iter().map(|s| &s.fact_errors).collect::<Vec<_>>(), FactStatus::as_str),
        })
        .collect();

    let mut by_condition: BTreeMap<Condition, Vec<&ResponseScore>> = BTreeMap::new();
    for (cell, s) in scores {
        by_condition.entry(cell.condition).or_default().push(s);
    }
    let conditions: Vec<Condition> = by_condition.keys().copied().collect();
    let mut pair_tests = Vec::new();
    for (i, a) in conditions.iter().enumerate() {
        for b in &conditions[i + 1..] {
            for (metric, get) in [("fcr", (|s: &ResponseScore| s.fcr) as fn(&ResponseScore) -> Option<f64>), ("ffr", |s| s.ffr)] {
                let xa: Vec<f64> = by_condition[a].iter().filter_map(|s| get(s)).collect();
                let xb: Vec<f64> = by_condition[b].iter().filter_map(|s| get(s)).collect();
                if let Ok(MannWhitney { u_a, u_b, p, method }) = stats::mann_whitney_u(&xa, &xb) {
                    pair_tests.push(PairTest { metric: metric.into(), a: *a, b: *b, n_a: xa.len(), n_b: xb.len(), u_a, u_b, p, method });
                }
            }
        }
    }
    Ok(AggregateReport {
        schema_version: REPORT_SCHEMA_VERSION,
        label_source: source,
        label: source.report_label().to_string(),
        k,
        grouping: grouping.to_vec(),
        groups,
        pair_tests,
        notes: vec![
            "rates with a zero denominator are excluded from that rate's mean; see the excluded counts".into(),
            "an output with no citations and no factual claims has fidelity 1".into(),
        ],
    })
}

fn pct(m: &MetricSummary) -> String {
    match (m.mean, m.se) {
        (Some(x), Some(se)) => format!("{:.2}% ± {:.2}", 100.0 * x, 100.0 * se),
        (Some(x), None) => format!("{:.2}% ± n/a", 100.0 * x),
        _ => "n/a".into(),
    }
}

fn plain(m: &MetricSummary) -> String {
    m.mean.map(|x| format!("{x:.2}")).unwrap_or_else(|| "n/a".into())
}

/// Aligned plain-text tables of a report.
pub fn render_text(report: &AggregateReport) -> String {
    let mut rows = vec![vec![
        "group".to_string(),
        "n".into(),
        "FCR".into(),
        "excl".into(),
        "FFR".into(),
        "excl".into(),
        format!("Useful@{}", report.k),
        "coverage".into(),
        "review min".into(),
    ]];
    for g in &report.groups {
        let name = if g.key.is_empty() { "all".to_string() } else { g.key.values().cloned().collect::<Vec<_>>().join(" / ") };
        rows.push(vec![
            name,
            g.n.to_string(),
            pct(&g.fcr),
            g.fcr.excluded.to_string(),
            pct(&g.ffr),
            g.ffr.excluded.to_string(),
            g.useful_at_k.mean.map(|x| format!("{:.1}%", 100.0 * x)).unwrap_or_else(|| "n/a".into()),
            plain(&g.coverage),
            plain(&g.review_minutes),
        ]);
    }
    let widths: Vec<usize> = (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
    let mut out = format!("Reliability by group ({})\n", report.label);
    for (i, r) in rows.iter().enumerate() {
        let cells: Vec<String> = r.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
        }
    }
    if !report.pair_tests.is_empty() {
        out.push_str("\nMann-Whitney tests between conditions\n");
        for t in &report.pair_tests {
            let _ = writeln!(
                out,
                "{:<4} {} vs {}: U = {} (n = {}, {}), p = {:.3e} ({:?})",
                t.metric, t.a, t.b, t.u_a, t.n_a, t.n_b, t.p, t.method
            );
        }
    }
    out
}

/// One CSV row per response score.
pub fn scores_csv(scores: &[(ExperimentCell, ResponseScore)]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "record_id", "task", "backend", "condition", "temperature", "template", "label_source", "n_citations", "n_false_citations",
        "n_facts", "n_fabricated_facts", "fcr", "ffr", "coverage", "useful_at_k", "review_minutes",
    ])?;
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for (c, s) in scores {
        w.write_record([
            s.record_id.clone(),
            c.task_id.clone(),
            c.backend_id.clone(),
            c.condition.to_string(),
            c.temperature.to_string(),
            c.template.to_string(),
            s.label_source.report_label().to_string(),
            s.n_total_citations.to_string(),
            s.n_false_citations.to_string(),
            s.n_asserted_facts.to_string(),
            s.n_fabricated_facts.to_string(),
            opt(s.fcr),
            opt(s.ffr),
            opt(s.coverage),
            s.useful_at_k.map(|u| u.to_string()).unwrap_or_default(),
            opt(s.review_minutes),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
