use std::time::Instant;

use archivist_core::dataset::GoldStandard;
use archivist_core::generation::{Condition, ExperimentCell, Template};
use archivist_core::metrics::{
    aggregate, render_text, score_response, scores_csv, CitationLabel, FactLabel, GroupKey, LabelSource, MetricsError,
    ResponseLabels, ResponseScore,
};
use archivist_core::stats::SufficientStats;
use archivist_core::verification::{CitationStatus, FactStatus};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

mod oracles;
use oracles::{brute_force, citation_pool, random_case, seeded};

fn labels(n_cit: usize, n_false: usize, n_facts: usize, n_fab: usize) -> ResponseLabels {
    ResponseLabels {
        record_id: "r".into(),
        source: LabelSource::Machine,
        citations: (0..n_cit)
            .map(|i| CitationLabel {
                key: format!("STS {}/2020", i + 1),
                status: if i < n_false { CitationStatus::Nonexistent } else { CitationStatus::Valid },
                severity: None,
                detectability: None,
            })
            .collect(),
        facts: (0..n_facts)
            .map(|i| FactLabel {
                claim: format!("hecho {i}"),
                status: if i < n_fab { FactStatus::FabricatedInvention } else { FactStatus::Supported },
            })
            .collect(),
        likert: vec![],
        review_minutes: None,
    }
}

#[test]
fn pool_keys_are_canonical() {
    for k in citation_pool() {
        let parsed: archivist_core::citation::CitationKey = k.parse().unwrap();
        assert_eq!(parsed.normalized(), k);
    }
}

#[test]
fn metric_oracle_on_random_sets() {
    let t = Instant::now();
    let mut rng = seeded(42);
    for i in 0..300 {
        let case = random_case(&mut rng, i);
        let want = brute_force(&case);
        let got = score_response(&case.labels, &case.gold, case.k, LabelSource::Machine).unwrap();
        assert_eq!(got.n_total_citations, want.n_total, "set {i}");
        assert_eq!(got.n_false_citations, want.n_false, "set {i}");
        assert_eq!(got.n_asserted_facts, want.n_facts, "set {i}");
        assert_eq!(got.n_fabricated_facts, want.n_fabricated, "set {i}");
        assert_eq!(got.fcr, want.fcr, "set {i}");
        assert_eq!(got.ffr, want.ffr, "set {i}");
        assert_eq!(got.coverage, want.coverage, "set {i}");
        assert_eq!(got.useful_at_k, want.useful, "set {i}");
    }
    assert!(t.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn nineteen_nonexistent_citations_saturate() {
    let s = score_response(&labels(19, 19, 0, 0), &GoldStandard::default(), 3, LabelSource::Machine).unwrap();
    assert_eq!(s.fcr, Some(1.0));
    assert_eq!(s.ffr, None);
    assert_eq!(s.citation_errors.get(&CitationStatus::Nonexistent), Some(&19));
}

#[test]
fn clean_response_scores_zero() {
    let s = score_response(&labels(12, 0, 8, 0), &GoldStandard::default(), 3, LabelSource::Machine).unwrap();
    assert_eq!((s.fcr, s.ffr), (Some(0.0), Some(0.0)));
    assert_eq!(s.coverage, None);
}

#[test]
fn article_subdivision_covers_the_article() {
    let mut l = labels(0, 0, 0, 0);
    l.citations.push(CitationLabel { key: "art. 3.2 LEC".into(), status: CitationStatus::Valid, severity: None, detectability: None });
    let gold = GoldStandard { facts: vec![], cases: vec!["art. 3 LEC".parse().unwrap(), "art. 4 LEC".parse().unwrap()] };
    assert_eq!(score_response(&l, &gold, 3, LabelSource::Machine).unwrap().coverage, Some(0.5));
}

#[test]
fn likert_out_of_range_is_rejected() {
    let mut l = labels(1, 0, 0, 0);
    l.likert = vec![4, 6];
    assert!(matches!(score_response(&l, &GoldStandard::default(), 3, LabelSource::Machine), Err(MetricsError::Likert { index: 1, value: 6, .. })));
    l.likert = vec![2, 3, 3, 5];
    assert_eq!(score_response(&l, &GoldStandard::default(), 3, LabelSource::Machine).unwrap().useful_at_k, Some(false));
    assert_eq!(score_response(&l, &GoldStandard::default(), 4, LabelSource::Machine).unwrap().useful_at_k, Some(true));
    assert!(matches!(score_response(&l, &GoldStandard::default(), 0, LabelSource::Machine), Err(MetricsError::ZeroK)));
}

fn cell(i: usize, condition: Condition) -> ExperimentCell {
    ExperimentCell::new(&format!("T{:02}", i % 8 + 1), "persona", condition, 0.1, Template::Neutral, i as u64)
}

fn scored(l: &ResponseLabels) -> ResponseScore {
    score_response(l, &GoldStandard::default(), 3, l.source).unwrap()
}

#[test]
fn single_response_group_has_undefined_se() {
    let s = scored(&labels(4, 1, 0, 0));
    let r = aggregate(&[(cell(0, Condition::Direct), s)], &[GroupKey::Condition], 3).unwrap();
    assert_eq!(r.groups.len(), 1);
    assert_eq!(r.groups[0].fcr.mean, Some(0.25));
    assert_eq!(r.groups[0].fcr.se, None);
    assert_eq!(r.groups[0].ffr.excluded, 1);
    assert!(r.pair_tests.is_empty());
}

#[test]
fn separated_groups_are_flagged() {
    let mut scores = Vec::new();
    for i in 0..5 {
        scores.push((cell(i, Condition::Direct), scored(&labels(10, 5 + i, 0, 0))));
        scores.push((cell(i, Condition::AdvancedRag), scored(&labels(10, i % 2, 0, 0))));
    }
    let r = aggregate(&scores, &[GroupKey::Condition], 3).unwrap();
    let t = r.pair_tests.iter().find(|t| t.metric == "fcr").unwrap();
    // 2 of the C(10, 5) = 252 splits are this extreme
    assert!((t.p - 2.0 / 252.0).abs() < 1e-12);
    assert_eq!(t.u_a, 25.0);
}

#[test]
fn planted_group_rates_are_recovered() {
    let mut rng = seeded(9);
    let planted = [(Condition::Direct, 0.30), (Condition::CanonicalRag, 0.08), (Condition::AdvancedRag, 0.001)];
    let mut scores = Vec::new();
    for (ci, (c, rate)) in planted.iter().enumerate() {
        for i in 0..10 {
            let n = rng.random_range(40..=80);
            let n_false = (rate * n as f64).round() as usize;
            let mut l = labels(n, n_false, n, n_false);
            l.citations.shuffle(&mut rng);
            l.record_id = format!("rec-{ci}-{i}");
            scores.push((cell(i, *c), scored(&l)));
        }
    }
    assert_eq!(scores.len(), 30);
    let r = aggregate(&scores, &[GroupKey::Condition], 3).unwrap();
    for (c, rate) in planted {
        let g = r.groups.iter().find(|g| g.key["condition"] == c.as_str()).unwrap();
        assert!((g.fcr.mean.unwrap() - rate).abs() <= 0.02, "{c}: {:?}", g.fcr.mean);
        assert!((g.ffr.mean.unwrap() - rate).abs() <= 0.02, "{c}: {:?}", g.ffr.mean);
    }
}

#[test]
fn report_labels_follow_the_source() {
    let m = scored(&labels(2, 1, 0, 0));
    let mut hl = labels(2, 1, 0, 0);
    hl.source = LabelSource::Human;
    let h = score_response(&hl, &GoldStandard::default(), 3, LabelSource::Human).unwrap();
    let rm = aggregate(&[(cell(0, Condition::Direct), m.clone())], &[GroupKey::Condition], 3).unwrap();
    let rh = aggregate(&[(cell(0, Condition::Direct), h.clone())], &[GroupKey::Condition], 3).unwrap();
    assert_eq!(rm.label, "machine-estimated");
    assert_eq!(rh.label, "human-arbitrated");
    assert!(render_text(&rm).contains("machine-estimated"));
    assert!(render_text(&rh).contains("human-arbitrated"));
    assert!(matches!(aggregate(&[(cell(0, Condition::Direct), m), (cell(1, Condition::Direct), h)], &[], 3), Err(MetricsError::MixedSources { .. })));
    assert!(matches!(aggregate(&[], &[], 3), Err(MetricsError::Empty)));
}

#[test]
fn taxonomy_shares_sum_to_one_per_family() {
    let mut rng = seeded(5);
    let scores: Vec<(ExperimentCell, ResponseScore)> = (0..40)
        .map(|i| {
            let case = random_case(&mut rng, i);
            (cell(i, Condition::ALL[i % 3]), score_response(&case.labels, &case.gold, 3, LabelSource::Machine).unwrap())
        })
        .collect();
    let r = aggregate(&scores, &[GroupKey::Condition, GroupKey::Template], 3).unwrap();
    for g in &r.groups {
        for t in [&g.citation_taxonomy, &g.fact_taxonomy] {
            if !t.counts.is_empty() {
                assert!((t.shares.values().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert!(!g.citation_taxonomy.counts.contains_key("valid"));
    }
    let csv = scores_csv(&scores).unwrap();
    assert_eq!(csv.lines().count(), 41);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn rates_stay_in_unit_interval(seed in any::<u64>()) {
        let mut rng = seeded(seed);
        let case = random_case(&mut rng, 0);
        let s = score_response(&case.labels, &case.gold, case.k, LabelSource::Machine).unwrap();
        for v in [s.fcr, s.ffr, s.coverage].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(s.n_false_citations <= s.n_total_citations);
    }

    #[test]
    fn group_stats_merge_to_the_pooled_stats(seed in any::<u64>(), n in 2usize..40) {
        let mut rng = seeded(seed);
        let scores: Vec<(ExperimentCell, ResponseScore)> = (0..n)
            .map(|i| {
                let case = random_case(&mut rng, i);
                (cell(i, Condition::ALL[rng.random_range(0..3)]), score_response(&case.labels, &case.gold, 3, LabelSource::Machine).unwrap())
            })
            .collect();
        let split = aggregate(&scores, &[GroupKey::Condition], 3).unwrap();
        let pooled = aggregate(&scores, &[], 3).unwrap();
        prop_assert_eq!(pooled.groups.len(), 1);
        let merged = split.groups.iter().fold(SufficientStats::default(), |acc, g| acc.merge(&g.fcr.stats));
        let whole = &pooled.groups[0].fcr;
        prop_assert_eq!(merged.n, whole.stats.n);
        prop_assert!((merged.sum - whole.stats.sum).abs() < 1e-9);
        prop_assert!((merged.sum_sq - whole.stats.sum_sq).abs() < 1e-9);
        prop_assert_eq!(split.groups.iter().map(|g| g.fcr.excluded).sum::<usize>(), whole.excluded);
    }
}
