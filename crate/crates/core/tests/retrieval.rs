use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use archivist_core::corpus::{
    build_indexes, cosine, BuildConfig, ChunkingStrategy, DocKind, DocMetadata, Embedder, FacetConfig, HashEmbedder,
    IndexBundle, SourceDocument,
};
use archivist_core::retrieval::{
    compress_context, plan_query, rerank, retrieve_hybrid, rrf_fuse, top_fused, Engine, HybridParams, LexicalOverlapScorer,
    Lexicon, RankedContext, RerankScorer, RetrievalCandidate, RetrievalError, ScorerError,
};
use archivist_core::text;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bundle(bodies: &[&str]) -> IndexBundle {
    let docs: Vec<SourceDocument> = bodies
        .iter()
        .enumerate()
        .map(|(i, b)| SourceDocument {
            doc_id: format!("d{i:02}"),
            kind: DocKind::Doctrine,
            citation_key: None,
            text: b.to_string(),
            metadata: DocMetadata::default(),
        })
        .collect();
    let cfg = BuildConfig {
        chunking: ChunkingStrategy::Recursive { max_chars: 4000, overlap: 0 },
        facets: FacetConfig::full_text_only(),
        ..Default::default()
    };
    build_indexes(&docs, &HashEmbedder::new(256), &cfg, None).unwrap()
}

fn cand(id: &str, ranks: &[(Engine, usize)]) -> RetrievalCandidate {
    RetrievalCandidate { chunk_id: id.into(), ranks: ranks.iter().copied().collect(), fused_score: 0.0 }
}

const ENGINES: [Engine; 3] = [Engine::Dense, Engine::Sparse, Engine::Graph];

/// Random profile: each engine ranks a random subset of the candidates.
fn random_profile(rng: &mut ChaCha8Rng, n: usize) -> Vec<RetrievalCandidate> {
    let mut cands: Vec<RetrievalCandidate> = (0..n).map(|i| cand(&format!("c{i:02}"), &[])).collect();
    for e in ENGINES {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let depth = rng.random_range(0..=n);
        for (r, &i) in order[..depth].iter().enumerate() {
            cands[i].ranks.insert(e, r + 1);
        }
    }
    cands
}

#[test]
fn rrf_matches_brute_force_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let cands = random_profile(&mut rng, 10);
        let k = rng.random_range(1.0..100.0);
        let want: BTreeMap<String, f64> = cands
            .iter()
            .map(|c| {
                let mut s = 0.0;
                for e in ENGINES {
                    if let Some(r) = c.ranks.get(&e) {
                        s += 1.0 / (k + *r as f64);
                    }
                }
                (c.chunk_id.clone(), s)
            })
            .collect();
        let fused = rrf_fuse(cands, k).unwrap();
        for c in &fused {
            assert!((c.fused_score - want[&c.chunk_id]).abs() <= 1e-12);
        }
        for w in fused.windows(2) {
            assert!(w[0].fused_score > w[1].fused_score || (w[0].fused_score == w[1].fused_score && w[0].chunk_id < w[1].chunk_id));
        }
    }
}

#[test]
fn rrf_two_first_places() {
    let f = rrf_fuse(vec![cand("a", &[(Engine::Dense, 1), (Engine::Sparse, 1)])], 60.0).unwrap();
    assert!((f[0].fused_score - 2.0 / 61.0).abs() < 1e-12);
    assert!((f[0].fused_score - 0.032787).abs() < 1e-6);
}

proptest! {
    #[test]
    fn rrf_single_engine_keeps_engine_order(seed in any::<u64>(), n in 1usize..30, k in 0.5f64..200.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let cands: Vec<RetrievalCandidate> =
            order.iter().enumerate().map(|(r, &i)| cand(&format!("c{i:02}"), &[(Engine::Sparse, r + 1)])).collect();
        let fused = rrf_fuse(cands, k).unwrap();
        let got: Vec<String> = fused.iter().map(|c| c.chunk_id.clone()).collect();
        let want: Vec<String> = order.iter().map(|i| format!("c{i:02}")).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn rrf_formula_on_random_profiles(seed in any::<u64>(), n in 1usize..40, k in 0.5f64..200.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cands = random_profile(&mut rng, n);
        let expect: BTreeMap<String, f64> =
            cands.iter().map(|c| (c.chunk_id.clone(), c.ranks.values().map(|r| 1.0 / (k + *r as f64)).sum())).collect();
        for c in rrf_fuse(cands, k).unwrap() {
            prop_assert!((c.fused_score - expect[&c.chunk_id]).abs() <= 1e-12);
        }
    }
}

#[test]
fn rrf_rejects_nonpositive_k() {
    assert!(matches!(rrf_fuse(vec![], 0.0), Err(RetrievalError::Params(_))));
    assert!(rrf_fuse(vec![], -1.0).is_err());
}

#[test]
fn singleton_corpus_ranks_first_everywhere_it_matches() {
    let b = bundle(&["El plazo de apelación es de veinte días."]);
    let plan = plan_query("plazo de apelación", None, &Lexicon::default());
    let c = retrieve_hybrid(&plan, &b, &HashEmbedder::new(256), &HybridParams::default()).unwrap();
    assert_eq!(c.len(), 1);
    assert_eq!(c[0].ranks.get(&Engine::Dense), Some(&1));
    assert_eq!(c[0].ranks.get(&Engine::Sparse), Some(&1));
    assert_eq!(c[0].ranks.get(&Engine::Graph), None);
}

#[test]
fn unknown_citation_leaves_graph_silent() {
    let b = bundle(&["El plazo de apelación es de veinte días.", "La casación exige interés casacional."]);
    let lex = Lexicon::default();
    let with = retrieve_hybrid(&plan_query("plazo de apelación según la STS 999/2025", None, &lex), &b, &HashEmbedder::new(256), &HybridParams::default()).unwrap();
    assert!(with.iter().all(|c| !c.ranks.contains_key(&Engine::Graph)));
    assert!(with.iter().any(|c| c.ranks.contains_key(&Engine::Sparse)));
}

const TEN: [&str; 10] = [
    "El plazo para interponer recurso de apelación es de veinte días hábiles.",
    "La casación exige acreditar interés casacional ante el Tribunal Supremo.",
    "El arrendador puede resolver el contrato por impago de la renta.",
    "La prescripción de la acción de responsabilidad extracontractual es de un año.",
    "Los daños morales requieren prueba de su existencia y cuantía.",
    "El recurso de reposición procede contra diligencias de ordenación.",
    "La nulidad del contrato exige vicio del consentimiento acreditado.",
    "El plazo de prescripción se interrumpe por reclamación extrajudicial.",
    "La prueba testifical se valora conforme a las reglas de la sana crítica.",
    "El tribunal de apelación revisa los hechos y el derecho aplicado.",
];

#[test]
fn hybrid_engine_ranks_match_independent_searches() {
    let b = bundle(&TEN);
    let e = HashEmbedder::new(256);
    let k = 5;
    let query = "plazo del recurso de apelación";
    let plan = plan_query(query, None, &Lexicon::default());
    assert_eq!(plan.sub_queries.len(), 1);
    let cands = retrieve_hybrid(&plan, &b, &e, &HybridParams { k_per_engine: k, graph_depth: 1 }).unwrap();
    let mut got: BTreeMap<Engine, Vec<(usize, String)>> = BTreeMap::new();
    for c in &cands {
        for (eng, r) in &c.ranks {
            got.entry(*eng).or_default().push((*r, c.chunk_id.clone()));
        }
    }
    for v in got.values_mut() {
        v.sort();
    }

    let qv = e.embed(query).unwrap();
    let mut dense: Vec<(String, f64)> = b.chunks.values().map(|c| (c.chunk_id.clone(), cosine(&qv, &e.embed(&c.text).unwrap()))).collect();
    dense.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let want_dense: Vec<String> = dense.into_iter().take(k).map(|x| x.0).collect();
    assert_eq!(got[&Engine::Dense].iter().map(|x| x.1.clone()).collect::<Vec<_>>(), want_dense);

    let q_terms: Vec<String> = {
        let mut t = text::tokenize(query);
        t.sort();
        t.dedup();
        t
    };
    let toks: BTreeMap<String, Vec<String>> = b.chunks.values().map(|c| (c.chunk_id.clone(), text::tokenize(&c.text))).collect();
    let n = toks.len() as f64;
    let avg = toks.values().map(Vec::len).sum::<usize>() as f64 / n;
    let mut sparse: Vec<(String, f64)> = toks
        .iter()
        .map(|(id, t)| {
            let s: f64 = q_terms
                .iter()
                .map(|q| {
                    let tf = t.iter().filter(|x| *x == q).count() as f64;
                    let df = toks.values().filter(|v| v.contains(q)).count() as f64;
                    if tf == 0.0 {
                        return 0.0;
                    }
                    (1.0 + (n - df + 0.5) / (df + 0.5)).ln() * tf * 2.2 / (tf + 1.2 * (0.25 + 0.75 * t.len() as f64 / avg))
                })
                .sum();
            (id.clone(), s)
        })
        .filter(|x| x.1 > 0.0)
        .collect();
    sparse.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let want_sparse: Vec<String> = sparse.into_iter().take(k).map(|x| x.0).collect();
    assert_eq!(got[&Engine::Sparse].iter().map(|x| x.1.clone()).collect::<Vec<_>>(), want_sparse);
    for v in got.values() {
        assert_eq!(v.iter().map(|x| x.0).collect::<Vec<_>>(), (1..=v.len()).collect::<Vec<_>>());
    }
}

struct Constant;
impl RerankScorer for Constant {
    fn id(&self) -> String {
        "constant".into()
    }
    fn score(&self, _q: &str, _t: &str) -> Result<f64, ScorerError> {
        Ok(0.5)
    }
}

struct Counting(AtomicUsize);
impl RerankScorer for Counting {
    fn id(&self) -> String {
        "counting".into()
    }
    fn score(&self, _q: &str, t: &str) -> Result<f64, ScorerError> {
        self.0.fetch_add(1, Ordering::SeqCst);
        Ok(t.len() as f64)
    }
}

fn fused_all(b: &IndexBundle) -> Vec<RetrievalCandidate> {
    let ids: Vec<String> = b.chunks.keys().cloned().collect();
    let cands = ids.iter().enumerate().map(|(i, id)| cand(id, &[(Engine::Dense, ids.len() - i)])).collect();
    rrf_fuse(cands, 60.0).unwrap()
}

#[test]
fn constant_scorer_keeps_fused_order() {
    let b = bundle(&TEN);
    let fused = fused_all(&b);
    let r = rerank("q", &fused, &b, &Constant, 20, 5).unwrap();
    let want: Vec<String> = fused.iter().take(5).map(|c| c.chunk_id.clone()).collect();
    assert_eq!(r.chunk_ids(), want);
}

#[test]
fn lexical_rerank_matches_hand_scores() {
    // query content terms: plazo, recurso, apelación
    let six = [
        "El plazo del recurso de apelación vence hoy.",   // 3/3
        "El recurso fue desestimado.",                    // 1/3
        "La apelación se presentó dentro de plazo.",      // 2/3
        "Se condena en costas a la demandada.",           // 0
        "El plazo de apelación es improrrogable.",        // 2/3
        "Un recurso de apelación bien fundado.",          // 2/3
    ];
    let b = bundle(&six);
    // fused order d05, d04, ..., d00 so ties among the 2/3 go to the later docs
    let fused = fused_all(&b);
    assert_eq!(fused[0].chunk_id, "d05#000");
    let r = rerank("plazo del recurso de apelación", &fused, &b, &LexicalOverlapScorer, 6, 6).unwrap();
    let order: Vec<&str> = r.entries.iter().map(|e| &e.chunk_id[..3]).collect();
    assert_eq!(order, ["d00", "d05", "d04", "d02", "d01", "d03"]);
    let scores: Vec<f64> = r.entries.iter().map(|e| e.score).collect();
    let want = [1.0, 2.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 1.0 / 3.0, 0.0];
    assert!(scores.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12), "{scores:?}");
}

#[test]
fn rerank_saturates_on_few_candidates() {
    let b = bundle(&TEN[..7]);
    let fused = fused_all(&b);
    let s = Counting(AtomicUsize::new(0));
    let r = rerank("q", &fused, &b, &s, 20, 5).unwrap();
    assert_eq!(s.0.load(Ordering::SeqCst), 7);
    assert_eq!(r.entries.len(), 5);
    assert!(rerank("q", &fused, &b, &s, 3, 5).is_err());
}

fn two_chunk_context() -> (IndexBundle, RankedContext) {
    let b = bundle(&[
        "El plazo de apelación es breve. Llovió en Madrid ayer. El recurso se interpone por escrito.",
        "La sentencia fue apelada en plazo. El juez vestía toga negra. El recurso de apelación prosperó.",
    ]);
    let ctx = top_fused(&fused_all(&b), &b, 2).unwrap();
    (b, ctx)
}

#[test]
fn compression_under_budget_is_identity() {
    let (_, ctx) = two_chunk_context();
    let out = compress_context("plazo recurso apelación", &ctx, &LexicalOverlapScorer, ctx.chars_used).unwrap();
    assert_eq!(out, ctx);
}

#[test]
fn compression_drops_the_two_least_relevant_sentences() {
    let (_, ctx) = two_chunk_context();
    let q = "plazo recurso apelación";
    // independent scoring of every sentence
    let mut all: Vec<(f64, usize, usize, String)> = Vec::new();
    for (i, e) in ctx.entries.iter().enumerate() {
        for (j, s) in text::sentences(&e.text).into_iter().enumerate() {
            all.push((text::overlap_ratio(q, s), i, j, s.to_string()));
        }
    }
    assert_eq!(all.len(), 6);
    let mut by_score = all.clone();
    by_score.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
    let dropped: Vec<(usize, usize)> = by_score[..2].iter().map(|x| (x.1, x.2)).collect();
    let kept_len = |skip: usize| -> usize {
        let mut per: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for x in &all {
            if !by_score[..skip].iter().any(|d| (d.1, d.2) == (x.1, x.2)) {
                per.entry(x.1).or_default().push(x.3.chars().count());
            }
        }
        per.values().map(|v| v.iter().sum::<usize>() + v.len() - 1).sum()
    };
    // a budget that one removal cannot meet but two can
    let budget = kept_len(2);
    assert!(kept_len(1) > budget);
    let out = compress_context(q, &ctx, &LexicalOverlapScorer, budget).unwrap();
    for (i, e) in ctx.entries.iter().enumerate() {
        let want: Vec<&str> =
            all.iter().filter(|x| x.1 == i && !dropped.contains(&(x.1, x.2))).map(|x| x.3.as_str()).collect();
        let got = out.entries.iter().find(|o| o.chunk_id == e.chunk_id).unwrap();
        assert_eq!(got.text, want.join(" "));
    }
    assert!(out.chars_used <= budget);
}

#[test]
fn compression_budget_below_shortest_sentence_fails() {
    let (_, ctx) = two_chunk_context();
    let err = compress_context("q", &ctx, &LexicalOverlapScorer, 10).unwrap_err();
    assert!(matches!(err, RetrievalError::BudgetInfeasible { .. }));
    assert!(err.to_string().contains("budget infeasible"), "{err}");
}

#[test]
fn graph_engine_follows_citations_in_the_corpus() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/sample/corpus");
    let corpus = archivist_core::corpus::load_corpus(&root).unwrap();
    let b = build_indexes(&corpus.docs, &HashEmbedder::new(256), &BuildConfig::default(), None).unwrap();
    let cited = corpus.docs.iter().find_map(|d| d.citation_key.clone()).unwrap();
    let q = format!("¿Qué dice {}?", cited.normalized());
    let cands = retrieve_hybrid(&plan_query(&q, None, &Lexicon::default()), &b, &HashEmbedder::new(256), &HybridParams::default()).unwrap();
    let top_graph = cands.iter().find(|c| c.ranks.get(&Engine::Graph) == Some(&1)).expect("graph hit");
    assert_eq!(b.chunk(&top_graph.chunk_id).unwrap().doc_id, corpus.docs.iter().find(|d| d.citation_key.as_ref() == Some(&cited)).unwrap().doc_id);
}
