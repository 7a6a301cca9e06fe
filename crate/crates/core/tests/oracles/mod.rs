//! Second implementations used as test oracles. Written without calling
//! the code under test.
#![allow(dead_code)]

use std::collections::BTreeSet;

pub mod sample;

use archivist_core::corpus::{Bm25Params, DenseIndex, Facet, SparseIndex};
use archivist_core::dataset::GoldStandard;
use archivist_core::metrics::{CitationLabel, FactLabel, LabelSource, ResponseLabels};
use archivist_core::retrieval::{rrf_fuse, Engine, RetrievalCandidate};
use archivist_core::verification::{CitationStatus, FactStatus};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---- statistics --------------------------------------------------------

/// Kappa from an explicit confusion matrix.
pub fn kappa(a: &[u8], b: &[u8]) -> f64 {
    let cats: Vec<u8> = {
        let mut c: Vec<u8> = a.iter().chain(b).copied().collect();
        c.sort();
        c.dedup();
        c
    };
    let m = cats.len();
    let pos = |x: u8| cats.iter().position(|&c| c == x).unwrap();
    let mut table = vec![vec![0f64; m]; m];
    for (x, y) in a.iter().zip(b) {
        table[pos(*x)][pos(*y)] += 1.0;
    }
    let n = a.len() as f64;
    let po = (0..m).map(|i| table[i][i]).sum::<f64>() / n;
    let pe: f64 = (0..m)
        .map(|i| {
            let row: f64 = table[i].iter().sum();
            let col: f64 = (0..m).map(|j| table[j][i]).sum();
            row / n * (col / n)
        })
        .sum();
    if (1.0 - pe).abs() < 1e-15 {
        1.0
    } else {
        (po - pe) / (1.0 - pe)
    }
}

/// Midrank of each value by counting smaller and equal values.
pub fn midranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&w| w < v).count() as f64;
            let equal = x.iter().filter(|&&w| w == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    sxy / (sxx * syy).sqrt()
}

/// Rank both samples, then Pearson on the ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&midranks(x), &midranks(y))
}

/// U of `a` by pairwise comparison.
pub fn u_pairwise(a: &[f64], b: &[f64]) -> f64 {
    let mut u = 0.0;
    for x in a {
        for y in b {
            if x > y {
                u += 1.0;
            } else if x == y {
                u += 0.5;
            }
        }
    }
    u
}

/// Exact two-sided p by enumerating every way to draw |a| of the pooled
/// values as group a.
pub fn mwu_exact(a: &[f64], b: &[f64]) -> (f64, f64) {
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    let na = a.len();
    let observed = u_pairwise(a, b);
    let (mut le, mut ge, mut total) = (0u64, 0u64, 0u64);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != na {
            continue;
        }
        let (ga, gb): (Vec<f64>, Vec<f64>) = {
            let mut ga = Vec::new();
            let mut gb = Vec::new();
            for (i, v) in pooled.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    ga.push(*v);
                } else {
                    gb.push(*v);
                }
            }
            (ga, gb)
        };
        let u = u_pairwise(&ga, &gb);
        total += 1;
        if u <= observed + 1e-9 {
            le += 1;
        }
        if u >= observed - 1e-9 {
            ge += 1;
        }
    }
    (observed, (2.0 * le.min(ge) as f64 / total as f64).min(1.0))
}

/// Values on a coarse grid so that ties are common.
pub fn tied_sample(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0..6) as f64 / 2.0).collect()
}

// ---- retrieval ----------------------------------------------------------

fn dot(a: &[f32], b: &[f32]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    num / (na * nb)
}

pub fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| (x / n) as f32).collect()
}

pub const WORDS: &[&str] = &[
    "plazo", "recurso", "apelacion", "casacion", "tribunal", "supremo", "doctrina", "prescripcion", "accion", "demanda",
    "contrato", "arrendamiento", "daños", "perjuicios", "prueba", "testigo", "sentencia", "auto", "fallo", "nulidad",
];

/// Dense search on `n` random vectors against a full sort.
pub fn knn_matches_exhaustive(seed: u64, n: usize, dim: usize, k: usize) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = DenseIndex::new(dim);
    let mut rows = Vec::new();
    for i in 0..n {
        let v = random_unit(&mut rng, dim);
        let id = format!("c{i:03}");
        idx.insert(&id, Facet::FullText, v.clone()).unwrap();
        rows.push((id, v));
    }
    let q = random_unit(&mut rng, dim);
    let mut all: Vec<(String, f64)> = rows.iter().map(|(id, v)| (id.clone(), dot(&q, v))).collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let got = idx.knn(&q, k).unwrap();
    got.len() == k.min(n) && got.iter().zip(&all).all(|(g, w)| g.0 == w.0 && (g.1 - w.1).abs() < 1e-9)
}

/// Sparse top-k over `n` random chunks against an exhaustive Okapi sum.
pub fn bm25_matches_exhaustive(seed: u64, n: usize, k: usize) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bodies: Vec<(String, Vec<&str>)> = (0..n)
        .map(|i| (format!("c{i:03}"), (0..rng.random_range(3..30)).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect()))
        .collect();
    let joined: Vec<(String, String)> = bodies.iter().map(|(id, w)| (id.clone(), w.join(" "))).collect();
    let idx = SparseIndex::build(joined.iter().map(|(a, b)| (a.as_str(), b.as_str())), Bm25Params::default());
    let q: Vec<String> = (0..rng.random_range(1..4)).map(|_| WORDS[rng.random_range(0..WORDS.len())].to_string()).collect();
    let qset: BTreeSet<&str> = q.iter().map(String::as_str).collect();
    let avg = bodies.iter().map(|b| b.1.len()).sum::<usize>() as f64 / n as f64;
    let (k1, b) = (1.2, 0.75);
    let mut all: Vec<(String, f64)> = Vec::new();
    for (id, words) in &bodies {
        let mut s = 0.0;
        for t in &qset {
            let tf = words.iter().filter(|w| *w == t).count() as f64;
            if tf == 0.0 {
                continue;
            }
            let df = bodies.iter().filter(|(_, w)| w.contains(t)).count() as f64;
            let idf = (1.0 + (n as f64 - df + 0.5) / (df + 0.5)).ln();
            s += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * words.len() as f64 / avg));
        }
        if s > 0.0 {
            all.push((id.clone(), s));
        }
    }
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    let got = idx.top_k(&q, k);
    got.len() == all.len() && got.iter().zip(&all).all(|(g, w)| g.0 == w.0 && (g.1 - w.1).abs() < 1e-9)
}

/// Fusion of a random rank profile (each engine ranks a random subset of
/// `n` candidates) against the reciprocal-rank sum written out.
pub fn rrf_matches_sum(seed: u64, n: usize) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let engines = [Engine::Dense, Engine::Sparse, Engine::Graph];
    let mut cands: Vec<RetrievalCandidate> = (0..n)
        .map(|i| RetrievalCandidate { chunk_id: format!("c{i:02}"), ranks: Default::default(), fused_score: 0.0 })
        .collect();
    let mut want = vec![0.0f64; n];
    let k = rng.random_range(1.0..100.0);
    for e in engines {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let depth = rng.random_range(0..=n);
        for (r, &i) in order[..depth].iter().enumerate() {
            cands[i].ranks.insert(e, r + 1);
            want[i] += 1.0 / (k + (r + 1) as f64);
        }
    }
    let fused = rrf_fuse(cands, k).unwrap();
    fused.len() == n
        && fused.iter().all(|c| (c.fused_score - want[c.chunk_id[1..].parse::<usize>().unwrap()]).abs() <= 1e-12)
        && fused.windows(2).all(|w| w[0].fused_score >= w[1].fused_score)
}

// ---- metrics -------------------------------------------------------------

/// Citation strings in canonical form, with and without subdivisions.
pub fn citation_pool() -> Vec<String> {
    let mut v = Vec::new();
    for n in 1..6 {
        for y in [2016, 2019] {
            v.push(format!("STS {n}/{y}"));
        }
    }
    for a in 1..5 {
        v.push(format!("art. {a} LEC"));
        for s in 1..3 {
            v.push(format!("art. {a}.{s} LEC"));
        }
    }
    v
}

fn whole(key: &str) -> String {
    // "art. 3.2 LEC" -> "art. 3 LEC"
    match key.strip_prefix("art. ") {
        Some(rest) => {
            let (num, tail) = rest.split_once(' ').unwrap();
            format!("art. {} {tail}", num.split('.').next().unwrap())
        }
        None => key.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expected {
    pub n_total: usize,
    pub n_false: usize,
    pub n_facts: usize,
    pub n_fabricated: usize,
    pub fcr: Option<f64>,
    pub ffr: Option<f64>,
    pub coverage: Option<f64>,
    pub useful: Option<bool>,
}

pub struct Case {
    pub labels: ResponseLabels,
    pub gold_keys: Vec<String>,
    pub gold: GoldStandard,
    pub k: usize,
}

pub fn random_case(rng: &mut ChaCha8Rng, id: usize) -> Case {
    let pool = citation_pool();
    let citations = (0..rng.random_range(0..15))
        .map(|_| CitationLabel {
            key: pool.choose(rng).unwrap().clone(),
            status: *CitationStatus::ALL.choose(rng).unwrap(),
            severity: None,
            detectability: None,
        })
        .collect();
    let facts = (0..rng.random_range(0..12))
        .map(|i| FactLabel { claim: format!("hecho {i}"), status: *FactStatus::ALL.choose(rng).unwrap() })
        .collect();
    let likert = (0..rng.random_range(0..6)).map(|_| rng.random_range(1..=5u8)).collect();
    let wholes: Vec<&String> = pool.iter().filter(|k| whole(k) == **k).collect();
    let mut gold_keys: Vec<String> = (0..rng.random_range(0..4)).map(|_| wholes.choose(rng).unwrap().to_string()).collect();
    gold_keys.sort();
    gold_keys.dedup();
    let gold = GoldStandard { facts: Vec::new(), cases: gold_keys.iter().map(|k| k.parse().unwrap()).collect() };
    Case {
        labels: ResponseLabels {
            record_id: format!("rec-{id}"),
            source: LabelSource::Machine,
            citations,
            facts,
            likert,
            review_minutes: None,
        },
        gold_keys,
        gold,
        k: rng.random_range(1..5),
    }
}

/// Counting by hand over the raw label lists.
pub fn brute_force(case: &Case) -> Expected {
    let mut keys: Vec<&str> = Vec::new();
    let mut n_false = 0;
    for c in &case.labels.citations {
        if keys.contains(&c.key.as_str()) {
            continue;
        }
        keys.push(&c.key);
        if c.status != CitationStatus::Valid {
            n_false += 1;
        }
    }
    let n_facts = case.labels.facts.len();
    let n_fab = case.labels.facts.iter().filter(|f| f.status != FactStatus::Supported).count();
    let coverage = if case.gold_keys.is_empty() {
        None
    } else {
        let hit = case.gold_keys.iter().filter(|g| keys.iter().any(|k| *k == g.as_str() || whole(k) == **g)).count();
        Some(hit as f64 / case.gold_keys.len() as f64)
    };
    let useful = if case.labels.likert.is_empty() {
        None
    } else {
        let mut any = false;
        for (i, v) in case.labels.likert.iter().enumerate() {
            if i < case.k && *v >= 4 {
                any = true;
            }
        }
        Some(any)
    };
    Expected {
        n_total: keys.len(),
        n_false,
        n_facts,
        n_fabricated: n_fab,
        fcr: if keys.is_empty() { None } else { Some(n_false as f64 / keys.len() as f64) },
        ffr: if n_facts == 0 { None } else { Some(n_fab as f64 / n_facts as f64) },
        coverage,
        useful,
    }
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Cohen's kappa targets: two raters who each copy a hidden truth with
/// probability `agree` and otherwise pick uniformly.
pub fn expected_kappa_binary(p_true: f64, copy: f64) -> f64 {
    // each rater reports the truth w.p. copy + (1-copy)/2
    let acc = copy + (1.0 - copy) / 2.0;
    let p_yes = p_true * acc + (1.0 - p_true) * (1.0 - acc);
    let po = acc * acc + (1.0 - acc) * (1.0 - acc);
    let pe = p_yes * p_yes + (1.0 - p_yes) * (1.0 - p_yes);
    (po - pe) / (1.0 - pe)
}

