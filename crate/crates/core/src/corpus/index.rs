use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::embed::{cosine, Facet};
use super::CorpusError;
use crate::citation::{self, CitationKey};
use crate::text;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub chunk_id: String,
    pub tf: u32,
}

/// Inverted index over chunk tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseIndex {
    pub params: Bm25Params,
    pub postings: BTreeMap<String, Vec<Posting>>,
    pub doc_lengths: BTreeMap<String, u32>,
    pub avg_len: f64,
}

impl SparseIndex {
    pub fn build<'a>(chunks: impl IntoIterator<Item = (&'a str, &'a str)>, params: Bm25Params) -> Self {
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = BTreeMap::new();
        for (id, body) in chunks {
            let tokens = text::tokenize(body);
            doc_lengths.insert(id.to_string(), tokens.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (term, n) in tf {
                postings.entry(term).or_default().push(Posting { chunk_id: id.to_string(), tf: n });
            }
        }
        for list in postings.values_mut() {
            list.sort_by(|a, b| a.chunk_id.cmp(&b.chunk_id));
        }
        let total: u64 = doc_lengths.values().map(|&l| l as u64).sum();
        let avg_len = if doc_lengths.is_empty() { 0.0 } else { total as f64 / doc_lengths.len() as f64 };
        SparseIndex { params, postings, doc_lengths, avg_len }
    }

    pub fn len(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_lengths.is_empty()
    }

    /// Okapi BM25 per chunk, with idf = ln(1 + (N - n + 0.5) / (n + 0.5)).
    /// Repeated query terms count once; chunks scoring zero are omitted.
    pub fn scores(&self, query_terms: &[String]) -> BTreeMap<String, f64> {
        let n_docs = self.doc_lengths.len() as f64;
        let Bm25Params { k1, b } = self.params;
        let mut out: BTreeMap<String, f64> = BTreeMap::new();
        let unique: BTreeSet<&String> = query_terms.iter().collect();
        for term in unique {
            let Some(list) = self.postings.get(term) else { continue };
            let df = list.len() as f64;
            let idf = (1.0 + (n_docs - df + 0.5) / (df + 0.5)).ln();
            for p in list {
                let dl = self.doc_lengths[&p.chunk_id] as f64;
                let tf = p.tf as f64;
                let norm = if self.avg_len > 0.0 { dl / self.avg_len } else { 1.0 };
                *out.entry(p.chunk_id.clone()).or_default() += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * norm));
            }
        }
        out.retain(|_, s| *s > 0.0);
        out
    }

    /// Highest scores first; ties by ascending chunk id.
    pub fn top_k(&self, query_terms: &[String], k: usize) -> Vec<(String, f64)> {
        let mut v: Vec<(String, f64)> = self.scores(query_terms).into_iter().collect();
        sort_scored(&mut v);
        v.truncate(k);
        v
    }
}

pub(crate) fn sort_scored(v: &mut [(String, f64)]) {
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseRow {
    pub chunk_id: String,
    pub facet: Facet,
    pub vector: Vec<f32>,
}

/// Exhaustive cosine index over facet vectors, rows sorted by
/// `(chunk_id, facet)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseIndex {
    pub dim: usize,
    pub rows: Vec<DenseRow>,
}

impl DenseIndex {
    pub fn new(dim: usize) -> Self {
        DenseIndex { dim, rows: Vec::new() }
    }

    pub fn insert(&mut self, chunk_id: &str, facet: Facet, vector: Vec<f32>) -> Result<(), CorpusError> {
        if vector.len() != self.dim {
            return Err(CorpusError::DimensionMismatch { embedder: "dense-index".into(), expected: self.dim, got: vector.len() });
        }
        let key = (chunk_id, facet);
        let pos = self.rows.partition_point(|r| (r.chunk_id.as_str(), r.facet) < key);
        let row = DenseRow { chunk_id: chunk_id.to_string(), facet, vector };
        if self.rows.get(pos).is_some_and(|r| (r.chunk_id.as_str(), r.facet) == key) {
            self.rows[pos] = row;
        } else {
            self.rows.insert(pos, row);
        }
        Ok(())
    }

    pub fn chunk_ids(&self) -> BTreeSet<&str> {
        self.rows.iter().map(|r| r.chunk_id.as_str()).collect()
    }

    /// Top `k` chunks by their best facet cosine, descending, ties by
    /// ascending chunk id.
    pub fn knn(&self, query: &[f32], k: usize) -> Result<Vec<(String, f64)>, CorpusError> {
        if self.rows.is_empty() {
            return Err(CorpusError::EmptyIndex);
        }
        if query.len() != self.dim {
            return Err(CorpusError::DimensionMismatch { embedder: "query".into(), expected: self.dim, got: query.len() });
        }
        let mut best: Vec<(String, f64)> = Vec::new();
        for r in &self.rows {
            let c = cosine(query, &r.vector);
            match best.last_mut() {
                Some(last) if last.0 == r.chunk_id => last.1 = last.1.max(c),
                _ => best.push((r.chunk_id.clone(), c)),
            }
        }
        sort_scored(&mut best);
        best.truncate(k);
        Ok(best)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeKind {
    Citation,
    Concept,
    /// A source without a citation key (doctrine).
    Document,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub kind: NodeKind,
    #[serde(default, with = "citation::as_string::opt", skip_serializing_if = "Option::is_none")]
    pub key: Option<CitationKey>,
    /// Documents this node stands for.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub docs: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeLabel {
    Cites,
    Interprets,
    Repeals,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GraphEdge {
    pub from: String,
    pub label: EdgeLabel,
    pub to: String,
}

/// Nodes are normalized citation keys, `concept:<label>` or `doc:<id>`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CitationGraph {
    pub nodes: BTreeMap<String, GraphNode>,
    pub edges: BTreeSet<GraphEdge>,
}

impl CitationGraph {
    pub fn concept_id(label: &str) -> String {
        format!("concept:{}", label.trim().to_lowercase())
    }

    pub fn doc_node_id(doc_id: &str) -> String {
        format!("doc:{doc_id}")
    }

    pub fn add_node(&mut self, id: &str, kind: NodeKind, key: Option<CitationKey>, doc: Option<&str>) {
        let node = self.nodes.entry(id.to_string()).or_insert(GraphNode { kind, key, docs: Vec::new() });
        if let Some(d) = doc {
            if !node.docs.iter().any(|x| x == d) {
                node.docs.push(d.to_string());
                node.docs.sort();
            }
        }
    }

    pub fn add_edge(&mut self, from: &str, label: EdgeLabel, to: &str) -> Result<(), CorpusError> {
        for n in [from, to] {
            if !self.nodes.contains_key(n) {
                return Err(CorpusError::UnknownNode(n.to_string()));
            }
        }
        if from != to {
            self.edges.insert(GraphEdge { from: from.into(), label, to: to.into() });
        }
        Ok(())
    }

    /// Node standing for `key`. Falls back to the whole article when a
    /// paragraph of it (`art. 24.2 CE`) has no node of its own.
    pub fn resolve(&self, key: &CitationKey) -> Option<String> {
        let exact = key.normalized();
        if self.nodes.contains_key(&exact) {
            return Some(exact);
        }
        let find = |k: &CitationKey| {
            self.nodes.iter().find(|(_, n)| n.key.as_ref().is_some_and(|nk| nk.same_reference(k))).map(|(id, _)| id.clone())
        };
        find(key).or_else(|| {
            key.subdivision.as_ref()?;
            let mut whole = key.clone();
            whole.subdivision = None;
            find(&whole)
        })
    }

    /// Breadth-first closure up to `depth`, following edges both ways, with
    /// the distance of each node reached. The start node is excluded.
    pub fn neighbors_with_distance(&self, start: &str, depth: usize) -> Result<BTreeMap<String, usize>, CorpusError> {
        if !self.nodes.contains_key(start) {
            return Err(CorpusError::UnknownNode(start.to_string()));
        }
        let mut adj: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
        for e in &self.edges {
            adj.entry(&e.from).or_default().insert(&e.to);
            adj.entry(&e.to).or_default().insert(&e.from);
        }
        let mut dist: BTreeMap<String, usize> = BTreeMap::new();
        let mut seen: BTreeSet<&str> = BTreeSet::from([start]);
        let mut queue = VecDeque::from([(start, 0usize)]);
        while let Some((n, d)) = queue.pop_front() {
            if d == depth {
                continue;
            }
            for &m in adj.get(n).into_iter().flatten() {
                if seen.insert(m) {
                    dist.insert(m.to_string(), d + 1);
                    queue.push_back((m, d + 1));
                }
            }
        }
        Ok(dist)
    }
}

/// Keys reachable from `key` within `depth` edges, in either direction.
pub fn graph_neighbors(graph: &CitationGraph, key: &CitationKey, depth: usize) -> Result<BTreeSet<String>, CorpusError> {
    let start = graph.resolve(key).ok_or_else(|| CorpusError::UnknownNode(key.normalized()))?;
    Ok(graph.neighbors_with_distance(&start, depth)?.into_keys().collect())
}
