use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::chunking::{chunk_recursive, chunk_semantic, Chunk, ChunkingStrategy};
use super::embed::{Embedder, Facet, FacetConfig};
use super::index::{Bm25Params, CitationGraph, DenseIndex, EdgeLabel, NodeKind, SparseIndex};
use super::{doc_map, CorpusError, SourceDocument};
use crate::backend::CompletionBackend;
use crate::citation::{parse_citations, CitationKey};

pub const BUNDLE_MAGIC: &[u8; 17] = b"ARCHIVIST-BUNDLE\0";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildConfig {
    #[serde(default)]
    pub chunking: ChunkingStrategy,
    #[serde(default)]
    pub facets: FacetConfig,
    #[serde(default)]
    pub bm25: Bm25Params,
    /// Reference date for temporal validity checks.
    #[serde(default)]
    pub snapshot_date: Option<NaiveDate>,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            chunking: ChunkingStrategy::default(),
            facets: FacetConfig::default(),
            bm25: Bm25Params::default(),
            snapshot_date: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub version: u32,
    pub embedder: String,
    pub dim: usize,
    pub config: BuildConfig,
    pub doc_count: usize,
    pub chunk_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexBundle {
    pub meta: BundleMeta,
    pub docs: BTreeMap<String, SourceDocument>,
    pub chunks: BTreeMap<String, Chunk>,
    pub dense: DenseIndex,
    pub sparse: SparseIndex,
    pub graph: CitationGraph,
}

fn facet_prompt(facet: Facet, text: &str) -> String {
    match facet {
        Facet::FullText => text.to_string(),
        Facet::Summary => format!("Resume en una sola frase el siguiente fragmento.\n\n{text}"),
        Facet::Entities => {
            format!("Enumera, separadas por comas, las personas, órganos y normas que aparecen en el fragmento.\n\n{text}")
        }
        Facet::Hyde(n) => format!("Formula la pregunta número {n} que este fragmento respondería.\n\n{text}"),
    }
}

fn facet_texts(
    chunk: &Chunk,
    facets: &FacetConfig,
    backend: Option<&dyn CompletionBackend>,
) -> Result<Vec<(Facet, String)>, CorpusError> {
    let extractive = facets.extractive(&chunk.text);
    let Some(b) = backend else { return Ok(extractive) };
    let mut wanted = vec![Facet::FullText];
    if facets.summary {
        wanted.push(Facet::Summary);
    }
    if facets.entities {
        wanted.push(Facet::Entities);
    }
    wanted.extend((1..=facets.hyde_questions).map(Facet::Hyde));
    let mut out = Vec::new();
    for f in wanted {
        let text = if f == Facet::FullText { chunk.text.clone() } else { b.generate(&facet_prompt(f, &chunk.text), 0.0, 0)? };
        if !text.trim().is_empty() {
            out.push((f, text));
        }
    }
    Ok(out)
}

/// Chunks and embeds every document and builds the sparse index and the
/// citation graph. `facet_backend`, when given, writes the summary, entity
/// and hypothetical-question texts; otherwise they are extracted.
pub fn build_indexes(
    docs: &[SourceDocument],
    embedder: &dyn Embedder,
    config: &BuildConfig,
    facet_backend: Option<&dyn CompletionBackend>,
) -> Result<IndexBundle, CorpusError> {
    if docs.is_empty() {
        return Err(CorpusError::Empty("no documents".into()));
    }
    let docs = doc_map(docs)?;
    let mut chunks = BTreeMap::new();
    for d in docs.values() {
        let cs = match config.chunking {
            ChunkingStrategy::Recursive { max_chars, overlap } => chunk_recursive(d, max_chars, overlap)?,
            ChunkingStrategy::Semantic { threshold } => chunk_semantic(d, embedder, threshold)?,
        };
        for c in cs {
            chunks.insert(c.chunk_id.clone(), c);
        }
    }

    let dim = embedder.dim();
    let mut dense = DenseIndex::new(dim);
    for c in chunks.values() {
        for (facet, text) in facet_texts(c, &config.facets, facet_backend)? {
            let v = embedder.embed(&text)?;
            if v.len() != dim {
                return Err(CorpusError::DimensionMismatch { embedder: embedder.id(), expected: dim, got: v.len() });
            }
            dense.insert(&c.chunk_id, facet, v)?;
        }
    }
    let sparse = SparseIndex::build(chunks.values().map(|c| (c.chunk_id.as_str(), c.text.as_str())), config.bm25);
    let graph = build_graph(&docs)?;
    Ok(IndexBundle {
        meta: BundleMeta {
            version: BUNDLE_VERSION,
            embedder: embedder.id(),
            dim,
            config: config.clone(),
            doc_count: docs.len(),
            chunk_count: chunks.len(),
        },
        docs,
        chunks,
        dense,
        sparse,
        graph,
    })
}

fn node_of(d: &SourceDocument) -> String {
    match &d.citation_key {
        Some(k) => k.normalized(),
        None => CitationGraph::doc_node_id(&d.doc_id),
    }
}

fn build_graph(docs: &BTreeMap<String, SourceDocument>) -> Result<CitationGraph, CorpusError> {
    let mut g = CitationGraph::default();
    for d in docs.values() {
        let kind = if d.citation_key.is_some() { NodeKind::Citation } else { NodeKind::Document };
        g.add_node(&node_of(d), kind, d.citation_key.clone(), Some(&d.doc_id));
    }
    for d in docs.values() {
        let from = node_of(d);
        for cited in parse_citations(&d.text) {
            if let Some(to) = g.resolve(&cited) {
                g.add_edge(&from, EdgeLabel::Cites, &to)?;
            }
        }
        for target in &d.metadata.interprets {
            match target.parse::<CitationKey>() {
                Ok(k) => match g.resolve(&k) {
                    Some(to) => g.add_edge(&from, EdgeLabel::Interprets, &to)?,
                    None => tracing::debug!(doc = %d.doc_id, target = %target, "interpreted source not in corpus"),
                },
                Err(_) => {
                    let id = CitationGraph::concept_id(target);
                    g.add_node(&id, NodeKind::Concept, None, None);
                    g.add_edge(&from, EdgeLabel::Interprets, &id)?;
                }
            }
        }
        for target in &d.metadata.repeals {
            match target.parse::<CitationKey>().ok().and_then(|k| g.resolve(&k)) {
                Some(to) => g.add_edge(&from, EdgeLabel::Repeals, &to)?,
                None => tracing::debug!(doc = %d.doc_id, target = %target, "repealed source not in corpus"),
            }
        }
    }
    Ok(g)
}

impl IndexBundle {
    pub fn chunk(&self, id: &str) -> Option<&Chunk> {
        self.chunks.get(id)
    }

    pub fn doc(&self, id: &str) -> Option<&SourceDocument> {
        self.docs.get(id)
    }

    pub fn chunks_of(&self, doc_id: &str) -> impl Iterator<Item = &Chunk> {
        let prefix = format!("{doc_id}#");
        self.chunks.range(prefix.clone()..).take_while(move |(k, _)| k.starts_with(&prefix)).map(|(_, c)| c)
    }

    /// Chunks of the documents a graph node stands for.
    pub fn chunks_of_node(&self, node: &str) -> Vec<&Chunk> {
        self.graph
            .nodes
            .get(node)
            .map(|n| n.docs.iter().flat_map(|d| self.chunks_of(d)).collect())
            .unwrap_or_default()
    }

    pub fn snapshot_date(&self) -> Option<NaiveDate> {
        self.meta.config.snapshot_date
    }

    /// Every id held by any structure resolves in the chunk or doc store.
    pub fn check_integrity(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::Bundle(m));
        for c in self.chunks.values() {
            if !self.docs.contains_key(&c.doc_id) {
                return bad(format!("chunk {} names unknown doc {}", c.chunk_id, c.doc_id));
            }
        }
        for id in self.dense.chunk_ids() {
            if !self.chunks.contains_key(id) {
                return bad(format!("dense row for unknown chunk {id}"));
            }
        }
        let sparse_ids: BTreeSet<&String> = self.sparse.postings.values().flatten().map(|p| &p.chunk_id).collect();
        for id in sparse_ids.into_iter().chain(self.sparse.doc_lengths.keys()) {
            if !self.chunks.contains_key(id) {
                return bad(format!("posting for unknown chunk {id}"));
            }
        }
        for (id, n) in &self.graph.nodes {
            for d in &n.docs {
                if !self.docs.contains_key(d) {
                    return bad(format!("graph node {id} names unknown doc {d}"));
                }
            }
        }
        for e in &self.graph.edges {
            if !self.graph.nodes.contains_key(&e.from) || !self.graph.nodes.contains_key(&e.to) {
                return bad(format!("dangling edge {} -> {}", e.from, e.to));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = BUNDLE_MAGIC.to_vec();
        out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        out.extend(serde_json::to_vec(self).expect("bundle serializes"));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CorpusError> {
        let header = BUNDLE_MAGIC.len() + 4;
        if bytes.len() < header || &bytes[..BUNDLE_MAGIC.len()] != BUNDLE_MAGIC {
            return Err(CorpusError::Bundle("not an index bundle (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[BUNDLE_MAGIC.len()..header].try_into().unwrap());
        if version != BUNDLE_VERSION {
            return Err(CorpusError::Bundle(format!("unsupported bundle version {version}")));
        }
        let b: IndexBundle = serde_json::from_slice(&bytes[header..]).map_err(|e| CorpusError::Bundle(e.to_string()))?;
        b.check_integrity()?;
        Ok(b)
    }

    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let bytes = std::fs::read(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }
}
