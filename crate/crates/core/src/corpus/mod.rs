//! Source documents, chunking and the three retrieval structures.

mod bundle;
mod chunking;
mod embed;
mod index;

pub use bundle::{build_indexes, BuildConfig, BundleMeta, IndexBundle, BUNDLE_MAGIC, BUNDLE_VERSION};
pub use chunking::{chunk_recursive, chunk_semantic, Chunk, ChunkingStrategy};
pub use embed::{cosine, Embedder, EmbedError, Facet, FacetConfig, HashEmbedder, DEFAULT_DIM};
pub use index::{
    graph_neighbors, Bm25Params, CitationGraph, DenseIndex, EdgeLabel, GraphEdge, GraphNode, NodeKind, Posting,
    SparseIndex,
};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::citation::{self, CitationKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DocKind {
    Jurisprudence,
    Statute,
    Doctrine,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DocMetadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    /// Display name of the issuing court or code.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub court: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub number: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub year: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<NaiveDate>,
    #[serde(default)]
    pub repealed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeal_date: Option<NaiveDate>,
    /// Citation keys or concept labels this source interprets.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub interprets: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub repeals: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub doc_id: String,
    pub kind: DocKind,
    #[serde(default, with = "citation::as_string::opt", skip_serializing_if = "Option::is_none")]
    pub citation_key: Option<CitationKey>,
    pub text: String,
    #[serde(default)]
    pub metadata: DocMetadata,
}

impl SourceDocument {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |msg: String| Err(CorpusError::InvalidDocument { doc_id: self.doc_id.clone(), message: msg });
        if self.doc_id.trim().is_empty() {
            return bad("empty doc id".into());
        }
        if matches!(self.kind, DocKind::Jurisprudence | DocKind::Statute) && self.citation_key.is_none() {
            return bad(format!("{:?} document without a citation key", self.kind).to_lowercase());
        }
        if self.metadata.repealed != self.metadata.repeal_date.is_some() {
            return bad("repeal_date must be present exactly when repealed".into());
        }
        Ok(())
    }

    /// Whether the source was no longer in force on `at`. Without a
    /// reference date the repealed flag alone decides.
    pub fn repealed_at(&self, at: Option<NaiveDate>) -> bool {
        match (self.metadata.repealed, self.metadata.repeal_date, at) {
            (false, _, _) => false,
            (true, Some(d), Some(at)) => d <= at,
            (true, _, _) => true,
        }
    }

    /// Short label used in context blocks: the citation or the title.
    pub fn label(&self) -> String {
        match (&self.citation_key, &self.metadata.title) {
            (Some(k), _) => k.normalized(),
            (None, Some(t)) => t.clone(),
            (None, None) => self.doc_id.clone(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("document {doc_id}: {message}")]
    InvalidDocument { doc_id: String, message: String },
    #[error("empty corpus: {0}")]
    Empty(String),
    #[error("duplicate document id {0}")]
    DuplicateDoc(String),
    #[error("document {0} is empty")]
    EmptyDocument(String),
    #[error("invalid chunking parameters: {0}")]
    Chunking(String),
    #[error("embedder {embedder}: expected dimension {expected}, got {got}")]
    DimensionMismatch { embedder: String, expected: usize, got: usize },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("empty index")]
    EmptyIndex,
    #[error("unknown graph node {0}")]
    UnknownNode(String),
    #[error("bundle: {0}")]
    Bundle(String),
    #[error(transparent)]
    Backend(#[from] crate::backend::BackendError),
}

/// Sidecar file describing one document.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    kind: DocKind,
    #[serde(default)]
    citation: Option<String>,
    #[serde(default)]
    title: Option<String>,
    #[serde(default)]
    court: Option<String>,
    #[serde(default)]
    date: Option<NaiveDate>,
    #[serde(default)]
    repealed: bool,
    #[serde(default)]
    repeal_date: Option<NaiveDate>,
    #[serde(default)]
    interprets: Vec<String>,
    #[serde(default)]
    repeals: Vec<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusManifest {
    #[serde(default)]
    snapshot_date: Option<NaiveDate>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub docs: Vec<SourceDocument>,
    pub snapshot_date: Option<NaiveDate>,
}

pub const DOC_SUFFIX: &str = ".txt";
pub const SIDECAR_SUFFIX: &str = ".meta.yaml";
pub const MANIFEST_FILE: &str = "corpus.yaml";

/// Reads `<doc-id>.txt` files, each with a `<doc-id>.meta.yaml` sidecar,
/// plus an optional `corpus.yaml` carrying the snapshot date.
pub fn load_corpus(dir: &Path) -> Result<Corpus, CorpusError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CorpusError::Io { path, source }
    };
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.to_string_lossy().ends_with(DOC_SUFFIX))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CorpusError::Empty(dir.display().to_string()));
    }
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: CorpusManifest = if manifest_path.exists() {
        let text = std::fs::read_to_string(&manifest_path).map_err(io(&manifest_path))?;
        serde_yaml::from_str(&text).map_err(|e| CorpusError::Parse { path: manifest_path.clone(), message: e.to_string() })?
    } else {
        CorpusManifest::default()
    };

    let mut docs: Vec<SourceDocument> = Vec::with_capacity(names.len());
    for path in names {
        let file = path.file_name().unwrap().to_string_lossy().into_owned();
        let doc_id = file.trim_end_matches(DOC_SUFFIX).to_string();
        let text = std::fs::read_to_string(&path).map_err(io(&path))?;
        let meta_path = dir.join(format!("{doc_id}{SIDECAR_SUFFIX}"));
        let meta_text = std::fs::read_to_string(&meta_path).map_err(io(&meta_path))?;
        let parse_err = |message: String| CorpusError::Parse { path: meta_path.clone(), message };
        let side: Sidecar = serde_yaml::from_str(&meta_text).map_err(|e| parse_err(e.to_string()))?;
        let key = match &side.citation {
            Some(c) => Some(c.parse::<CitationKey>().map_err(|e| parse_err(e.to_string()))?),
            None => None,
        };
        let metadata = DocMetadata {
            title: side.title,
            court: side.court.or_else(|| key.as_ref().map(|k| k.court.slug())),
            number: key.as_ref().map(|k| k.number),
            year: key.as_ref().map(|k| k.year),
            date: side.date.or_else(|| key.as_ref().and_then(|k| k.date)),
            repealed: side.repealed,
            repeal_date: side.repeal_date,
            interprets: side.interprets,
            repeals: side.repeals,
        };
        let doc = SourceDocument { doc_id, kind: side.kind, citation_key: key, text, metadata };
        doc.validate().map_err(|e| parse_err(e.to_string()))?;
        docs.push(doc);
    }
    Ok(Corpus { docs, snapshot_date: manifest.snapshot_date })
}

/// Documents keyed by id; rejects duplicates.
pub(crate) fn doc_map(docs: &[SourceDocument]) -> Result<BTreeMap<String, SourceDocument>, CorpusError> {
    let mut map = BTreeMap::new();
    for d in docs {
        d.validate()?;
        if map.insert(d.doc_id.clone(), d.clone()).is_some() {
            return Err(CorpusError::DuplicateDoc(d.doc_id.clone()));
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) {
        std::fs::write(dir.join(name), body).unwrap();
    }

    #[test]
    fn loads_documents_with_sidecars() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "sts-1.txt", "El Tribunal Supremo declara.");
        write(dir.path(), "sts-1.meta.yaml", "kind: jurisprudence\ncitation: STS 1/2020\ndate: 2020-02-03\n");
        write(dir.path(), "lec-1.txt", "Texto derogado.");
        write(
            dir.path(),
            "lec-1.meta.yaml",
            "kind: statute\ncitation: art. 1 LEC 1881\nrepealed: true\nrepeal_date: 2001-01-08\n",
        );
        write(dir.path(), "corpus.yaml", "snapshot_date: 2025-06-01\n");
        let c = load_corpus(dir.path()).unwrap();
        assert_eq!(c.docs.len(), 2);
        assert_eq!(c.docs[0].doc_id, "lec-1");
        assert!(c.docs[0].repealed_at(c.snapshot_date));
        assert!(!c.docs[0].repealed_at(NaiveDate::from_ymd_opt(2000, 1, 1)));
        assert_eq!(c.docs[1].metadata.number, Some(1));
        assert_eq!(c.docs[1].label(), "STS 1/2020");
    }

    #[test]
    fn repeal_date_requires_flag() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a.txt", "x");
        write(dir.path(), "a.meta.yaml", "kind: doctrine\nrepeal_date: 2001-01-08\n");
        let err = load_corpus(dir.path()).unwrap_err();
        assert!(err.to_string().contains("a.meta.yaml"), "{err}");
    }

    #[test]
    fn statute_needs_key_and_empty_dir_fails() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_corpus(dir.path()), Err(CorpusError::Empty(_))));
        write(dir.path(), "a.txt", "x");
        write(dir.path(), "a.meta.yaml", "kind: statute\n");
        assert!(load_corpus(dir.path()).is_err());
    }
}
