//! Run configuration, read from TOML. Relative paths resolve against the
//! config file's directory.

use std::path::{Path, PathBuf};

use archivist_core::annotation::LikertRule;
use archivist_core::backend::WireConfig;
use archivist_core::corpus::{BuildConfig, DEFAULT_DIM};
use archivist_core::generation::{Condition, GridSpec, PipelineConfig, Template};
use archivist_core::wire::Endpoint;
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub workers: usize,
    pub corpus_dir: PathBuf,
    pub task_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Synonym table for query expansion; the built-in one otherwise.
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
    #[serde(default)]
    pub grid: GridAxes,
    #[serde(default)]
    pub backends: Vec<BackendSpec>,
    #[serde(default)]
    pub index: IndexSection,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub scorer: ScorerSpec,
    #[serde(default)]
    pub score: ScoreSection,
    #[serde(default)]
    pub annotation: AnnotationSection,
    #[serde(default)]
    pub serve: ServeSection,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxes {
    #[serde(default = "all_conditions")]
    pub conditions: Vec<Condition>,
    #[serde(default = "default_temperatures")]
    pub temperatures: Vec<f64>,
    #[serde(default = "all_templates")]
    pub templates: Vec<Template>,
}

fn all_conditions() -> Vec<Condition> {
    Condition::ALL.to_vec()
}
fn default_temperatures() -> Vec<f64> {
    vec![0.1, 0.7]
}
fn all_templates() -> Vec<Template> {
    Template::ALL.to_vec()
}

impl Default for GridAxes {
    fn default() -> Self {
        GridAxes { conditions: all_conditions(), temperatures: default_temperatures(), templates: all_templates() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BackendSpec {
    /// Persona with planted error rates; `path` points at a persona YAML.
    Persona {
        #[serde(default)]
        id: Option<String>,
        #[serde(default)]
        path: Option<PathBuf>,
    },
    /// Rule-based script YAML.
    Script { path: PathBuf },
    Wire(WireConfig),
}

#[derive(Debug, Clone, Deserialize)]
pub struct IndexSection {
    #[serde(default)]
    pub embedder: EmbedderSpec,
    #[serde(default, flatten)]
    pub build: BuildConfig,
}

impl Default for IndexSection {
    fn default() -> Self {
        IndexSection { embedder: EmbedderSpec::default(), build: BuildConfig::default() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EmbedderSpec {
    Hash {
        #[serde(default = "default_dim")]
        dim: usize,
    },
    Wire { id: String, dim: usize, endpoint: Endpoint },
}

fn default_dim() -> usize {
    DEFAULT_DIM
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec::Hash { dim: DEFAULT_DIM }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScorerSpec {
    #[default]
    Lexical,
    Wire { id: String, endpoint: Endpoint },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreSection {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_group_by")]
    pub group_by: Vec<String>,
    #[serde(default)]
    pub likert_rule: LikertRule,
}

fn default_k() -> usize {
    archivist_core::metrics::DEFAULT_K
}
fn default_group_by() -> Vec<String> {
    vec!["condition".into()]
}

impl Default for ScoreSection {
    fn default() -> Self {
        ScoreSection { k: default_k(), group_by: default_group_by(), likert_rule: LikertRule::default() }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationSection {
    #[serde(default)]
    pub annotators: Vec<String>,
    /// Study export from the annotation service, for human scoring.
    #[serde(default)]
    pub export: Option<PathBuf>,
    /// Defaults to the map written by `export-annotation`.
    #[serde(default)]
    pub blinding_map: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeSection {
    #[serde(default = "default_addr")]
    pub addr: String,
    #[serde(default = "default_admin_env")]
    pub admin_token_env: String,
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: u64,
}

fn default_addr() -> String {
    "127.0.0.1:8787".into()
}
fn default_admin_env() -> String {
    "ARCHIVIST_ADMIN_TOKEN".into()
}
fn default_snapshot_every() -> u64 {
    50
}

impl Default for ServeSection {
    fn default() -> Self {
        ServeSection { addr: default_addr(), admin_token_env: default_admin_env(), snapshot_every: default_snapshot_every() }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Read { path: PathBuf, message: String },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("config: {0}")]
    Invalid(String),
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read { path: path.into(), message: e.to_string() })?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse { path: path.into(), message: e.to_string() })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus_dir);
        fix(&mut self.task_dir);
        fix(&mut self.output_dir);
        if let Some(p) = &mut self.lexicon {
            fix(p);
        }
        for b in &mut self.backends {
            match b {
                BackendSpec::Persona { path: Some(p), .. } | BackendSpec::Script { path: p } => fix(p),
                _ => {}
            }
        }
        if let Some(p) = &mut self.annotation.export {
            fix(p);
        }
        if let Some(p) = &mut self.annotation.blinding_map {
            fix(p);
        }
    }

    /// Referenced inputs must exist and thresholds must lie in range.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        for (name, p) in [("corpus_dir", &self.corpus_dir), ("task_dir", &self.task_dir)] {
            if !p.is_dir() {
                return bad(format!("{name} {} is not a directory", p.display()));
            }
        }
        if let Some(p) = &self.lexicon {
            if !p.is_file() {
                return bad(format!("lexicon {} does not exist", p.display()));
            }
        }
        for b in &self.backends {
            match b {
                BackendSpec::Persona { path: Some(p), .. } | BackendSpec::Script { path: p } if !p.is_file() => {
                    return bad(format!("backend file {} does not exist", p.display()));
                }
                _ => {}
            }
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        let g = &self.grid;
        if g.conditions.is_empty() || g.temperatures.is_empty() || g.templates.is_empty() {
            return bad("grid axes must not be empty".into());
        }
        if let Some(t) = g.temperatures.iter().find(|t| !(0.0..=2.0).contains(*t)) {
            return bad(format!("temperature {t} is outside [0, 2]"));
        }
        let p = &self.pipeline;
        let unit = [
            ("pipeline.verify.misgrounding_threshold", p.verify.misgrounding_threshold),
            ("pipeline.verify.support_threshold", p.verify.support_threshold),
            ("pipeline.loop.threshold", p.correction.threshold),
        ];
        if let Some((name, v)) = unit.iter().find(|(_, v)| !(0.0..=1.0).contains(v)) {
            return bad(format!("{name} = {v} is outside [0, 1]"));
        }
        let r = &p.retrieval;
        if !(r.k_rrf > 0.0) {
            return bad(format!("pipeline.retrieval.k_rrf = {} must be positive", r.k_rrf));
        }
        if r.rerank_m == 0 || r.rerank_m > r.rerank_n {
            return bad(format!("need 0 < rerank_m ({}) <= rerank_n ({})", r.rerank_m, r.rerank_n));
        }
        if r.canonical_top == 0 || r.char_budget == 0 {
            return bad("canonical_top and char_budget must be positive".into());
        }
        if self.score.k == 0 {
            return bad("score.k must be positive".into());
        }
        if let EmbedderSpec::Hash { dim: 0 } | EmbedderSpec::Wire { dim: 0, .. } = self.index.embedder {
            return bad("embedder dimension must be positive".into());
        }
        Ok(())
    }

    pub fn grid_spec(&self, seed: u64) -> GridSpec {
        GridSpec {
            conditions: self.grid.conditions.clone(),
            temperatures: self.grid.temperatures.clone(),
            templates: self.grid.templates.clone(),
            master_seed: seed,
        }
    }

    pub fn bundle_path(&self) -> PathBuf {
        self.output_dir.join(crate::BUNDLE_FILE)
    }
}
