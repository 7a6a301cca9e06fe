//! Drafting tasks and their gold standards.
//!
//! One task per `<task-id>.task.yaml` file. Top-level field names are
//! `id`, `category`, `scenario`, `inputs` (`brief`, `annexes`) and
//! `gold_standard` (`facts`, `cases`); any other top-level field is kept as
//! opaque metadata and written back on serialization.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::citation::{self, CitationKey};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskCategory {
    CaseLawResearch,
    LegalQualification,
    GroundsOfAppeal,
    OppositionToPrecautionaryMeasures,
    ProvenFactsSummary,
    /// Open label for categories outside the five named types.
    Other(String),
}

impl TaskCategory {
    pub fn as_str(&self) -> &str {
        match self {
            TaskCategory::CaseLawResearch => "case-law-research",
            TaskCategory::LegalQualification => "legal-qualification",
            TaskCategory::GroundsOfAppeal => "grounds-of-appeal",
            TaskCategory::OppositionToPrecautionaryMeasures => "opposition-to-precautionary-measures",
            TaskCategory::ProvenFactsSummary => "proven-facts-summary",
            TaskCategory::Other(s) => s,
        }
    }
}

impl From<&str> for TaskCategory {
    fn from(s: &str) -> Self {
        match s {
            "case-law-research" => TaskCategory::CaseLawResearch,
            "legal-qualification" => TaskCategory::LegalQualification,
            "grounds-of-appeal" => TaskCategory::GroundsOfAppeal,
            "opposition-to-precautionary-measures" => TaskCategory::OppositionToPrecautionaryMeasures,
            "proven-facts-summary" => TaskCategory::ProvenFactsSummary,
            other => TaskCategory::Other(other.to_string()),
        }
    }
}

impl Default for TaskCategory {
    fn default() -> Self {
        TaskCategory::Other("other".into())
    }
}

impl fmt::Display for TaskCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for TaskCategory {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for TaskCategory {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(TaskCategory::from(String::deserialize(d)?.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnexDocument {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInputs {
    #[serde(default)]
    pub brief: String,
    #[serde(default)]
    pub annexes: Vec<AnnexDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldFact {
    pub id: String,
    pub statement: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GoldStandard {
    #[serde(default)]
    pub facts: Vec<GoldFact>,
    #[serde(default, with = "citation::as_string::vec")]
    pub cases: Vec<CitationKey>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    #[serde(default)]
    pub category: TaskCategory,
    pub scenario: String,
    pub inputs: TaskInputs,
    pub gold_standard: GoldStandard,
    /// Unrecognised top-level fields, preserved verbatim.
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_yaml::Value>,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: parse error: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: schema error: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("{0}: no task files found")]
    EmptySuite(PathBuf),
    #[error("duplicate task id {id:?} in {first} and {second}")]
    DuplicateTask { id: String, first: PathBuf, second: PathBuf },
}

impl DatasetError {
    pub fn is_schema(&self) -> bool {
        matches!(self, DatasetError::Schema { .. } | DatasetError::DuplicateTask { .. })
    }
}

pub const TASK_SUFFIX: &str = ".task.yaml";
const REQUIRED: &[&str] = &["id", "scenario", "inputs", "gold_standard"];

impl Task {
    pub fn from_yaml(text: &str, path: &Path) -> Result<Task, DatasetError> {
        let schema = |message: String| DatasetError::Schema { path: path.to_path_buf(), message };
        let value: serde_yaml::Value = serde_yaml::from_str(text).map_err(|e| DatasetError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let map = value
            .as_mapping()
            .ok_or_else(|| schema("top level must be a mapping".into()))?;
        for field in REQUIRED {
            if !map.contains_key(*field) {
                return Err(schema(format!("missing required field `{field}`")));
            }
        }
        let task: Task = serde_yaml::from_value(value).map_err(|e| schema(e.to_string()))?;
        task.validate().map_err(schema)?;
        Ok(task)
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("task serializes")
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.id.trim().is_empty() {
            return Err("`id` must be non-empty".into());
        }
        let has_annex_text = self.inputs.annexes.iter().any(|a| !a.text.trim().is_empty());
        if self.inputs.brief.trim().is_empty() && !has_annex_text {
            return Err("inputs need a non-empty brief or at least one annex".into());
        }
        let mut seen = BTreeSet::new();
        for a in &self.inputs.annexes {
            if !seen.insert(a.id.as_str()) {
                return Err(format!("duplicate annex id {:?}", a.id));
            }
        }
        let mut facts = BTreeSet::new();
        for f in &self.gold_standard.facts {
            if !facts.insert(f.id.as_str()) {
                return Err(format!("duplicate gold fact id {:?}", f.id));
            }
        }
        let mut cases = BTreeSet::new();
        for c in &self.gold_standard.cases {
            if !cases.insert(c.normalized()) {
                return Err(format!("duplicate gold case {:?}", c.normalized()));
            }
        }
        Ok(())
    }

    /// Brief plus annex texts, the material a response must stay faithful to.
    pub fn source_material(&self) -> impl Iterator<Item = (&str, &str)> {
        std::iter::once(("brief", self.inputs.brief.as_str()))
            .chain(self.inputs.annexes.iter().map(|a| (a.id.as_str(), a.text.as_str())))
    }
}

pub fn load_task(path: &Path) -> Result<Task, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
    Task::from_yaml(&text, path)
}

/// An immutable, id-sorted set of tasks.
#[derive(Debug, Clone)]
pub struct TaskSuite {
    tasks: Vec<Task>,
}

impl TaskSuite {
    pub fn new(mut tasks: Vec<Task>) -> Result<Self, DatasetError> {
        tasks.sort_by(|a, b| a.id.cmp(&b.id));
        for w in tasks.windows(2) {
            if w[0].id == w[1].id {
                return Err(DatasetError::DuplicateTask {
                    id: w[0].id.clone(),
                    first: PathBuf::new(),
                    second: PathBuf::new(),
                });
            }
        }
        Ok(TaskSuite { tasks })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn get(&self, id: &str) -> Option<&Task> {
        self.tasks.binary_search_by(|t| t.id.as_str().cmp(id)).ok().map(|i| &self.tasks[i])
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn category_histogram(&self) -> BTreeMap<String, usize> {
        let mut h = BTreeMap::new();
        for t in &self.tasks {
            *h.entry(t.category.as_str().to_string()).or_insert(0) += 1;
        }
        h
    }
}

/// Load every `*.task.yaml` in `dir`. Fails on the first bad file.
pub fn load_suite(dir: &Path) -> Result<TaskSuite, DatasetError> {
    let io = |source| DatasetError::Io { path: dir.to_path_buf(), source };
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(TASK_SUFFIX)))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(DatasetError::EmptySuite(dir.to_path_buf()));
    }
    let mut by_id: BTreeMap<String, (PathBuf, Task)> = BTreeMap::new();
    for f in files {
        let task = load_task(&f)?;
        if let Some((first, _)) = by_id.get(&task.id) {
            return Err(DatasetError::DuplicateTask { id: task.id.clone(), first: first.clone(), second: f });
        }
        by_id.insert(task.id.clone(), (f, task));
    }
    TaskSuite::new(by_id.into_values().map(|(_, t)| t).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
id: T1
scenario: Redactar un motivo de apelación.
inputs:
  brief: El acusado fue detenido el 3 de mayo de 2023.
  annexes:
    - id: A1
      title: Atestado
      text: Consta la detención.
gold_standard:
  facts:
    - id: F1
      statement: El acusado fue detenido el 3 de mayo de 2023.
  cases:
    - STS 123/2020
reviewer: interno
"#;

    fn p() -> &'static Path {
        Path::new("t.task.yaml")
    }

    #[test]
    fn loads_all_sections_and_keeps_unknown_fields() {
        let t = Task::from_yaml(MINIMAL, p()).unwrap();
        assert_eq!(t.id, "T1");
        assert!(!t.scenario.is_empty());
        assert_eq!(t.inputs.annexes.len(), 1);
        assert_eq!(t.gold_standard.cases[0].normalized(), "STS 123/2020");
        assert_eq!(t.category, TaskCategory::default());
        assert_eq!(t.extra.get("reviewer").and_then(|v| v.as_str()), Some("interno"));
    }

    #[test]
    fn missing_gold_standard_is_schema_error() {
        let text = MINIMAL.split("gold_standard:").next().unwrap();
        let err = Task::from_yaml(text, p()).unwrap_err();
        assert!(err.is_schema());
        assert!(err.to_string().contains("gold_standard"), "{err}");
    }

    #[test]
    fn duplicate_annex_id() {
        let text = MINIMAL.replace(
            "      text: Consta la detención.\n",
            "      text: Consta la detención.\n    - id: A1\n      text: otro\n",
        );
        let err = Task::from_yaml(&text, p()).unwrap_err();
        assert!(err.to_string().contains("duplicate annex id"), "{err}");
    }

    #[test]
    fn malformed_yaml_is_parse_error() {
        let err = Task::from_yaml("id: [unclosed", p()).unwrap_err();
        assert!(matches!(err, DatasetError::Parse { .. }));
    }

    #[test]
    fn unparseable_gold_case_is_schema_error() {
        let text = MINIMAL.replace("STS 123/2020", "una sentencia cualquiera");
        assert!(Task::from_yaml(&text, p()).unwrap_err().is_schema());
    }

    #[test]
    fn empty_inputs_rejected() {
        let text = MINIMAL
            .replace("  brief: El acusado fue detenido el 3 de mayo de 2023.\n", "  brief: \"\"\n")
            .replace("      text: Consta la detención.", "      text: \"\"");
        assert!(Task::from_yaml(&text, p()).unwrap_err().to_string().contains("non-empty brief"));
    }

    #[test]
    fn categories_round_trip_through_strings() {
        for s in ["case-law-research", "proven-facts-summary", "evidentiary-proceedings-request"] {
            assert_eq!(TaskCategory::from(s).as_str(), s);
        }
    }
}
