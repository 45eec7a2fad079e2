//! Fixture corpora of protocol workers, described by `corpus/manifest.json`.
//!
//! ```json
//! {
//!   "abstractions": [ { "id": "sum", "name": "Sum", "operations": [ ... ] } ],
//!   "workers": [
//!     {
//!       "implementation_id": "sum_correct",
//!       "abstraction_id": "sum",
//!       "launch": ["python3", "workers/sum_correct.py"],
//!       "behavior": "correct",
//!       "source": "workers/sum_correct.py"
//!     }
//!   ]
//! }
//! ```
//!
//! `abstractions` may be omitted for the built-in `sum`, `queue` and `sort`.
//! Relative paths resolve against the manifest's directory. A launch whose
//! program is `stub` runs an in-process [`crate::stub::StubWorker`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::registry::{ImplementationRef, LaunchSpec, Origin, Registry, RegistryError};
use crate::sheet::{AbstractionSpec, OperationSig, SemType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Behavior {
    Correct,
    Duplicate,
    Buggy,
    Slow,
    Crash,
    Nondet,
}

impl Behavior {
    pub fn as_str(self) -> &'static str {
        match self {
            Behavior::Correct => "correct",
            Behavior::Duplicate => "duplicate",
            Behavior::Buggy => "buggy",
            Behavior::Slow => "slow",
            Behavior::Crash => "crash",
            Behavior::Nondet => "nondet",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkerEntry {
    pub implementation_id: String,
    pub abstraction_id: String,
    /// Program followed by its arguments.
    pub launch: Vec<String>,
    pub behavior: Behavior,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CorpusManifest {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub abstractions: Vec<AbstractionSpec>,
    pub workers: Vec<WorkerEntry>,
}

/// Specs of the abstractions the built-in stubs implement.
pub fn builtin_specs() -> Vec<AbstractionSpec> {
    use SemType::*;
    vec![
        AbstractionSpec {
            id: "queue".into(),
            name: "Queue".into(),
            operations: vec![
                OperationSig::new("enqueue", vec![Json], Void),
                OperationSig::new("dequeue", vec![], Json),
                OperationSig::new("peek", vec![], Json),
                OperationSig::new("size", vec![], Int),
            ],
        },
        AbstractionSpec {
            id: "sort".into(),
            name: "Sort".into(),
            operations: vec![OperationSig::new("sort", vec![Json], Json)],
        },
        AbstractionSpec {
            id: "sum".into(),
            name: "Sum".into(),
            operations: vec![OperationSig::new("sum", vec![Int, Int], Int)],
        },
    ]
}

impl CorpusManifest {
    pub fn load(path: &Path) -> Result<CorpusManifest, RegistryError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| RegistryError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// A corpus of in-process stub workers: one per behavior for each built-in abstraction.
    pub fn stub_corpus() -> CorpusManifest {
        let mut workers = Vec::new();
        for abstraction in ["sum", "queue", "sort"] {
            for behavior in [
                Behavior::Correct,
                Behavior::Duplicate,
                Behavior::Buggy,
                Behavior::Slow,
                Behavior::Crash,
                Behavior::Nondet,
            ] {
                workers.push(WorkerEntry {
                    implementation_id: format!("{abstraction}_{}", behavior.as_str()),
                    abstraction_id: abstraction.into(),
                    launch: vec!["stub".into(), format!("{abstraction}:{}", behavior.as_str())],
                    behavior,
                    source: None,
                });
            }
        }
        CorpusManifest {
            abstractions: Vec::new(),
            workers,
        }
    }

    /// Builds a registry rooted at `base`. Workers with a `source` file get a
    /// normalized-source hash; others are hashed by their launch line so that
    /// distinct workers never look like syntactic duplicates.
    pub fn to_registry(&self, base: &Path) -> Result<Registry, RegistryError> {
        let mut registry = Registry::new().with_base_dir(base);
        let mut specs: BTreeMap<String, AbstractionSpec> =
            builtin_specs().into_iter().map(|s| (s.id.clone(), s)).collect();
        for spec in &self.abstractions {
            specs.insert(spec.id.clone(), spec.clone());
        }
        let used: std::collections::BTreeSet<&str> = self.workers.iter().map(|w| w.abstraction_id.as_str()).collect();
        for spec in specs.into_values().filter(|s| used.contains(s.id.as_str())) {
            registry.register_abstraction(spec)?;
        }
        for worker in &self.workers {
            let (program, args) = worker.launch.split_first().ok_or_else(|| {
                RegistryError::InvariantViolation(format!("worker `{}` has an empty launch line", worker.implementation_id))
            })?;
            let source = match &worker.source {
                Some(file) => fs::read_to_string(base.join(file))?,
                None => worker.launch.join("\u{0}"),
            };
            let imp = ImplementationRef {
                id: worker.implementation_id.clone(),
                abstraction_id: worker.abstraction_id.clone(),
                origin: Origin::Exemplar,
                launch: LaunchSpec::new(program.clone(), args.iter().cloned()),
                code_hash: String::new(),
                source_uri: worker.source.clone(),
                labels: BTreeMap::from([("behavior".to_string(), worker.behavior.as_str().to_string())]),
            };
            registry.register_implementation(imp, Some(&source))?;
        }
        Ok(registry)
    }
}

/// Loads a registry from either a corpus manifest (has `workers`) or a
/// registry manifest (has `implementations`).
pub fn load_registry(path: &Path) -> Result<Registry, RegistryError> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| RegistryError::Manifest {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if value.get("workers").is_some() {
        let base = path.parent().unwrap_or(Path::new("."));
        CorpusManifest::load(path)?.to_registry(base)
    } else {
        Registry::load(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::dedup_syntactic;

    #[test]
    fn builtin_specs_are_valid() {
        for spec in builtin_specs() {
            spec.check().unwrap();
        }
    }

    #[test]
    fn stub_corpus_registers_every_variant() {
        let dir = tempfile::tempdir().unwrap();
        let registry = CorpusManifest::stub_corpus().to_registry(dir.path()).unwrap();
        assert_eq!(registry.implementations().count(), 18);
        assert_eq!(registry.abstractions().count(), 3);
        let sums: Vec<_> = registry.implementations_of("sum").cloned().collect();
        assert_eq!(dedup_syntactic(&sums).len(), 6);
        assert_eq!(registry.implementation("sum_buggy").unwrap().labels["behavior"], "buggy");
    }

    #[test]
    fn manifest_with_sources_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.py"), "def f():\n    return 1  # one\n").unwrap();
        fs::write(dir.path().join("b.py"), "def f():\n        return 1\n").unwrap();
        let manifest = serde_json::json!({
            "workers": [
                {"implementation_id": "sum_a", "abstraction_id": "sum", "launch": ["python3", "a.py"], "behavior": "correct", "source": "a.py"},
                {"implementation_id": "sum_b", "abstraction_id": "sum", "launch": ["python3", "b.py"], "behavior": "duplicate", "source": "b.py"}
            ]
        });
        let path = dir.path().join("manifest.json");
        fs::write(&path, manifest.to_string()).unwrap();
        let registry = load_registry(&path).unwrap();
        let imps: Vec<_> = registry.implementations().cloned().collect();
        assert_eq!(dedup_syntactic(&imps), vec![vec!["sum_a".to_string(), "sum_b".to_string()]]);

        let bad = dir.path().join("bad.json");
        fs::write(&bad, r#"{"workers": [{"implementation_id": "x", "abstraction_id": "sum", "launch": [], "behavior": "weird"}]}"#).unwrap();
        assert!(matches!(load_registry(&bad), Err(RegistryError::Manifest { .. })));
    }
}
