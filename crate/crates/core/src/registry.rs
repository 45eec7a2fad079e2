//! Abstractions, implementations and execution environments, plus the
//! syntactic (normalized source hash) deduplication pass.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blob::{is_sha256_hex, sha256_hex};
use crate::canonical::canonicalize;
use crate::sheet::AbstractionSpec;

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("unknown abstraction `{0}`")]
    UnknownAbstraction(String),
    #[error("unknown implementation `{0}`")]
    UnknownImplementation(String),
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error("registry manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("registry I/O: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Harvested,
    Synthesized,
    Exemplar,
}

/// How to start a worker process for an implementation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaunchSpec {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cwd: Option<PathBuf>,
}

impl LaunchSpec {
    pub fn new(program: impl Into<String>, args: impl IntoIterator<Item = impl Into<String>>) -> Self {
        LaunchSpec {
            program: program.into(),
            args: args.into_iter().map(Into::into).collect(),
            cwd: None,
        }
    }

    /// Resolves a relative working directory and a relative program path
    /// (one containing a separator) against `base`.
    pub fn resolved(&self, base: &Path) -> LaunchSpec {
        let cwd = match &self.cwd {
            Some(dir) if dir.is_absolute() => dir.clone(),
            Some(dir) => base.join(dir),
            None => base.to_path_buf(),
        };
        let program = if self.program.contains('/') && Path::new(&self.program).is_relative() {
            cwd.join(&self.program).to_string_lossy().into_owned()
        } else {
            self.program.clone()
        };
        LaunchSpec {
            program,
            args: self.args.clone(),
            cwd: Some(cwd),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImplementationRef {
    pub id: String,
    pub abstraction_id: String,
    pub origin: Origin,
    pub launch: LaunchSpec,
    /// SHA-256 of the normalized source, 64 lowercase hex characters.
    #[serde(default)]
    pub code_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_uri: Option<String>,
    /// Free-form metadata (license, provenance, generating model, ...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvironmentRef {
    pub id: String,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
}

/// Comment and string delimiters used when normalizing source text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommentSyntax {
    pub line: Vec<String>,
    pub block: Vec<(String, String)>,
    /// Quote characters whose contents are left untouched.
    #[serde(default)]
    pub strings: Vec<char>,
}

impl Default for CommentSyntax {
    fn default() -> Self {
        CommentSyntax {
            line: vec!["//".into(), "#".into()],
            block: vec![("/*".into(), "*/".into())],
            strings: vec!['"', '\''],
        }
    }
}

enum Scan<'a> {
    Code,
    Str(char),
    Line,
    Block(&'a str),
}

/// Strips comments, collapses whitespace runs to one space, trims lines and
/// drops the lines left empty. Idempotent.
pub fn normalize_source(source: &str, syntax: &CommentSyntax) -> String {
    let mut out = String::with_capacity(source.len());
    let mut state = Scan::Code;
    let mut escaped = false;
    let mut pending_space = false;
    let mut i = 0;
    let bytes_len = source.len();

    while i < bytes_len {
        let rest = &source[i..];
        let c = rest.chars().next().expect("in bounds");
        match state {
            Scan::Str(quote) => {
                out.push(c);
                if escaped {
                    escaped = false;
                } else if c == '\\' {
                    escaped = true;
                } else if c == quote {
                    state = Scan::Code;
                }
                i += c.len_utf8();
            }
            Scan::Line => {
                if c == '\n' {
                    state = Scan::Code;
                    continue;
                }
                i += c.len_utf8();
            }
            Scan::Block(end) => {
                if rest.starts_with(end) {
                    i += end.len();
                    // A removed block comment separates tokens like whitespace.
                    pending_space = true;
                    state = Scan::Code;
                } else {
                    if c == '\n' {
                        out.push('\n');
                        pending_space = false;
                    }
                    i += c.len_utf8();
                }
            }
            Scan::Code => {
                if let Some((start, end)) = syntax.block.iter().find(|(s, _)| rest.starts_with(s.as_str())) {
                    i += start.len();
                    state = Scan::Block(end.as_str());
                    continue;
                }
                if let Some(marker) = syntax.line.iter().find(|m| rest.starts_with(m.as_str())) {
                    i += marker.len();
                    state = Scan::Line;
                    continue;
                }
                if c == '\n' {
                    out.push('\n');
                    pending_space = false;
                } else if c.is_whitespace() {
                    pending_space = true;
                } else {
                    if pending_space {
                        out.push(' ');
                        pending_space = false;
                    }
                    out.push(c);
                    if syntax.strings.contains(&c) {
                        state = Scan::Str(c);
                    }
                }
                i += c.len_utf8();
            }
        }
    }

    out.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn code_hash(source: &str, syntax: &CommentSyntax) -> String {
    sha256_hex(normalize_source(source, syntax).as_bytes())
}

/// Groups implementations sharing a code hash. Members are sorted by id and
/// groups by their first member.
pub fn dedup_syntactic(impls: &[ImplementationRef]) -> Vec<Vec<String>> {
    let mut by_hash: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for imp in impls {
        by_hash.entry(imp.code_hash.as_str()).or_default().push(imp.id.clone());
    }
    let mut groups: Vec<Vec<String>> = by_hash
        .into_values()
        .map(|mut ids| {
            ids.sort();
            ids
        })
        .collect();
    groups.sort();
    groups
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Registry {
    #[serde(default)]
    pub comment_syntax: CommentSyntax,
    #[serde(default)]
    abstractions: BTreeMap<String, AbstractionSpec>,
    #[serde(default)]
    implementations: BTreeMap<String, ImplementationRef>,
    #[serde(default)]
    environments: BTreeMap<String, EnvironmentRef>,
    /// Directory that relative launch paths and source URIs resolve against.
    #[serde(skip)]
    base_dir: Option<PathBuf>,
}

/// On-disk shape of `registry.json`: plain lists instead of id-keyed maps.
#[derive(Serialize, Deserialize)]
struct Manifest {
    #[serde(default)]
    comment_syntax: CommentSyntax,
    #[serde(default)]
    abstractions: Vec<AbstractionSpec>,
    #[serde(default)]
    implementations: Vec<ImplementationRef>,
    #[serde(default)]
    environments: Vec<EnvironmentRef>,
}

impl Registry {
    pub fn new() -> Self {
        Registry::default()
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = Some(dir.into());
        self
    }

    pub fn base_dir(&self) -> Option<&Path> {
        self.base_dir.as_deref()
    }

    pub fn register_abstraction(&mut self, spec: AbstractionSpec) -> Result<String, RegistryError> {
        spec.check().map_err(RegistryError::InvariantViolation)?;
        if self.abstractions.contains_key(&spec.id) {
            return Err(RegistryError::DuplicateId(spec.id));
        }
        let id = spec.id.clone();
        self.abstractions.insert(id.clone(), spec);
        Ok(id)
    }

    /// Registers an implementation. When `source` is given its normalized hash
    /// replaces `code_hash`; otherwise `code_hash` must already be valid.
    pub fn register_implementation(
        &mut self,
        mut imp: ImplementationRef,
        source: Option<&str>,
    ) -> Result<String, RegistryError> {
        if !self.abstractions.contains_key(&imp.abstraction_id) {
            return Err(RegistryError::UnknownAbstraction(imp.abstraction_id));
        }
        if self.implementations.contains_key(&imp.id) {
            return Err(RegistryError::DuplicateId(imp.id));
        }
        if imp.id.is_empty() {
            return Err(RegistryError::InvariantViolation("implementation id is empty".into()));
        }
        if imp.launch.program.is_empty() {
            return Err(RegistryError::InvariantViolation(format!(
                "implementation `{}` has an empty launch command",
                imp.id
            )));
        }
        if let Some(source) = source {
            imp.code_hash = code_hash(source, &self.comment_syntax);
        }
        if !is_sha256_hex(&imp.code_hash) {
            return Err(RegistryError::InvariantViolation(format!(
                "implementation `{}` lacks a 64-hex code hash",
                imp.id
            )));
        }
        let id = imp.id.clone();
        self.implementations.insert(id.clone(), imp);
        Ok(id)
    }

    pub fn register_environment(&mut self, env: EnvironmentRef) -> Result<String, RegistryError> {
        if env.id.is_empty() {
            return Err(RegistryError::InvariantViolation("environment id is empty".into()));
        }
        if self.environments.contains_key(&env.id) {
            return Err(RegistryError::DuplicateId(env.id));
        }
        let id = env.id.clone();
        self.environments.insert(id.clone(), env);
        Ok(id)
    }

    pub fn abstraction(&self, id: &str) -> Option<&AbstractionSpec> {
        self.abstractions.get(id)
    }

    pub fn abstractions(&self) -> impl Iterator<Item = &AbstractionSpec> {
        self.abstractions.values()
    }

    pub fn implementation(&self, id: &str) -> Option<&ImplementationRef> {
        self.implementations.get(id)
    }

    pub fn implementations(&self) -> impl Iterator<Item = &ImplementationRef> {
        self.implementations.values()
    }

    /// Implementations of one abstraction, in id order.
    pub fn implementations_of<'a>(&'a self, abstraction_id: &'a str) -> impl Iterator<Item = &'a ImplementationRef> + 'a {
        self.implementations
            .values()
            .filter(move |imp| imp.abstraction_id == abstraction_id)
    }

    /// The implementation with its launch command resolved against the registry directory.
    pub fn launchable(&self, id: &str) -> Result<ImplementationRef, RegistryError> {
        let mut imp = self
            .implementation(id)
            .cloned()
            .ok_or_else(|| RegistryError::UnknownImplementation(id.to_string()))?;
        if let Some(base) = &self.base_dir {
            imp.launch = imp.launch.resolved(base);
        }
        Ok(imp)
    }

    pub fn environment(&self, id: &str) -> Option<&EnvironmentRef> {
        self.environments.get(id)
    }

    pub fn environments(&self) -> impl Iterator<Item = &EnvironmentRef> {
        self.environments.values()
    }

    fn to_manifest(&self) -> Manifest {
        Manifest {
            comment_syntax: self.comment_syntax.clone(),
            abstractions: self.abstractions.values().cloned().collect(),
            implementations: self.implementations.values().cloned().collect(),
            environments: self.environments.values().cloned().collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_manifest()).expect("registry serializes")
    }

    /// SHA-256 over the canonical JSON of the manifest.
    pub fn snapshot_hash(&self) -> String {
        let value = serde_json::to_value(self.to_manifest()).expect("registry serializes");
        sha256_hex(canonicalize(&value).expect("registry holds no floats").as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<(), RegistryError> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, self.to_json() + "\n")?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Loads `registry.json`. Implementations without a `code_hash` but with a
    /// local `source_uri` get their hash computed from that file.
    pub fn load(path: &Path) -> Result<Registry, RegistryError> {
        let text = fs::read_to_string(path)?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| RegistryError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut registry = Registry {
            comment_syntax: manifest.comment_syntax,
            base_dir: Some(base.clone()),
            ..Registry::default()
        };
        for spec in manifest.abstractions {
            registry.register_abstraction(spec)?;
        }
        for env in manifest.environments {
            registry.register_environment(env)?;
        }
        for imp in manifest.implementations {
            let source = match (&imp.source_uri, imp.code_hash.is_empty()) {
                (Some(uri), true) => {
                    let file = uri.strip_prefix("file://").unwrap_or(uri);
                    Some(fs::read_to_string(base.join(file)).map_err(|e| RegistryError::Manifest {
                        path: path.to_path_buf(),
                        message: format!("source of `{}` ({file}): {e}", imp.id),
                    })?)
                }
                _ => None,
            };
            registry.register_implementation(imp, source.as_deref())?;
        }
        Ok(registry)
    }
}

/// Single-writer, many-reader registry. Readers hold an immutable snapshot
/// that later writes never change.
#[derive(Debug, Clone, Default)]
pub struct SharedRegistry {
    inner: Arc<RwLock<Arc<Registry>>>,
}

impl SharedRegistry {
    pub fn new(registry: Registry) -> Self {
        SharedRegistry {
            inner: Arc::new(RwLock::new(Arc::new(registry))),
        }
    }

    pub fn snapshot(&self) -> Arc<Registry> {
        self.inner.read().expect("registry lock poisoned").clone()
    }

    /// Applies `update` to a copy and publishes it only if it succeeds.
    pub fn update<T>(&self, update: impl FnOnce(&mut Registry) -> Result<T, RegistryError>) -> Result<T, RegistryError> {
        let mut guard = self.inner.write().expect("registry lock poisoned");
        let mut next = Registry::clone(&guard);
        let out = update(&mut next)?;
        *guard = Arc::new(next);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sheet::{OperationSig, SemType};

    fn sum_spec() -> AbstractionSpec {
        AbstractionSpec {
            id: "sum".into(),
            name: "Sum".into(),
            operations: vec![OperationSig::new("sum", vec![SemType::Int, SemType::Int], SemType::Int)],
        }
    }

    fn imp(id: &str, abstraction: &str) -> ImplementationRef {
        ImplementationRef {
            id: id.into(),
            abstraction_id: abstraction.into(),
            origin: Origin::Exemplar,
            launch: LaunchSpec::new("python3", ["sum.py"]),
            code_hash: String::new(),
            source_uri: None,
            labels: BTreeMap::new(),
        }
    }

    #[test]
    fn register_and_lookup_abstraction() {
        let mut reg = Registry::new();
        assert_eq!(reg.register_abstraction(sum_spec()).unwrap(), "sum");
        assert_eq!(reg.abstraction("sum").unwrap().name, "Sum");
        assert!(matches!(reg.register_abstraction(sum_spec()), Err(RegistryError::DuplicateId(_))));
        let mut empty = sum_spec();
        empty.id = "empty".into();
        empty.operations.clear();
        assert!(matches!(reg.register_abstraction(empty), Err(RegistryError::InvariantViolation(_))));
    }

    #[test]
    fn register_implementation_contracts() {
        let mut reg = Registry::new();
        reg.register_abstraction(sum_spec()).unwrap();
        reg.register_implementation(imp("sum_v1", "sum"), Some("def sum(a, b): return a + b")).unwrap();
        assert_eq!(reg.implementations_of("sum").map(|i| i.id.as_str()).collect::<Vec<_>>(), ["sum_v1"]);
        assert!(matches!(
            reg.register_implementation(imp("x", "missing"), Some("")),
            Err(RegistryError::UnknownAbstraction(_))
        ));
        assert!(matches!(
            reg.register_implementation(imp("sum_v1", "sum"), Some("")),
            Err(RegistryError::DuplicateId(_))
        ));
        assert!(matches!(
            reg.register_implementation(imp("nohash", "sum"), None),
            Err(RegistryError::InvariantViolation(_))
        ));
        let mut no_launch = imp("nolaunch", "sum");
        no_launch.launch.program.clear();
        assert!(matches!(
            reg.register_implementation(no_launch, Some("x")),
            Err(RegistryError::InvariantViolation(_))
        ));

        reg.register_implementation(imp("sum_v2", "sum"), Some("def sum(a, b): return a + b")).unwrap();
        assert_eq!(reg.implementation("sum_v1").unwrap().code_hash, reg.implementation("sum_v2").unwrap().code_hash);
    }

    // Hand-normalized fixture: comments removed, indentation and runs of
    // spaces collapsed, blank lines dropped.
    const FIXTURE_A: &str = "def add(a, b):\n    # add two ints\n    total = a + b   // sum\n\n    return total  /* done */\n";
    const FIXTURE_B: &str = "def add(a, b):\n  total = a  +  b\n\treturn total\n";
    const FIXTURE_NORMALIZED: &str = "def add(a, b):\ntotal = a + b\nreturn total";

    #[test]
    fn normalization_matches_hand_computed_fixture() {
        let syntax = CommentSyntax::default();
        assert_eq!(normalize_source(FIXTURE_A, &syntax), FIXTURE_NORMALIZED);
        assert_eq!(normalize_source(FIXTURE_B, &syntax), FIXTURE_NORMALIZED);
        assert_eq!(code_hash(FIXTURE_A, &syntax), sha256_hex(FIXTURE_NORMALIZED.as_bytes()));
    }

    #[test]
    fn normalization_keeps_string_literals() {
        let syntax = CommentSyntax::default();
        assert_eq!(normalize_source("x = \"a # b  c\"  # tail", &syntax), "x = \"a # b  c\"");
        assert_eq!(normalize_source("a/**/b", &syntax), "a b");
        assert_eq!(normalize_source("/* multi\nline */ x", &syntax), "x");
    }

    #[test]
    fn dedup_groups_by_hash() {
        let syntax = CommentSyntax::default();
        let mk = |id: &str, src: &str| ImplementationRef {
            code_hash: code_hash(src, &syntax),
            ..imp(id, "sum")
        };
        let impls = vec![
            mk("c", "return a + b"),
            mk("a", FIXTURE_A),
            mk("b", FIXTURE_B),
            mk("d", "return a + b + 1"),
            mk("e", "return a + b"),
        ];
        assert_eq!(
            dedup_syntactic(&impls),
            vec![vec!["a".to_string(), "b".into()], vec!["c".into(), "e".into()], vec!["d".into()]]
        );
    }

    #[test]
    fn manifest_round_trip_and_relative_sources() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("impl.py"), FIXTURE_A).unwrap();
        let manifest = serde_json::json!({
            "abstractions": [sum_spec()],
            "environments": [{"id": "local", "labels": {"os": "linux"}}],
            "implementations": [{
                "id": "sum_a", "abstraction_id": "sum", "origin": "harvested",
                "launch": {"program": "./run.sh", "args": ["x"]},
                "source_uri": "impl.py"
            }]
        });
        let path = dir.path().join("registry.json");
        fs::write(&path, manifest.to_string()).unwrap();
        let reg = Registry::load(&path).unwrap();
        assert_eq!(reg.implementation("sum_a").unwrap().code_hash, code_hash(FIXTURE_A, &CommentSyntax::default()));
        let launch = reg.launchable("sum_a").unwrap().launch;
        assert_eq!(launch.program, dir.path().join("./run.sh").to_string_lossy());
        assert_eq!(launch.cwd.as_deref(), Some(dir.path()));

        let copy = dir.path().join("copy.json");
        reg.save(&copy).unwrap();
        let again = Registry::load(&copy).unwrap();
        assert_eq!(again.snapshot_hash(), reg.snapshot_hash());
        assert_eq!(again.environment("local").unwrap().labels["os"], "linux");
    }

    #[test]
    fn shared_registry_snapshots_are_stable() {
        let shared = SharedRegistry::new(Registry::new());
        let before = shared.snapshot();
        shared.update(|r| r.register_abstraction(sum_spec())).unwrap();
        assert!(before.abstraction("sum").is_none());
        assert!(shared.snapshot().abstraction("sum").is_some());
        assert!(shared.update(|r| r.register_abstraction(sum_spec())).is_err());
        assert_eq!(shared.snapshot().abstractions().count(), 1);
    }
}
