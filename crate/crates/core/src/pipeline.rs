//! Declarative analysis pipelines: a YAML or JSON document with global
//! settings and an ordered list of stages, run sequentially.
//!
//! ```yaml
//! name: sum-study
//! seed: 7
//! paths:
//!   registry: corpus/manifest.json
//! stages:
//!   - select: { abstraction: sum, implementations: ["sum_*"], sheets: ["sheets/sum/*.sheet"] }
//!   - execute: { repetitions: 3 }
//!   - analyze: { analyses: [cluster, discrepancy, scores, passk] }
//!   - merge: {}
//!   - export: { format: csv, split: test }
//! ```
//!
//! Relative paths resolve against the pipeline file's directory. The artifact
//! root `paths.home` defaults to `$OBS_HOME`, else `.obs` next to the file.

use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use chrono::Utc;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value as Json};
use thiserror::Error;

use crate::analysis::{
    cluster_by_behavior, detect_nondeterminism, discrepancy_report, plurality_oracle, score_correctness, AnalysisError,
    CsvReport, OracleSource,
};
use crate::arena::transport::{SystemFactory, WorkerFactory};
use crate::arena::{plan_execution, Arena, ExecutionConfig};
use crate::blob::{sha256_hex, BlobStore};
use crate::canonical::ValueComparison;
use crate::corpus::load_registry;
use crate::cube::{Hypercube, SliceFilter, StimulusResponseMatrix};
use crate::dataset::{export_to_path, ExportFormat, ExportOptions, Split, SplitRatios};
use crate::registry::{ImplementationRef, Registry};
use crate::sheet::{parse_sheet, validate_sheet, SequenceSheet};

pub const HOME_ENV: &str = "OBS_HOME";
const STAGE_KINDS: [&str; 5] = ["select", "execute", "analyze", "merge", "export"];
const RESERVED_STAGES: [&str; 1] = ["external"];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("cannot read pipeline {path}: {source}")]
    Read { path: PathBuf, source: io::Error },
}

fn schema<T>(path: impl Into<String>, message: impl Into<String>) -> Result<T, PipelineError> {
    Err(PipelineError::Schema {
        path: path.into(),
        message: message.into(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Paths {
    pub home: PathBuf,
    pub registry: PathBuf,
    /// Hypercube root (holds `srh/` and `blobs/`); defaults to the home itself.
    pub srh: PathBuf,
    pub runs: PathBuf,
    pub blobs: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectStage {
    pub abstraction: String,
    /// Glob patterns over implementation ids.
    #[serde(default = "match_all")]
    pub implementations: Vec<String>,
    /// Glob patterns over sheet files.
    pub sheets: Vec<String>,
    /// Reject sheets with validation findings against the abstraction spec.
    #[serde(default = "yes")]
    pub validate: bool,
}

fn match_all() -> Vec<String> {
    vec!["*".into()]
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnalysisKind {
    Cluster,
    Oracle,
    Scores,
    Discrepancy,
    Nondeterminism,
    Passk,
}

impl AnalysisKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AnalysisKind::Cluster => "cluster",
            AnalysisKind::Oracle => "oracle",
            AnalysisKind::Scores => "scores",
            AnalysisKind::Discrepancy => "discrepancy",
            AnalysisKind::Nondeterminism => "nondeterminism",
            AnalysisKind::Passk => "passk",
        }
    }

    pub const ALL: [AnalysisKind; 6] = [
        AnalysisKind::Cluster,
        AnalysisKind::Oracle,
        AnalysisKind::Scores,
        AnalysisKind::Discrepancy,
        AnalysisKind::Nondeterminism,
        AnalysisKind::Passk,
    ];
}

impl std::str::FromStr for AnalysisKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        AnalysisKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown analysis `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleChoice {
    Expected,
    Plurality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComparisonMode {
    Exact,
    Epsilon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeStage {
    /// Defaults to every analysis the execute stage supports.
    #[serde(default)]
    pub analyses: Vec<AnalysisKind>,
    #[serde(default = "expected_oracle")]
    pub oracle: OracleChoice,
    #[serde(default = "exact")]
    pub comparison: ComparisonMode,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_ks")]
    pub k: Vec<u64>,
}

fn expected_oracle() -> OracleChoice {
    OracleChoice::Expected
}

fn exact() -> ComparisonMode {
    ComparisonMode::Exact
}

fn default_tolerance() -> f64 {
    ValueComparison::DEFAULT_TOLERANCE
}

fn default_ks() -> Vec<u64> {
    vec![1, 2, 5]
}

impl Default for AnalyzeStage {
    fn default() -> Self {
        AnalyzeStage {
            analyses: Vec::new(),
            oracle: expected_oracle(),
            comparison: exact(),
            tolerance: default_tolerance(),
            k: default_ks(),
        }
    }
}

impl AnalyzeStage {
    fn comparison(&self) -> ValueComparison {
        match self.comparison {
            ComparisonMode::Exact => ValueComparison::Exact,
            ComparisonMode::Epsilon => ValueComparison::Epsilon {
                tolerance: self.tolerance,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeStage {
    /// Hypercube root; defaults to `paths.srh`.
    #[serde(default)]
    pub srh: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportStage {
    #[serde(default = "jsonl")]
    pub format: ExportFormat,
    #[serde(default)]
    pub split: Option<Split>,
    #[serde(default = "default_ratios")]
    pub ratios: [f64; 3],
    /// Split seed; defaults to the pipeline seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn jsonl() -> ExportFormat {
    ExportFormat::Jsonl
}

fn default_ratios() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Select(SelectStage),
    Execute(ExecutionConfig),
    Analyze(AnalyzeStage),
    Merge(MergeStage),
    Export(ExportStage),
}

impl Stage {
    pub fn kind(&self) -> &'static str {
        match self {
            Stage::Select(_) => "select",
            Stage::Execute(_) => "execute",
            Stage::Analyze(_) => "analyze",
            Stage::Merge(_) => "merge",
            Stage::Export(_) => "export",
        }
    }
}

/// A validated pipeline with every default filled in and every path absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub name: String,
    pub seed: u64,
    pub paths: Paths,
    pub stages: Vec<Stage>,
}

impl PipelineConfig {
    /// The effective configuration as pretty JSON.
    pub fn effective(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    fn select(&self) -> Option<&SelectStage> {
        self.stages.iter().find_map(|s| match s {
            Stage::Select(s) => Some(s),
            _ => None,
        })
    }
}

/// Where relative paths resolve and which artifact root applies by default.
#[derive(Debug, Clone)]
pub struct ParseContext {
    pub base_dir: PathBuf,
    pub obs_home: Option<PathBuf>,
}

impl ParseContext {
    pub fn new(base_dir: impl Into<PathBuf>) -> Self {
        ParseContext {
            base_dir: base_dir.into(),
            obs_home: None,
        }
    }

    /// Context for a pipeline file, taking the default root from `$OBS_HOME`.
    pub fn for_file(path: &Path) -> Self {
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let base = std::path::absolute(base).unwrap_or_else(|_| base.to_path_buf());
        ParseContext {
            base_dir: base,
            obs_home: std::env::var_os(HOME_ENV)
                .filter(|v| !v.is_empty())
                .map(|v| std::path::absolute(PathBuf::from(&v)).unwrap_or_else(|_| PathBuf::from(v))),
        }
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }
}

pub fn load_pipeline(path: &Path) -> Result<PipelineConfig, PipelineError> {
    let text = fs::read_to_string(path).map_err(|source| PipelineError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_pipeline(&text, &ParseContext::for_file(path))
}

fn take<T: serde::de::DeserializeOwned>(path: &str, value: Json) -> Result<T, PipelineError> {
    serde_json::from_value(value).or_else(|e| schema(path, e.to_string()))
}

/// Parses and validates a pipeline document (YAML or JSON).
pub fn parse_pipeline(text: &str, ctx: &ParseContext) -> Result<PipelineConfig, PipelineError> {
    let yaml: serde_yaml::Value = serde_yaml::from_str(text).or_else(|e| schema("$", e.to_string()))?;
    let doc: Json = serde_json::to_value(yaml).or_else(|e| schema("$", e.to_string()))?;
    let Json::Object(mut root) = doc else {
        return schema("$", "pipeline must be a mapping");
    };
    for key in root.keys() {
        if !["name", "seed", "paths", "stages"].contains(&key.as_str()) {
            return schema(format!("$.{key}"), "unknown field");
        }
    }
    let name: String = match root.remove("name") {
        Some(v) => take("$.name", v)?,
        None => "pipeline".into(),
    };
    let seed: u64 = match root.remove("seed") {
        Some(v) => take("$.seed", v)?,
        None => 0,
    };
    let paths = parse_paths(root.remove("paths").unwrap_or(json!({})), ctx)?;
    let Some(Json::Array(raw_stages)) = root.remove("stages") else {
        return schema("$.stages", "a list of stages is required");
    };

    let mut stages = Vec::new();
    for (i, raw) in raw_stages.into_iter().enumerate() {
        let at = format!("$.stages[{i}]");
        let Json::Object(map) = raw else {
            return schema(at, "stage must be a single-key mapping");
        };
        if map.len() != 1 {
            return schema(at, "stage must be a single-key mapping");
        }
        let (kind, body) = map.into_iter().next().expect("one entry");
        let at = format!("{at}.{kind}");
        let body = match body {
            Json::Null => json!({}),
            other => other,
        };
        let stage = match kind.as_str() {
            "select" => Stage::Select(take(&at, body)?),
            "execute" => {
                let mut body: Map<String, Json> = take(&at, body)?;
                body.entry("seed").or_insert(json!(seed));
                let config: ExecutionConfig = take(&at, Json::Object(body))?;
                config.validate().or_else(|e| schema(&at, e.to_string()))?;
                Stage::Execute(config)
            }
            "analyze" => Stage::Analyze(take(&at, body)?),
            "merge" => Stage::Merge(take(&at, body)?),
            "export" => Stage::Export(take(&at, body)?),
            k if RESERVED_STAGES.contains(&k) => return schema(at, format!("stage `{k}` is reserved and not implemented")),
            k => return schema(at, format!("unknown stage `{k}`; expected one of {}", STAGE_KINDS.join(", "))),
        };
        stages.push(stage);
    }
    let mut config = PipelineConfig {
        name,
        seed,
        paths,
        stages,
    };
    check_order(&config.stages)?;
    fill_defaults(&mut config, ctx)?;
    Ok(config)
}

fn parse_paths(value: Json, ctx: &ParseContext) -> Result<Paths, PipelineError> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct RawPaths {
        home: Option<PathBuf>,
        registry: Option<PathBuf>,
        srh: Option<PathBuf>,
        runs: Option<PathBuf>,
        blobs: Option<PathBuf>,
    }
    let raw: RawPaths = take("$.paths", value)?;
    let home = match raw.home {
        Some(home) => ctx.resolve(&home),
        None => ctx.obs_home.clone().unwrap_or_else(|| ctx.base_dir.join(".obs")),
    };
    let Some(registry) = raw.registry else {
        return schema("$.paths.registry", "a registry or corpus manifest path is required");
    };
    let under_home = |p: Option<PathBuf>, default: &str| match p {
        Some(p) if p.is_absolute() => p,
        Some(p) => ctx.base_dir.join(p),
        None => home.join(default),
    };
    Ok(Paths {
        registry: ctx.resolve(&registry),
        srh: raw.srh.map_or_else(|| home.clone(), |p| under_home(Some(p), "")),
        runs: under_home(raw.runs, "runs"),
        blobs: under_home(raw.blobs, "blobs"),
        home,
    })
}

/// Each stage kind at most once; select then execute first; analyze and
/// merge after execute; export after merge.
fn check_order(stages: &[Stage]) -> Result<(), PipelineError> {
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    for (i, stage) in stages.iter().enumerate() {
        let kind = stage.kind();
        let at = format!("$.stages[{i}].{kind}");
        if !seen.insert(kind) {
            return schema(at, format!("stage `{kind}` appears more than once"));
        }
        let needs: &[&str] = match stage {
            Stage::Select(_) => &[],
            Stage::Execute(_) => &["select"],
            Stage::Analyze(_) | Stage::Merge(_) => &["execute"],
            Stage::Export(_) => &["merge"],
        };
        for need in needs {
            if !seen.contains(need) {
                return schema(at, format!("`{kind}` must come after `{need}`"));
            }
        }
    }
    if !seen.contains("select") {
        return schema("$.stages", "a pipeline needs a select stage");
    }
    Ok(())
}

fn fill_defaults(config: &mut PipelineConfig, ctx: &ParseContext) -> Result<(), PipelineError> {
    let repetitions = config.stages.iter().find_map(|s| match s {
        Stage::Execute(e) => Some(e.repetitions),
        _ => None,
    });
    let seed = config.seed;
    let srh = config.paths.srh.clone();
    for (i, stage) in config.stages.iter_mut().enumerate() {
        let at = format!("$.stages[{i}].{}", stage.kind());
        match stage {
            Stage::Select(select) => {
                if select.abstraction.is_empty() {
                    return schema(at, "abstraction must not be empty");
                }
                if select.sheets.is_empty() {
                    return schema(at, "at least one sheet pattern is required");
                }
                for pattern in &select.implementations {
                    glob::Pattern::new(pattern).or_else(|e| schema(&at, format!("bad pattern `{pattern}`: {e}")))?;
                }
                select.sheets = select
                    .sheets
                    .iter()
                    .map(|p| ctx.resolve(Path::new(p)).to_string_lossy().into_owned())
                    .collect();
            }
            Stage::Execute(_) => {}
            Stage::Analyze(analyze) => {
                let reps = repetitions.unwrap_or(1);
                if analyze.analyses.is_empty() {
                    analyze.analyses = vec![
                        AnalysisKind::Cluster,
                        AnalysisKind::Oracle,
                        AnalysisKind::Scores,
                        AnalysisKind::Discrepancy,
                        AnalysisKind::Passk,
                    ];
                    if reps >= 2 {
                        analyze.analyses.push(AnalysisKind::Nondeterminism);
                    }
                }
                analyze.analyses.sort();
                analyze.analyses.dedup();
                if analyze.analyses.contains(&AnalysisKind::Nondeterminism) && reps < 2 {
                    return schema(at, "nondeterminism needs execute.repetitions >= 2");
                }
                if analyze.k.is_empty() || analyze.k.contains(&0) {
                    return schema(at, "k values must be positive");
                }
                if !(analyze.tolerance.is_finite() && analyze.tolerance >= 0.0) {
                    return schema(at, "tolerance must be a non-negative number");
                }
            }
            Stage::Merge(merge) => {
                merge.srh = Some(merge.srh.as_ref().map_or_else(|| srh.clone(), |p| ctx.resolve(p)));
            }
            Stage::Export(export) => {
                let [train, val, test] = export.ratios;
                SplitRatios::new(train, val, test).or_else(|e| schema(&at, e.to_string()))?;
                export.seed.get_or_insert(seed);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ok,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: String,
    pub status: StageStatus,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_dir: PathBuf,
    /// `succeeded`, or `failed` with partial artifacts left in place.
    pub status: String,
    pub stages: Vec<StageReport>,
}

impl RunReport {
    pub fn succeeded(&self) -> bool {
        self.status == "succeeded"
    }

    /// Process exit status: 0 when every stage succeeded, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.succeeded() {
            0
        } else {
            1
        }
    }
}

/// State threaded through the stages of one run.
struct RunState {
    dir: PathBuf,
    registry: Option<Registry>,
    implementations: Vec<ImplementationRef>,
    sheets: Vec<SequenceSheet>,
    srm: Option<StimulusResponseMatrix>,
    cube: Option<Hypercube>,
    revision: Option<u32>,
}

impl RunState {
    fn write(&self, rel: &str, contents: &str) -> Result<String, String> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| format!("{}: {e}", parent.display()))?;
        }
        fs::write(&path, contents).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(rel.to_string())
    }
}

fn new_run_dir(config: &PipelineConfig) -> io::Result<PathBuf> {
    fs::create_dir_all(&config.paths.runs)?;
    let stamp = Utc::now().format("%Y%m%dT%H%M%S");
    let slug: String = config
        .name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '-' })
        .collect();
    for n in 0.. {
        let suffix = if n == 0 { String::new() } else { format!("-{n}") };
        let dir = config.paths.runs.join(format!("{slug}-{stamp}{suffix}"));
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e),
        }
    }
    unreachable!("run directory numbering is unbounded")
}

/// Runs a pipeline with the default worker factory (processes, plus
/// in-process stubs for `stub` launches).
pub fn run_pipeline(config: &PipelineConfig) -> io::Result<RunReport> {
    run_pipeline_with(config, SystemFactory)
}

/// Runs every stage in order inside a fresh run directory.
///
/// A failing stage stops the run; later stages are reported as skipped and
/// everything written so far stays in place, with `status.json` recording
/// which stage failed. `Err` is returned only when the run directory itself
/// cannot be created.
pub fn run_pipeline_with<F: WorkerFactory + Sync>(config: &PipelineConfig, factory: F) -> io::Result<RunReport> {
    let dir = new_run_dir(config)?;
    let mut state = RunState {
        dir: dir.clone(),
        registry: None,
        implementations: Vec::new(),
        sheets: Vec::new(),
        srm: None,
        cube: None,
        revision: None,
    };
    let arena = Arena::new(factory);
    let arena = match BlobStore::open(&config.paths.blobs) {
        Ok(store) => arena.with_blob_store(store),
        Err(_) => arena,
    };

    let mut stages = Vec::new();
    let mut failed = false;
    let effective = state.write("effective-config.json", &config.effective());
    let mut preamble = StageReport {
        stage: "setup".into(),
        status: StageStatus::Ok,
        artifacts: Vec::new(),
        message: None,
    };
    match effective {
        Ok(a) => preamble.artifacts.push(a),
        Err(e) => {
            preamble.status = StageStatus::Failed;
            preamble.message = Some(e);
            failed = true;
        }
    }
    stages.push(preamble);

    for stage in &config.stages {
        if failed {
            stages.push(StageReport {
                stage: stage.kind().into(),
                status: StageStatus::Skipped,
                artifacts: Vec::new(),
                message: None,
            });
            continue;
        }
        let result = match stage {
            Stage::Select(s) => run_select(&mut state, config, s),
            Stage::Execute(e) => run_execute(&mut state, &arena, e),
            Stage::Analyze(a) => run_analyze(&mut state, a),
            Stage::Merge(m) => run_merge(&mut state, m),
            Stage::Export(x) => run_export(&mut state, config, x),
        };
        stages.push(match result {
            Ok(artifacts) => StageReport {
                stage: stage.kind().into(),
                status: StageStatus::Ok,
                artifacts,
                message: None,
            },
            Err(message) => {
                failed = true;
                StageReport {
                    stage: stage.kind().into(),
                    status: StageStatus::Failed,
                    artifacts: Vec::new(),
                    message: Some(message),
                }
            }
        });
    }
    let report = RunReport {
        run_dir: dir,
        status: if failed { "failed" } else { "succeeded" }.into(),
        stages,
    };
    fs::write(
        report.run_dir.join("status.json"),
        serde_json::to_string_pretty(&report).expect("report serializes") + "\n",
    )?;
    Ok(report)
}

fn run_select(state: &mut RunState, config: &PipelineConfig, select: &SelectStage) -> Result<Vec<String>, String> {
    let registry = load_registry(&config.paths.registry).map_err(|e| e.to_string())?;
    let spec = registry
        .abstraction(&select.abstraction)
        .ok_or_else(|| format!("abstraction `{}` is not registered", select.abstraction))?
        .clone();

    let patterns: Vec<glob::Pattern> = select
        .implementations
        .iter()
        .map(|p| glob::Pattern::new(p).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    // Every pattern must resolve, so a typo in one id is not silently dropped.
    let candidates: Vec<&ImplementationRef> = registry.implementations_of(&select.abstraction).collect();
    if let Some(unresolved) = patterns.iter().find(|p| !candidates.iter().any(|imp| p.matches(&imp.id))) {
        return Err(format!(
            "no `{}` implementation matches `{}`",
            select.abstraction,
            unresolved.as_str()
        ));
    }
    let mut implementations = Vec::new();
    for imp in candidates {
        if patterns.iter().any(|p| p.matches(&imp.id)) {
            implementations.push(registry.launchable(&imp.id).map_err(|e| e.to_string())?);
        }
    }

    let mut files = BTreeSet::new();
    for pattern in &select.sheets {
        let matches = glob::glob(pattern).map_err(|e| format!("bad sheet pattern `{pattern}`: {e}"))?;
        let before = files.len();
        for entry in matches {
            files.insert(entry.map_err(|e| e.to_string())?);
        }
        if files.len() == before {
            return Err(format!("no sheet file matches `{pattern}`"));
        }
    }
    if files.is_empty() {
        return Err(format!("no sheet file matches {:?}", select.sheets));
    }
    let mut sheets = Vec::new();
    let mut sheet_inputs = Vec::new();
    for file in &files {
        let text = fs::read_to_string(file).map_err(|e| format!("{}: {e}", file.display()))?;
        let mut sheet = parse_sheet(&text).map_err(|e| format!("{}: {e}", file.display()))?;
        if sheet.id.is_empty() {
            sheet.id = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        }
        if sheet.abstraction_id.is_empty() {
            sheet.abstraction_id = spec.id.clone();
        }
        if select.validate {
            let report = validate_sheet(&sheet, &spec);
            if !report.is_clean() {
                let findings: Vec<String> = report.findings.iter().map(|f| f.message.clone()).collect();
                return Err(format!("{}: {}", file.display(), findings.join("; ")));
            }
        } else if sheet.abstraction_id != spec.id {
            return Err(format!("{}: sheet targets `{}`", file.display(), sheet.abstraction_id));
        }
        sheet_inputs.push(json!({
            "id": sheet.id,
            "path": file,
            "sha256": sha256_hex(text.as_bytes()),
        }));
        sheets.push(sheet);
    }

    let inputs = json!({
        "registry": config.paths.registry,
        "registry_snapshot_hash": registry.snapshot_hash(),
        "abstraction": spec.id,
        "implementations": implementations
            .iter()
            .map(|i| json!({"id": i.id, "code_hash": i.code_hash}))
            .collect::<Vec<_>>(),
        "sheets": sheet_inputs,
        "seed": config.seed,
    });
    let artifact = state.write("inputs.json", &(serde_json::to_string_pretty(&inputs).expect("json") + "\n"))?;
    state.registry = Some(registry);
    state.implementations = implementations;
    state.sheets = sheets;
    Ok(vec![artifact])
}

fn run_execute<F: WorkerFactory + Sync>(
    state: &mut RunState,
    arena: &Arena<F>,
    config: &ExecutionConfig,
) -> Result<Vec<String>, String> {
    let plan = plan_execution(&state.sheets, &state.implementations, config).map_err(|e| e.to_string())?;
    let srm = arena.execute_plan(&plan, config);
    let artifact = state.write("srm.json", &(srm.to_json() + "\n"))?;
    state.srm = Some(srm);
    Ok(vec![artifact])
}

/// One analysis rendered both ways.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedReport {
    pub json: String,
    pub csv: String,
}

fn rendered<R: Serialize + CsvReport>(report: &R) -> RenderedReport {
    RenderedReport {
        json: serde_json::to_string_pretty(report).expect("report serializes") + "\n",
        csv: report.to_csv_string(),
    }
}

/// Run one analysis over a matrix with the oracle, comparison and k values of `params`.
pub fn render_analysis(
    srm: &StimulusResponseMatrix,
    kind: AnalysisKind,
    params: &AnalyzeStage,
) -> Result<RenderedReport, AnalysisError> {
    let scores = |srm| {
        let oracle;
        let source = match params.oracle {
            OracleChoice::Expected => OracleSource::Expected,
            OracleChoice::Plurality => {
                oracle = plurality_oracle(srm);
                OracleSource::Plurality(&oracle)
            }
        };
        score_correctness(srm, source, params.comparison())
    };
    Ok(match kind {
        AnalysisKind::Cluster => rendered(&cluster_by_behavior(srm)?),
        AnalysisKind::Oracle => rendered(&plurality_oracle(srm)),
        AnalysisKind::Discrepancy => rendered(&discrepancy_report(srm)),
        AnalysisKind::Nondeterminism => rendered(&detect_nondeterminism(srm)?),
        AnalysisKind::Scores => rendered(&scores(srm)?),
        AnalysisKind::Passk => rendered(&scores(srm)?.benchmark(&params.k)?),
    })
}

fn run_analyze(state: &mut RunState, analyze: &AnalyzeStage) -> Result<Vec<String>, String> {
    let srm = state.srm.as_ref().ok_or("no matrix to analyze")?;
    let mut artifacts = Vec::new();
    for kind in &analyze.analyses {
        let name = kind.as_str();
        let report = render_analysis(srm, *kind, analyze).map_err(|e| e.to_string())?;
        artifacts.push(state.write(&format!("reports/{name}.json"), &report.json)?);
        artifacts.push(state.write(&format!("reports/{name}.csv"), &report.csv)?);
    }
    Ok(artifacts)
}

fn run_merge(state: &mut RunState, merge: &MergeStage) -> Result<Vec<String>, String> {
    let srm = state.srm.as_ref().ok_or("no matrix to merge")?;
    let root = merge.srh.as_ref().ok_or("merge target unresolved")?;
    let mut cube = Hypercube::open_or_create(root).map_err(|e| e.to_string())?;
    let revision = cube.merge_srm(srm).map_err(|e| e.to_string())?;
    let record = json!({
        "srh": root,
        "revision": revision.number,
        "added_cells": revision.added_cells,
        "added_sheets": revision.added_sheets,
        "manifest_hash": revision.manifest_hash,
    });
    let artifact = state.write("merge.json", &(serde_json::to_string_pretty(&record).expect("json") + "\n"))?;
    state.revision = Some(revision.number);
    state.cube = Some(cube);
    Ok(vec![artifact])
}

fn run_export(state: &mut RunState, config: &PipelineConfig, export: &ExportStage) -> Result<Vec<String>, String> {
    let cube = state.cube.as_ref().ok_or("no hypercube to export from")?;
    let revision = state.revision.ok_or("no merged revision")?;
    let abstraction = config.select().map(|s| s.abstraction.clone()).unwrap_or_default();
    let [train, val, test] = export.ratios;
    let options = ExportOptions {
        format: export.format,
        split: export.split,
        ratios: SplitRatios::new(train, val, test).map_err(|e| e.to_string())?,
        seed: export.seed.unwrap_or(config.seed),
        filter: SliceFilter::all().abstraction([abstraction.clone()]),
    };
    let rel = format!(
        "exports/{abstraction}-rev{revision}-{}.{}",
        export.split.map_or("all", Split::as_str),
        export.format.extension()
    );
    export_to_path(cube, revision, &options, &state.dir.join(&rel)).map_err(|e| e.to_string())?;
    Ok(vec![rel])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> ParseContext {
        ParseContext {
            base_dir: PathBuf::from("/work"),
            obs_home: None,
        }
    }

    fn err_path(text: &str) -> String {
        match parse_pipeline(text, &ctx()) {
            Err(PipelineError::Schema { path, .. }) => path,
            other => panic!("expected a schema error, got {other:?}"),
        }
    }

    const MINIMAL: &str = "paths: {registry: corpus/manifest.json}\nstages:\n  - select: {abstraction: sum, sheets: [\"sheets/*.sheet\"]}\n  - execute: {}\n";

    #[test]
    fn minimal_pipeline_gets_defaults() {
        let config = parse_pipeline(MINIMAL, &ctx()).unwrap();
        let Stage::Execute(exec) = &config.stages[1] else { panic!() };
        assert_eq!(exec.repetitions, 3);
        assert_eq!(config.paths.home, PathBuf::from("/work/.obs"));
        assert_eq!(config.paths.srh, PathBuf::from("/work/.obs"));
        assert_eq!(config.paths.registry, PathBuf::from("/work/corpus/manifest.json"));
        let Stage::Select(select) = &config.stages[0] else { panic!() };
        assert_eq!(select.implementations, ["*"]);
        assert_eq!(select.sheets, ["/work/sheets/*.sheet"]);
        let effective: Json = serde_json::from_str(&config.effective()).unwrap();
        assert_eq!(effective["stages"][1]["execute"]["repetitions"], 3);
    }

    #[test]
    fn obs_home_and_seed_propagate() {
        let ctx = ParseContext {
            obs_home: Some(PathBuf::from("/data/obs")),
            ..ctx()
        };
        let text = format!("seed: 9\n{MINIMAL}  - analyze: {{}}\n  - merge: {{}}\n  - export: {{split: test}}\n");
        let config = parse_pipeline(&text, &ctx).unwrap();
        assert_eq!(config.paths.runs, PathBuf::from("/data/obs/runs"));
        let Stage::Execute(exec) = &config.stages[1] else { panic!() };
        assert_eq!(exec.seed, 9);
        let Stage::Analyze(analyze) = &config.stages[2] else { panic!() };
        assert!(analyze.analyses.contains(&AnalysisKind::Nondeterminism));
        let Stage::Merge(merge) = &config.stages[3] else { panic!() };
        assert_eq!(merge.srh.as_deref(), Some(Path::new("/data/obs")));
        let Stage::Export(export) = &config.stages[4] else { panic!() };
        assert_eq!((export.seed, export.split, export.format), (Some(9), Some(Split::Test), ExportFormat::Jsonl));
    }

    #[test]
    fn json_documents_parse_too() {
        let text = r#"{"paths": {"registry": "r.json"}, "stages": [{"select": {"abstraction": "sum", "sheets": ["s"]}}]}"#;
        assert_eq!(parse_pipeline(text, &ctx()).unwrap().stages.len(), 1);
    }

    #[test]
    fn schema_errors_carry_stage_paths() {
        let base = "paths: {registry: r.json}\nstages:\n  - select: {abstraction: sum, sheets: [s]}\n";
        assert_eq!(err_path(&format!("{base}  - export: {{}}\n")), "$.stages[1].export");
        assert_eq!(err_path(&format!("{base}  - trainllm: {{}}\n")), "$.stages[1].trainllm");
        assert_eq!(err_path(&format!("{base}  - external: {{}}\n")), "$.stages[1].external");
        assert_eq!(err_path(&format!("{base}  - execute: {{repetitions: 0}}\n")), "$.stages[1].execute");
        assert_eq!(err_path(&format!("{base}  - execute: {{bogus: 1}}\n")), "$.stages[1].execute");
        assert_eq!(
            err_path(&format!("{base}  - execute: {{repetitions: 1}}\n  - analyze: {{analyses: [nondeterminism]}}\n")),
            "$.stages[2].analyze"
        );
        assert_eq!(
            err_path(&format!("{base}  - execute: {{}}\n  - merge: {{}}\n  - export: {{ratios: [0.5, 0.5, 0.5]}}\n")),
            "$.stages[3].export"
        );
        assert_eq!(err_path(&format!("{base}  - select: {{abstraction: sum, sheets: [s]}}\n")), "$.stages[1].select");
        assert_eq!(err_path("stages: []\n"), "$.paths.registry");
        assert_eq!(err_path("paths: {registry: r}\nstages: []\n"), "$.stages");
        assert_eq!(err_path("paths: {registry: r}\nfoo: 1\nstages: []\n"), "$.foo");
        assert_eq!(err_path("paths: {registry: r}\nstages:\n  - {select: {}, execute: {}}\n"), "$.stages[0]");
        assert_eq!(err_path(": : :"), "$");
    }
}
