//! The arena test driver: plans the cartesian product of sheets,
//! implementations and repetitions, drives one fresh worker per cell over the
//! wire protocol, and assembles the results into a stimulus-response matrix.

pub mod protocol;
pub mod transport;

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

use crate::blob::BlobStore;
use crate::canonical::canonicalize;
use crate::cube::{CellKey, StimulusResponseMatrix};
use crate::registry::ImplementationRef;
use crate::sheet::{SequenceSheet, Statement, StatementKind, Value};

use protocol::{Action, Response, SessionError, Status, WorkerSession};
use transport::WorkerFactory;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ArenaError {
    #[error("plan has no sheets or no implementations")]
    EmptyInput,
    #[error("inputs span several abstractions: {0}")]
    MixedAbstractions(String),
    #[error("duplicate {kind} id `{id}` in plan input")]
    DuplicateInput { kind: &'static str, id: String },
    #[error("invalid execution config: {0}")]
    InvalidConfig(String),
}

/// How much non-functional data is kept per observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MeasurementLevel {
    Off,
    /// Wall time only.
    #[default]
    Basic,
    /// Everything the worker reports: wall time, memory, trace.
    Full,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExecutionConfig {
    pub repetitions: u32,
    pub statement_timeout_ms: u64,
    pub sheet_timeout_ms: u64,
    pub parallel_workers: usize,
    pub measurement_level: MeasurementLevel,
    pub environment_id: String,
    pub seed: u64,
    /// Ask the worker for the post-state of the touched instance after every
    /// successful statement.
    pub capture_state: bool,
}

impl Default for ExecutionConfig {
    fn default() -> Self {
        ExecutionConfig {
            repetitions: 3,
            statement_timeout_ms: 5_000,
            sheet_timeout_ms: 30_000,
            parallel_workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            measurement_level: MeasurementLevel::Basic,
            environment_id: "local".to_string(),
            seed: 0,
            capture_state: false,
        }
    }
}

impl ExecutionConfig {
    pub fn validate(&self) -> Result<(), ArenaError> {
        let bad = |m: &str| Err(ArenaError::InvalidConfig(m.to_string()));
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1");
        }
        if self.parallel_workers == 0 {
            return bad("parallel_workers must be at least 1");
        }
        if self.statement_timeout_ms == 0 {
            return bad("statement_timeout_ms must be positive");
        }
        if self.sheet_timeout_ms < self.statement_timeout_ms {
            return bad("sheet_timeout_ms must be at least statement_timeout_ms");
        }
        if self.environment_id.is_empty() {
            return bad("environment_id must not be empty");
        }
        Ok(())
    }

    fn statement_timeout(&self) -> Duration {
        Duration::from_millis(self.statement_timeout_ms)
    }

    fn sheet_timeout(&self) -> Duration {
        Duration::from_millis(self.sheet_timeout_ms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Value,
    Error,
    Timeout,
    Crash,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Value => "value",
            Outcome::Error => "error",
            Outcome::Timeout => "timeout",
            Outcome::Crash => "crash",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metrics {
    pub wall_ns: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mem_bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub row: u32,
    pub outcome: Outcome,
    /// Canonical JSON; present iff `outcome == Value`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<String>,
    /// Present iff `outcome == Error`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_type: Option<String>,
    /// Error message, or a diagnostic for crashes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    /// Canonical post-state snapshot, when the worker supplied one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
}

impl Observation {
    fn bare(row: u32, outcome: Outcome) -> Self {
        Observation {
            row,
            outcome,
            value: None,
            error_type: None,
            message: None,
            state: None,
            metrics: None,
        }
    }

    pub fn value(row: u32, canonical: impl Into<String>) -> Self {
        Observation {
            value: Some(canonical.into()),
            ..Observation::bare(row, Outcome::Value)
        }
    }

    pub fn error(row: u32, error_type: impl Into<String>, message: impl Into<String>) -> Self {
        Observation {
            error_type: Some(error_type.into()),
            message: Some(message.into()),
            ..Observation::bare(row, Outcome::Error)
        }
    }

    pub fn timeout(row: u32) -> Self {
        Observation::bare(row, Outcome::Timeout)
    }

    pub fn crash(row: u32, diagnostic: impl Into<String>) -> Self {
        Observation {
            message: Some(diagnostic.into()),
            ..Observation::bare(row, Outcome::Crash)
        }
    }

    /// The part of an observation that defines behavior: the canonical value,
    /// the error type (message excluded), or the bare outcome.
    pub fn behavior_key(&self) -> String {
        match self.outcome {
            Outcome::Value => format!("value:{}", self.value.as_deref().unwrap_or("null")),
            Outcome::Error => format!("error:{}", self.error_type.as_deref().unwrap_or("")),
            Outcome::Timeout => "timeout".to_string(),
            Outcome::Crash => "crash".to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Complete,
    Aborted,
}

/// Everything observed running one sheet against one implementation once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellRecord {
    pub abstraction_id: String,
    pub implementation_id: String,
    pub sheet_id: String,
    pub repetition: u32,
    pub environment_id: String,
    pub observations: Vec<Observation>,
    pub status: CellStatus,
    pub started_at: DateTime<Utc>,
    pub finished_at: DateTime<Utc>,
}

impl CellRecord {
    pub fn key(&self) -> CellKey {
        CellKey {
            implementation_id: self.implementation_id.clone(),
            sheet_id: self.sheet_id.clone(),
            repetition: self.repetition,
        }
    }

    /// A copy with the non-deterministic fields (timestamps, metrics) cleared.
    pub fn functional(&self) -> CellRecord {
        let epoch = DateTime::<Utc>::UNIX_EPOCH;
        CellRecord {
            observations: self
                .observations
                .iter()
                .map(|o| Observation {
                    metrics: None,
                    ..o.clone()
                })
                .collect(),
            started_at: epoch,
            finished_at: epoch,
            ..self.clone()
        }
    }

    /// Behavior keys of the observations, in row order.
    pub fn behavior(&self) -> Vec<String> {
        self.observations.iter().map(Observation::behavior_key).collect()
    }

    /// Checks ordering and abort invariants.
    pub fn check(&self) -> Result<(), String> {
        for (i, obs) in self.observations.iter().enumerate() {
            if obs.row != i as u32 + 1 {
                return Err(format!("observation {} has row {}", i + 1, obs.row));
            }
            if obs.outcome != Outcome::Value && i + 1 != self.observations.len() {
                return Err(format!("row {} failed but later rows were recorded", obs.row));
            }
        }
        let failed = self.observations.last().is_some_and(|o| o.outcome != Outcome::Value);
        match (failed, self.status) {
            (true, CellStatus::Aborted) | (false, CellStatus::Complete) => Ok(()),
            _ => Err(format!("status {:?} contradicts observations", self.status)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub implementation: usize,
    pub sheet: usize,
    pub repetition: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionPlan {
    pub abstraction_id: String,
    pub sheets: Vec<SequenceSheet>,
    pub implementations: Vec<ImplementationRef>,
    pub repetitions: u32,
    pub tasks: Vec<Task>,
}

impl ExecutionPlan {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Builds the `|sheets| x |impls| x repetitions` task list, shuffled
/// deterministically by `config.seed`.
pub fn plan_execution(
    sheets: &[SequenceSheet],
    impls: &[ImplementationRef],
    config: &ExecutionConfig,
) -> Result<ExecutionPlan, ArenaError> {
    config.validate()?;
    if sheets.is_empty() || impls.is_empty() {
        return Err(ArenaError::EmptyInput);
    }
    let abstraction_id = impls[0].abstraction_id.clone();
    let mut others: Vec<&str> = impls
        .iter()
        .map(|i| i.abstraction_id.as_str())
        .chain(sheets.iter().map(|s| s.abstraction_id.as_str()).filter(|a| !a.is_empty()))
        .filter(|a| *a != abstraction_id)
        .collect();
    if !others.is_empty() {
        others.sort();
        others.dedup();
        return Err(ArenaError::MixedAbstractions(format!("{abstraction_id}, {}", others.join(", "))));
    }
    check_unique("sheet", sheets.iter().map(|s| s.id.as_str()))?;
    check_unique("implementation", impls.iter().map(|i| i.id.as_str()))?;

    let sheets: Vec<SequenceSheet> = sheets
        .iter()
        .map(|s| SequenceSheet {
            abstraction_id: abstraction_id.clone(),
            ..s.clone()
        })
        .collect();
    let mut tasks = Vec::with_capacity(sheets.len() * impls.len() * config.repetitions as usize);
    for implementation in 0..impls.len() {
        for sheet in 0..sheets.len() {
            for repetition in 1..=config.repetitions {
                tasks.push(Task {
                    implementation,
                    sheet,
                    repetition,
                });
            }
        }
    }
    tasks.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    Ok(ExecutionPlan {
        abstraction_id,
        sheets,
        implementations: impls.to_vec(),
        repetitions: config.repetitions,
        tasks,
    })
}

fn check_unique<'a>(kind: &'static str, ids: impl Iterator<Item = &'a str>) -> Result<(), ArenaError> {
    let mut seen = std::collections::BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(ArenaError::DuplicateInput { kind, id: id.to_string() });
        }
    }
    Ok(())
}

/// The test driver: a worker factory plus an optional blob store used to
/// resolve blob arguments.
pub struct Arena<F> {
    factory: F,
    blobs: Option<BlobStore>,
}

enum RowOutput {
    Instance(String),
    Value(Json),
}

impl<F: WorkerFactory> Arena<F> {
    pub fn new(factory: F) -> Self {
        Arena { factory, blobs: None }
    }

    pub fn with_blob_store(mut self, store: BlobStore) -> Self {
        self.blobs = Some(store);
        self
    }

    pub fn blob_root(&self) -> Option<PathBuf> {
        self.blobs.as_ref().map(|b| b.root().to_path_buf())
    }

    /// Runs one sheet against one implementation in a fresh worker.
    ///
    /// Rows run in order; the first row whose outcome is not a value ends the
    /// cell with status `aborted`.
    pub fn execute_cell(
        &self,
        sheet: &SequenceSheet,
        imp: &ImplementationRef,
        repetition: u32,
        config: &ExecutionConfig,
    ) -> CellRecord {
        let started_at = Utc::now();
        let observations = self.run_rows(sheet, imp, config);
        let status = match observations.last() {
            Some(o) if o.outcome != Outcome::Value => CellStatus::Aborted,
            _ => CellStatus::Complete,
        };
        CellRecord {
            abstraction_id: imp.abstraction_id.clone(),
            implementation_id: imp.id.clone(),
            sheet_id: sheet.id.clone(),
            repetition,
            environment_id: config.environment_id.clone(),
            observations,
            status,
            started_at,
            finished_at: Utc::now(),
        }
    }

    fn run_rows(&self, sheet: &SequenceSheet, imp: &ImplementationRef, config: &ExecutionConfig) -> Vec<Observation> {
        let clock = Instant::now();
        let deadline = clock + config.sheet_timeout();
        let budget = || config.statement_timeout().min(deadline.saturating_duration_since(Instant::now()));
        let first_row = sheet.rows.first().map_or(1, |s| s.row);

        let transport = match self.factory.spawn(imp) {
            Ok(t) => t,
            Err(e) => return vec![self.measured(Observation::crash(first_row, e.to_string()), clock, None, config)],
        };
        let mut session = match WorkerSession::handshake(transport, budget()) {
            Ok(s) => s,
            Err(e) => return vec![self.measured(failure(first_row, &e), clock, None, config)],
        };

        let mut observations = Vec::with_capacity(sheet.rows.len());
        let mut outputs: Vec<RowOutput> = Vec::with_capacity(sheet.rows.len());
        for stmt in &sheet.rows {
            let row_clock = Instant::now();
            let timeout = budget();
            if timeout.is_zero() {
                observations.push(self.measured(Observation::timeout(stmt.row), row_clock, None, config));
                session.kill();
                return observations;
            }
            let request = match self.build_request(stmt, &outputs) {
                Ok(r) => r,
                Err(message) => {
                    observations.push(self.measured(Observation::error(stmt.row, "harness", message), row_clock, None, config));
                    break;
                }
            };
            let response = match session.call(request.0, Some(&stmt.operation), request.1.as_deref(), request.2, timeout) {
                Ok(r) => r,
                Err(e) => {
                    observations.push(self.measured(failure(stmt.row, &e), row_clock, None, config));
                    session.kill();
                    return observations;
                }
            };
            let (mut observation, output) = match interpret(stmt, &response) {
                Ok(pair) => pair,
                Err(violation) => {
                    observations.push(self.measured(failure(stmt.row, &violation), row_clock, None, config));
                    session.kill();
                    return observations;
                }
            };

            if config.capture_state && observation.outcome == Outcome::Value && observation.state.is_none() {
                let handle = match (&output, stmt.target) {
                    (Some(RowOutput::Instance(h)), _) => Some(h.clone()),
                    (_, Some(target)) => match outputs.get(target.0 as usize - 1) {
                        Some(RowOutput::Instance(h)) => Some(h.clone()),
                        _ => None,
                    },
                    _ => None,
                };
                if let Some(handle) = handle {
                    match session.call(Action::Inspect, None, Some(&handle), Vec::new(), budget()) {
                        Ok(r) if r.status == Status::Ok => {
                            observation.state = r.state.as_ref().or(r.value.as_ref()).and_then(|s| canonicalize(s).ok());
                        }
                        Ok(_) => {}
                        Err(e) => {
                            observations.push(self.measured(failure(stmt.row, &e), row_clock, None, config));
                            session.kill();
                            return observations;
                        }
                    }
                }
            }

            let failed = observation.outcome != Outcome::Value;
            observations.push(self.measured(observation, row_clock, response.metrics.as_ref(), config));
            if failed {
                break;
            }
            outputs.push(output.expect("value outcomes produce an output"));
        }
        let _ = session.shutdown(budget().max(Duration::from_millis(1)));
        observations
    }

    fn build_request(
        &self,
        stmt: &Statement,
        outputs: &[RowOutput],
    ) -> Result<(Action, Option<String>, Vec<Json>), String> {
        let lookup = |row: u32| outputs.get(row as usize - 1).ok_or_else(|| format!("A{row} has no output"));
        let target = match stmt.target {
            Some(cell) => match lookup(cell.0)? {
                RowOutput::Instance(handle) => Some(handle.clone()),
                RowOutput::Value(_) => return Err(format!("target {cell} is not an instance")),
            },
            None => None,
        };
        let args = stmt
            .args
            .iter()
            .map(|arg| {
                Ok(match arg {
                    Value::Literal(json) => json.clone(),
                    Value::Cell(cell) => match lookup(cell.0)? {
                        RowOutput::Instance(handle) => Json::String(handle.clone()),
                        RowOutput::Value(v) => v.clone(),
                    },
                    Value::Blob(blob) => blob.to_wire(self.blobs.as_ref()),
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        let action = match stmt.kind {
            StatementKind::Create => Action::Create,
            StatementKind::Invoke => Action::Invoke,
        };
        Ok((action, target, args))
    }

    fn measured(
        &self,
        mut observation: Observation,
        clock: Instant,
        reported: Option<&protocol::WireMetrics>,
        config: &ExecutionConfig,
    ) -> Observation {
        let wall_ns = reported
            .and_then(|m| m.wall_ns)
            .unwrap_or_else(|| clock.elapsed().as_nanos() as u64);
        observation.metrics = match config.measurement_level {
            MeasurementLevel::Off => None,
            MeasurementLevel::Basic => Some(Metrics {
                wall_ns,
                mem_bytes: None,
                trace: None,
            }),
            MeasurementLevel::Full => Some(Metrics {
                wall_ns,
                mem_bytes: reported.and_then(|m| m.mem_bytes),
                trace: reported.and_then(|m| m.trace.clone()),
            }),
        };
        observation
    }

    /// Runs every task of the plan, `config.parallel_workers` cells at a time.
    ///
    /// Assembly is keyed by cell coordinates, so the functional payload of
    /// the result does not depend on scheduling.
    pub fn execute_plan(&self, plan: &ExecutionPlan, config: &ExecutionConfig) -> StimulusResponseMatrix
    where
        F: Sync,
    {
        let next = AtomicUsize::new(0);
        let done: Mutex<Vec<CellRecord>> = Mutex::new(Vec::with_capacity(plan.tasks.len()));
        let workers = config.parallel_workers.clamp(1, plan.tasks.len().max(1));
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(task) = plan.tasks.get(i) else { break };
                    let record = self.execute_cell(
                        &plan.sheets[task.sheet],
                        &plan.implementations[task.implementation],
                        task.repetition,
                        config,
                    );
                    done.lock().expect("result lock poisoned").push(record);
                });
            }
        });

        let mut srm = StimulusResponseMatrix::new(&plan.abstraction_id, &config.environment_id);
        for imp in &plan.implementations {
            srm.add_implementation(&imp.id);
        }
        for sheet in &plan.sheets {
            srm.add_sheet(sheet.clone());
        }
        for record in done.into_inner().expect("result lock poisoned") {
            srm.insert(record).expect("plan tasks have distinct coordinates");
        }
        srm
    }
}

fn failure(row: u32, error: &SessionError) -> Observation {
    match error {
        SessionError::Timeout(_) => Observation::timeout(row),
        SessionError::Closed => Observation::crash(row, "worker exited"),
        SessionError::Protocol(m) => Observation::crash(row, format!("protocol violation: {m}")),
        SessionError::Io(m) => Observation::crash(row, format!("worker i/o: {m}")),
    }
}

fn canonical_or_violation(value: Option<&Json>) -> Result<String, SessionError> {
    canonicalize(value.unwrap_or(&Json::Null)).map_err(|e| SessionError::Protocol(e.to_string()))
}

/// Turns a worker response into an observation plus the row's output.
fn interpret(stmt: &Statement, response: &Response) -> Result<(Observation, Option<RowOutput>), SessionError> {
    match response.status {
        Status::Error => {
            let body = response.error.as_ref().expect("checked by Response::parse");
            Ok((Observation::error(stmt.row, &body.kind, &body.message), None))
        }
        Status::Ok => {
            let canonical = canonical_or_violation(response.value.as_ref())?;
            let state = response.state.as_ref().map(|s| canonical_or_violation(Some(s))).transpose()?;
            let output = match stmt.kind {
                StatementKind::Create => RowOutput::Instance(
                    response
                        .handle
                        .clone()
                        .ok_or_else(|| SessionError::Protocol("create reply lacks a handle".into()))?,
                ),
                StatementKind::Invoke => RowOutput::Value(response.value.clone().unwrap_or(Json::Null)),
            };
            let mut observation = Observation::value(stmt.row, canonical);
            observation.state = state;
            Ok((observation, Some(output)))
        }
    }
}
