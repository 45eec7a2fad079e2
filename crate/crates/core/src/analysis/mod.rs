//! Behavioral analyses over a stimulus-response matrix.
//!
//! Repetition 1 defines an implementation's functional behavior. Further
//! repetitions only feed nondeterminism detection (and metrics elsewhere).
//! All functions here are pure over an immutable matrix.

mod passk;
mod report;

pub use passk::{pass_at_k, BenchmarkReport, PassAtK};
pub use report::CsvReport;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::arena::{CellRecord, Outcome};
use crate::blob::sha256_hex;
use crate::canonical::{canonicalize, ValueComparison};
use crate::cube::StimulusResponseMatrix;

/// Behavior key used where a row was never reached because the cell aborted earlier.
pub const SKIPPED: &str = "skipped";
/// Behavior key used where the repetition-1 cell does not exist at all.
pub const MISSING: &str = "missing";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("implementation `{implementation}` has no repetition-1 cell for sheet `{sheet}`")]
    IncompleteRow { implementation: String, sheet: String },
    #[error("unknown implementation `{0}`")]
    UnknownImplementation(String),
    #[error("no oracle available: {0}")]
    NoOracle(String),
    #[error("pass@k undefined for n={n}, c={c}, k={k} (need 0 <= c <= n and 1 <= k <= n)")]
    Domain { n: u64, c: u64, k: u64 },
    #[error("nondeterminism needs at least 2 repetitions, matrix has {0}")]
    InsufficientRepetitions(u32),
}

fn rep1<'a>(srm: &'a StimulusResponseMatrix, implementation: &str, sheet: &str) -> Result<&'a CellRecord, AnalysisError> {
    srm.get(implementation, sheet, 1).ok_or_else(|| AnalysisError::IncompleteRow {
        implementation: implementation.to_string(),
        sheet: sheet.to_string(),
    })
}

/// Number of rows worth reporting for a sheet: its statement count when the
/// sheet is embedded, else the longest observation list seen.
fn row_count(srm: &StimulusResponseMatrix, sheet_id: &str) -> u32 {
    let observed = srm
        .cells()
        .filter(|c| c.sheet_id == sheet_id)
        .map(|c| c.observations.len() as u32)
        .max()
        .unwrap_or(0);
    srm.sheet(sheet_id).map_or(observed, |s| (s.rows.len() as u32).max(observed))
}

fn row_key(cell: Option<&CellRecord>, row: u32) -> String {
    match cell {
        None => MISSING.to_string(),
        Some(cell) => cell
            .observations
            .get(row as usize - 1)
            .map_or_else(|| SKIPPED.to_string(), |o| o.behavior_key()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehavioralFingerprint {
    pub implementation_id: String,
    /// SHA-256 over the ordered sheet ids the fingerprint covers.
    pub sheet_set_hash: String,
    pub fingerprint: String,
}

fn sheet_set_hash(srm: &StimulusResponseMatrix) -> String {
    let ids: Vec<&str> = srm.sheet_ids().collect();
    sha256_hex(canonicalize(&json!(ids)).expect("strings only").as_bytes())
}

/// Hashes the repetition-1 behavior of one implementation over every sheet of the matrix.
///
/// The hashed document is the canonical JSON `[[sheet_id, [key, ...]], ...]`
/// in sheet-id order, where each key is a value, an error type or a bare
/// outcome. Error messages, state and metrics do not participate.
pub fn fingerprint(srm: &StimulusResponseMatrix, implementation_id: &str) -> Result<BehavioralFingerprint, AnalysisError> {
    if !srm.implementation_ids().any(|i| i == implementation_id) {
        return Err(AnalysisError::UnknownImplementation(implementation_id.to_string()));
    }
    let mut doc = Vec::new();
    for sheet in srm.sheet_ids() {
        let cell = rep1(srm, implementation_id, sheet)?;
        doc.push(json!([sheet, cell.behavior()]));
    }
    let bytes = canonicalize(&json!(doc)).expect("strings only");
    Ok(BehavioralFingerprint {
        implementation_id: implementation_id.to_string(),
        sheet_set_hash: sheet_set_hash(srm),
        fingerprint: sha256_hex(bytes.as_bytes()),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorClass {
    pub fingerprint: String,
    /// Sorted member ids.
    pub members: Vec<String>,
}

/// Observational-equivalence classes: implementations with equal fingerprints.
/// Classes are ordered by their smallest member.
pub fn cluster_by_behavior(srm: &StimulusResponseMatrix) -> Result<Vec<BehaviorClass>, AnalysisError> {
    let mut by_print: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for id in srm.implementation_ids() {
        let fp = fingerprint(srm, id)?;
        by_print.entry(fp.fingerprint).or_default().push(id.to_string());
    }
    let mut classes: Vec<BehaviorClass> = by_print
        .into_iter()
        .map(|(fingerprint, members)| BehaviorClass { fingerprint, members })
        .collect();
    classes.sort_by(|a, b| a.members[0].cmp(&b.members[0]));
    Ok(classes)
}

/// One representative per behavior class (its smallest member).
pub fn dedup_behavioral(srm: &StimulusResponseMatrix) -> Result<Vec<String>, AnalysisError> {
    Ok(cluster_by_behavior(srm)?.into_iter().map(|c| c.members[0].clone()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleStatus {
    Resolved,
    Tie,
    Unresolved,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleRow {
    pub sheet_id: String,
    pub row: u32,
    pub status: OracleStatus,
    /// The winning canonical value, when resolved.
    pub expected: Option<String>,
    /// Votes for the leading value (for a tie, the shared top count).
    pub support: usize,
    /// Canonical value to vote count, over value outcomes only.
    pub votes: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleTable {
    pub abstraction_id: String,
    pub implementations: usize,
    pub rows: Vec<OracleRow>,
}

impl OracleTable {
    pub fn get(&self, sheet_id: &str, row: u32) -> Option<&OracleRow> {
        self.rows.iter().find(|r| r.sheet_id == sheet_id && r.row == row)
    }

    /// Resolved values of one sheet as row -> canonical value.
    pub fn expected_for(&self, sheet_id: &str) -> BTreeMap<u32, String> {
        self.rows
            .iter()
            .filter(|r| r.sheet_id == sheet_id)
            .filter_map(|r| r.expected.clone().map(|v| (r.row, v)))
            .collect()
    }
}

/// Differential pseudo-oracle: per (sheet, row), the canonical value with a
/// strict plurality among repetition-1 value outcomes. Missing cells and
/// non-value outcomes do not vote.
pub fn plurality_oracle(srm: &StimulusResponseMatrix) -> OracleTable {
    let implementations: Vec<&str> = srm.implementation_ids().collect();
    let mut rows = Vec::new();
    for sheet in srm.sheet_ids() {
        for row in 1..=row_count(srm, sheet) {
            let mut votes: BTreeMap<String, usize> = BTreeMap::new();
            for imp in &implementations {
                let obs = srm.get(imp, sheet, 1).and_then(|c| c.observations.get(row as usize - 1));
                if let Some(value) = obs.filter(|o| o.outcome == Outcome::Value).and_then(|o| o.value.clone()) {
                    *votes.entry(value).or_default() += 1;
                }
            }
            let top = votes.values().copied().max().unwrap_or(0);
            let leaders: Vec<&String> = votes.iter().filter(|(_, &n)| n == top).map(|(v, _)| v).collect();
            let (status, expected) = match leaders.as_slice() {
                [] => (OracleStatus::Unresolved, None),
                [only] => (OracleStatus::Resolved, Some((*only).clone())),
                _ => (OracleStatus::Tie, None),
            };
            rows.push(OracleRow {
                sheet_id: sheet.to_string(),
                row,
                status,
                expected,
                support: top,
                votes,
            });
        }
    }
    OracleTable {
        abstraction_id: srm.abstraction_id.clone(),
        implementations: implementations.len(),
        rows,
    }
}

/// Where expected values come from. The two sources are never mixed in one scoring.
#[derive(Debug, Clone, Copy)]
pub enum OracleSource<'a> {
    /// The `@expect` columns embedded in the sheets.
    Expected,
    /// Resolved rows of a plurality oracle.
    Plurality(&'a OracleTable),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SheetScore {
    pub sheet_id: String,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImplementationScore {
    pub implementation_id: String,
    /// One entry per scored sheet, ordered by sheet id.
    pub sheets: Vec<SheetScore>,
}

impl ImplementationScore {
    pub fn passed(&self) -> usize {
        self.sheets.iter().filter(|s| s.passed).count()
    }

    pub fn all_passed(&self) -> bool {
        !self.sheets.is_empty() && self.sheets.iter().all(|s| s.passed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub abstraction_id: String,
    pub source: String,
    pub comparison: ValueComparison,
    /// Sheets that have at least one expected value; others are not scored.
    pub scored_sheets: Vec<String>,
    pub scores: Vec<ImplementationScore>,
}

impl ScoreTable {
    /// Ids of implementations that pass every scored sheet.
    pub fn correct_ids(&self) -> Vec<String> {
        self.scores
            .iter()
            .filter(|s| s.all_passed())
            .map(|s| s.implementation_id.clone())
            .collect()
    }

    pub fn benchmark(&self, ks: &[u64]) -> Result<BenchmarkReport, AnalysisError> {
        BenchmarkReport::new(&self.abstraction_id, self.correct_ids(), self.scores.len() as u64, ks)
    }
}

/// Scores every implementation on every sheet that has expected values.
///
/// A sheet passes iff the repetition-1 cell exists and every row with an
/// expected value holds a matching value under `comparison`. An abort at or
/// before an expected row therefore fails the sheet; an abort on a row with
/// no expectation (an anticipated error reply, say) does not.
pub fn score_correctness(
    srm: &StimulusResponseMatrix,
    source: OracleSource<'_>,
    comparison: ValueComparison,
) -> Result<ScoreTable, AnalysisError> {
    let mut expected: BTreeMap<String, BTreeMap<u32, String>> = BTreeMap::new();
    for sheet in srm.sheet_ids() {
        let rows = match source {
            OracleSource::Expected => srm.sheet(sheet).map(|s| s.expected.clone()).unwrap_or_default(),
            OracleSource::Plurality(table) => table.expected_for(sheet),
        };
        if !rows.is_empty() {
            expected.insert(sheet.to_string(), rows);
        }
    }
    if expected.is_empty() {
        return Err(AnalysisError::NoOracle(match source {
            OracleSource::Expected => "no sheet carries expected values".into(),
            OracleSource::Plurality(_) => "the plurality oracle resolved no rows".into(),
        }));
    }
    let scores = srm
        .implementation_ids()
        .map(|imp| ImplementationScore {
            implementation_id: imp.to_string(),
            sheets: expected
                .iter()
                .map(|(sheet, rows)| SheetScore {
                    sheet_id: sheet.clone(),
                    passed: srm.get(imp, sheet, 1).is_some_and(|cell| passes(cell, rows, comparison)),
                })
                .collect(),
        })
        .collect();
    Ok(ScoreTable {
        abstraction_id: srm.abstraction_id.clone(),
        source: match source {
            OracleSource::Expected => "expected".into(),
            OracleSource::Plurality(_) => "plurality".into(),
        },
        comparison,
        scored_sheets: expected.into_keys().collect(),
        scores,
    })
}

fn passes(cell: &CellRecord, expected: &BTreeMap<u32, String>, comparison: ValueComparison) -> bool {
    expected.iter().all(|(row, want)| {
            cell.observations
                .get(*row as usize - 1)
                .and_then(|o| o.value.as_deref())
                .is_some_and(|got| comparison.matches(want, got))
        })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NondeterminismFlag {
    pub implementation_id: String,
    pub sheet_id: String,
    pub repetitions: u32,
    /// Number of distinct behavior sequences across repetitions.
    pub distinct_behaviors: usize,
}

/// Flags (implementation, sheet) pairs whose behavior differs across
/// repetitions. Timing, memory and error wording never count as differences.
pub fn detect_nondeterminism(srm: &StimulusResponseMatrix) -> Result<Vec<NondeterminismFlag>, AnalysisError> {
    let max = srm.max_repetition();
    if max < 2 {
        return Err(AnalysisError::InsufficientRepetitions(max));
    }
    // (implementation, sheet) -> (repetitions seen, distinct behaviors)
    type Seen = (u32, BTreeSet<Vec<String>>);
    let mut groups: BTreeMap<(&str, &str), Seen> = BTreeMap::new();
    for cell in srm.cells() {
        let entry = groups.entry((&cell.implementation_id, &cell.sheet_id)).or_default();
        entry.0 += 1;
        entry.1.insert(cell.behavior());
    }
    Ok(groups
        .into_iter()
        .filter(|(_, (_, behaviors))| behaviors.len() > 1)
        .map(|((imp, sheet), (repetitions, behaviors))| NondeterminismFlag {
            implementation_id: imp.to_string(),
            sheet_id: sheet.to_string(),
            repetitions,
            distinct_behaviors: behaviors.len(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeClass {
    /// Behavior key, or `skipped` / `missing`.
    pub outcome: String,
    pub members: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub sheet_id: String,
    pub row: u32,
    /// Ordered by outcome key.
    pub classes: Vec<OutcomeClass>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscrepancyReport {
    pub abstraction_id: String,
    pub implementations: Vec<String>,
    pub entries: Vec<Discrepancy>,
}

impl DiscrepancyReport {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// N-version comparison: every (sheet, row) where repetition-1 outcomes
/// disagree, grouped by outcome.
///
/// Rows after an abort count as `skipped` and absent cells as `missing`, so
/// the report is empty exactly when all implementations behave identically.
pub fn discrepancy_report(srm: &StimulusResponseMatrix) -> DiscrepancyReport {
    let implementations: Vec<String> = srm.implementation_ids().map(str::to_string).collect();
    let mut entries = Vec::new();
    if implementations.len() >= 2 {
        for sheet in srm.sheet_ids() {
            for row in 1..=row_count(srm, sheet) {
                let mut classes: BTreeMap<String, Vec<String>> = BTreeMap::new();
                for imp in &implementations {
                    classes.entry(row_key(srm.get(imp, sheet, 1), row)).or_default().push(imp.clone());
                }
                if classes.len() > 1 {
                    entries.push(Discrepancy {
                        sheet_id: sheet.to_string(),
                        row,
                        classes: classes
                            .into_iter()
                            .map(|(outcome, members)| OutcomeClass { outcome, members })
                            .collect(),
                    });
                }
            }
        }
    }
    DiscrepancyReport {
        abstraction_id: srm.abstraction_id.clone(),
        implementations,
        entries,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arena::{CellStatus, Observation};
    use crate::sheet::parse_sheet;
    use chrono::Utc;

    fn cell(imp: &str, sheet: &str, rep: u32, obs: Vec<Observation>) -> CellRecord {
        let status = if obs.last().is_some_and(|o| o.outcome != Outcome::Value) {
            CellStatus::Aborted
        } else {
            CellStatus::Complete
        };
        CellRecord {
            abstraction_id: "sum".into(),
            implementation_id: imp.into(),
            sheet_id: sheet.into(),
            repetition: rep,
            environment_id: "local".into(),
            observations: obs,
            status,
            started_at: Utc::now(),
            finished_at: Utc::now(),
        }
    }

    fn values(vs: &[&str]) -> Vec<Observation> {
        vs.iter().enumerate().map(|(i, v)| Observation::value(i as u32 + 1, *v)).collect()
    }

    /// Three impls over sheets s0..s2 where impl `c` answers sheet i with `v_i + offset`.
    fn sum_matrix(offsets: &[(&str, i64)]) -> StimulusResponseMatrix {
        let mut srm = StimulusResponseMatrix::new("sum", "local");
        for i in 0..3i64 {
            let mut sheet = parse_sheet(&format!("@id s{i}\n@expect A1 {}\nA1, invoke, sum, {i}, 5", i + 5)).unwrap();
            sheet.abstraction_id = "sum".into();
            srm.add_sheet(sheet);
            for (imp, off) in offsets {
                srm.insert(cell(imp, &format!("s{i}"), 1, values(&[&(i + 5 + off).to_string()]))).unwrap();
            }
        }
        srm
    }

    #[test]
    fn fingerprints_follow_behavior() {
        let srm = sum_matrix(&[("a", 0), ("b", 0), ("c", 1)]);
        let fa = fingerprint(&srm, "a").unwrap();
        assert_eq!(fa.fingerprint, fingerprint(&srm, "b").unwrap().fingerprint);
        assert_ne!(fa.fingerprint, fingerprint(&srm, "c").unwrap().fingerprint);
        assert_eq!(fa.fingerprint.len(), 64);
        assert!(matches!(fingerprint(&srm, "zz"), Err(AnalysisError::UnknownImplementation(_))));
    }

    #[test]
    fn missing_cell_is_incomplete() {
        let mut srm = sum_matrix(&[("a", 0)]);
        srm.insert(cell("b", "s0", 1, values(&["5"]))).unwrap();
        assert!(matches!(fingerprint(&srm, "b"), Err(AnalysisError::IncompleteRow { .. })));
        assert!(cluster_by_behavior(&srm).is_err());
    }

    #[test]
    fn error_messages_do_not_split_classes() {
        let mut srm = StimulusResponseMatrix::new("sum", "local");
        srm.insert(cell("a", "s", 1, vec![Observation::error(1, "overflow", "too big")])).unwrap();
        srm.insert(cell("b", "s", 1, vec![Observation::error(1, "overflow", "out of range")])).unwrap();
        srm.insert(cell("c", "s", 1, vec![Observation::crash(1, "exit 3")])).unwrap();
        let classes = cluster_by_behavior(&srm).unwrap();
        assert_eq!(classes.len(), 2);
        assert_eq!(classes[0].members, ["a", "b"]);
    }

    #[test]
    fn clusters_and_dedup() {
        let srm = sum_matrix(&[("zeta", 0), ("alpha", 0), ("off", 1)]);
        let classes = cluster_by_behavior(&srm).unwrap();
        let members: Vec<_> = classes.iter().map(|c| c.members.clone()).collect();
        assert_eq!(members, vec![vec!["alpha".to_string(), "zeta".to_string()], vec!["off".to_string()]]);
        assert_eq!(dedup_behavioral(&srm).unwrap(), ["alpha", "off"]);
    }

    #[test]
    fn oracle_statuses() {
        let mut srm = StimulusResponseMatrix::new("sum", "local");
        for (imp, v) in [("a", "8"), ("b", "8"), ("c", "7")] {
            srm.insert(cell(imp, "maj", 1, values(&[v]))).unwrap();
        }
        for (imp, v) in [("a", "8"), ("b", "7")] {
            srm.insert(cell(imp, "tie", 1, values(&[v]))).unwrap();
        }
        srm.insert(cell("c", "tie", 1, vec![Observation::timeout(1)])).unwrap();
        srm.insert(cell("a", "none", 1, vec![Observation::timeout(1)])).unwrap();
        srm.insert(cell("b", "none", 1, vec![Observation::crash(1, "")])).unwrap();
        let table = plurality_oracle(&srm);
        let maj = table.get("maj", 1).unwrap();
        assert_eq!((maj.status, maj.expected.as_deref(), maj.support), (OracleStatus::Resolved, Some("8"), 2));
        assert_eq!(maj.votes.values().sum::<usize>(), 3);
        assert_eq!(table.get("tie", 1).unwrap().status, OracleStatus::Tie);
        let none = table.get("none", 1).unwrap();
        assert_eq!((none.status, none.support), (OracleStatus::Unresolved, 0));
    }

    #[test]
    fn scoring_against_expected_and_plurality() {
        let srm = sum_matrix(&[("a", 0), ("b", 0), ("off", 1)]);
        let table = score_correctness(&srm, OracleSource::Expected, ValueComparison::Exact).unwrap();
        assert_eq!(table.scored_sheets, ["s0", "s1", "s2"]);
        assert_eq!(table.correct_ids(), ["a", "b"]);
        assert_eq!(table.scores[2].passed(), 0);
        let oracle = plurality_oracle(&srm);
        let by_vote = score_correctness(&srm, OracleSource::Plurality(&oracle), ValueComparison::Exact).unwrap();
        assert_eq!(by_vote.scores, table.scores);
        let bench = table.benchmark(&[1, 2]).unwrap();
        assert!((bench.results[0].pass_at_k - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(bench.results[1].pass_at_k, 1.0);
    }

    #[test]
    fn aborted_cell_fails_and_no_oracle_errors() {
        let mut srm = StimulusResponseMatrix::new("sum", "local");
        srm.add_sheet(parse_sheet("@id s\n@expect A1 3\nA1, invoke, sum, 1, 2").unwrap());
        srm.insert(cell("a", "s", 1, vec![Observation::error(1, "overflow", "")])).unwrap();
        let table = score_correctness(&srm, OracleSource::Expected, ValueComparison::Exact).unwrap();
        assert!(!table.scores[0].sheets[0].passed);
        let oracle = plurality_oracle(&srm);
        assert!(matches!(
            score_correctness(&srm, OracleSource::Plurality(&oracle), ValueComparison::Exact),
            Err(AnalysisError::NoOracle(_))
        ));
        let bare = sum_matrix(&[("a", 0)]).functional();
        let mut no_expect = StimulusResponseMatrix::new("sum", "local");
        for c in bare.cells() {
            no_expect.insert(c.clone()).unwrap();
        }
        assert!(matches!(
            score_correctness(&no_expect, OracleSource::Expected, ValueComparison::Exact),
            Err(AnalysisError::NoOracle(_))
        ));
    }

    #[test]
    fn epsilon_scoring() {
        let mut srm = StimulusResponseMatrix::new("sum", "local");
        srm.add_sheet(parse_sheet("@id s\n@expect A1 0.3\nA1, invoke, sum, 0.1, 0.2").unwrap());
        srm.insert(cell("a", "s", 1, values(&["0.30000000000000004"]))).unwrap();
        assert!(!score_correctness(&srm, OracleSource::Expected, ValueComparison::Exact).unwrap().scores[0].all_passed());
        assert!(score_correctness(&srm, OracleSource::Expected, ValueComparison::epsilon()).unwrap().scores[0].all_passed());
    }

    #[test]
    fn nondeterminism_ignores_metrics_and_wording() {
        let mut srm = StimulusResponseMatrix::new("sum", "local");
        for rep in 1..=3 {
            let mut timed = values(&["8"]);
            timed[0].metrics = Some(crate::arena::Metrics {
                wall_ns: rep as u64 * 1000,
                mem_bytes: None,
                trace: None,
            });
            srm.insert(cell("det", "s", rep, timed)).unwrap();
            srm.insert(cell("err", "s", rep, vec![Observation::error(1, "x", format!("attempt {rep}"))])).unwrap();
            srm.insert(cell("rand", "s", rep, values(&[if rep == 2 { "9" } else { "8" }]))).unwrap();
        }
        let flags = detect_nondeterminism(&srm).unwrap();
        assert_eq!(flags.len(), 1);
        assert_eq!((flags[0].implementation_id.as_str(), flags[0].distinct_behaviors), ("rand", 2));
        let single = sum_matrix(&[("a", 0)]);
        assert_eq!(detect_nondeterminism(&single), Err(AnalysisError::InsufficientRepetitions(1)));
    }

    #[test]
    fn discrepancies_cover_aborts() {
        let mut srm = StimulusResponseMatrix::new("queue", "local");
        let mk = |imp: &str, obs| {
            let mut c = cell(imp, "q", 1, obs);
            c.abstraction_id = "queue".into();
            c
        };
        srm.insert(mk("a", values(&["null", "null", "1", "2"]))).unwrap();
        srm.insert(mk("b", values(&["null", "null", "1", "1"]))).unwrap();
        srm.insert(mk("c", vec![Observation::value(1, "null"), Observation::crash(2, "")])).unwrap();
        let report = discrepancy_report(&srm);
        let rows: Vec<u32> = report.entries.iter().map(|e| e.row).collect();
        assert_eq!(rows, [2, 3, 4]);
        let last = &report.entries[2];
        let outcomes: Vec<&str> = last.classes.iter().map(|c| c.outcome.as_str()).collect();
        assert_eq!(outcomes, [SKIPPED, "value:1", "value:2"]);

        let same = sum_matrix(&[("a", 0), ("b", 0)]);
        assert!(discrepancy_report(&same).is_empty());
        assert_eq!(cluster_by_behavior(&same).unwrap().len(), 1);
    }
}
