//! End-to-end pipeline runs over the bundled stub corpus.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use obs_core::analysis::{BehaviorClass, DiscrepancyReport, NondeterminismFlag, ScoreTable};
use obs_core::arena::{CellStatus, Outcome};
use obs_core::cube::{Hypercube, StimulusResponseMatrix};
use obs_core::pipeline::{parse_pipeline, run_pipeline, ParseContext, PipelineConfig, StageStatus};

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn config_from(text: &str, home: &Path) -> PipelineConfig {
    let ctx = ParseContext {
        base_dir: repo().join("pipelines"),
        obs_home: Some(home.to_path_buf()),
    };
    parse_pipeline(text, &ctx).unwrap()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn median(mut xs: Vec<u64>) -> u64 {
    xs.sort();
    xs[xs.len() / 2]
}

#[test]
fn sum_study_end_to_end() {
    let home = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(repo().join("pipelines/sum.yaml")).unwrap();
    let config = config_from(&text, home.path());
    let report = run_pipeline(&config).unwrap();
    assert_eq!(report.exit_code(), 0, "{report:#?}");
    let dir = &report.run_dir;
    for artifact in [
        "effective-config.json",
        "inputs.json",
        "srm.json",
        "reports/cluster.json",
        "reports/cluster.csv",
        "reports/discrepancy.csv",
        "reports/nondeterminism.json",
        "reports/passk.csv",
        "reports/scores.json",
        "merge.json",
        "exports/sum-rev1-all.csv",
        "status.json",
    ] {
        assert!(dir.join(artifact).is_file(), "missing {artifact}");
    }
    let srm = StimulusResponseMatrix::load(&dir.join("srm.json")).unwrap();
    assert_eq!(srm.len(), 6 * 10 * 3);

    // Clusters: brute-force comparison of repetition-1 response vectors.
    let vector = |imp: &str| -> Vec<Vec<String>> {
        srm.sheet_ids().map(|s| srm.get(imp, s, 1).unwrap().behavior()).collect()
    };
    let ids: Vec<String> = srm.implementation_ids().map(str::to_string).collect();
    let mut expected_classes: Vec<Vec<String>> = Vec::new();
    for id in &ids {
        match expected_classes.iter_mut().find(|c| vector(&c[0]) == vector(id)) {
            Some(class) => class.push(id.clone()),
            None => expected_classes.push(vec![id.clone()]),
        }
    }
    let classes: Vec<BehaviorClass> = read_json(&dir.join("reports/cluster.json"));
    let got: BTreeSet<Vec<String>> = classes.iter().map(|c| c.members.clone()).collect();
    assert_eq!(got, expected_classes.into_iter().collect());
    let class_of = |id: &str| classes.iter().position(|c| c.members.iter().any(|m| m == id)).unwrap();
    assert_eq!(class_of("sum_correct"), class_of("sum_duplicate"));
    assert_eq!(class_of("sum_correct"), class_of("sum_slow"));
    assert_ne!(class_of("sum_correct"), class_of("sum_buggy"));
    assert_ne!(class_of("sum_correct"), class_of("sum_crash"));
    assert_ne!(class_of("sum_buggy"), class_of("sum_crash"));

    // Discrepancies: every (sheet, row) whose repetition-1 keys differ.
    let discrepancies: DiscrepancyReport = read_json(&dir.join("reports/discrepancy.json"));
    let mut expected_rows = BTreeSet::new();
    for sheet in srm.sheet_ids() {
        let keys: BTreeSet<String> = ids
            .iter()
            .map(|i| {
                let cell = srm.get(i, sheet, 1).unwrap();
                cell.observations.first().map_or("skipped".into(), |o| o.behavior_key())
            })
            .collect();
        if keys.len() > 1 {
            expected_rows.insert((sheet.to_string(), 1u32));
        }
    }
    let got_rows: BTreeSet<_> = discrepancies.entries.iter().map(|e| (e.sheet_id.clone(), e.row)).collect();
    assert_eq!(got_rows, expected_rows);
    assert_eq!(got_rows.len(), 10, "buggy and crash disagree on every sum sheet");

    let flags: Vec<NondeterminismFlag> = read_json(&dir.join("reports/nondeterminism.json"));
    assert!(flags.iter().any(|f| f.implementation_id == "sum_nondet"));
    assert!(flags.iter().all(|f| f.implementation_id == "sum_nondet"));

    let scores: ScoreTable = read_json(&dir.join("reports/scores.json"));
    let passed: BTreeMap<_, _> = scores.scores.iter().map(|s| (s.implementation_id.as_str(), s.passed())).collect();
    for good in ["sum_correct", "sum_duplicate", "sum_slow"] {
        assert_eq!(passed[good], 10, "{good}");
    }
    assert_eq!(passed["sum_buggy"], 0);
    assert_eq!(passed["sum_crash"], 0);

    let wall = |imp: &str| -> Vec<u64> {
        srm.cells()
            .filter(|c| c.implementation_id == imp)
            .flat_map(|c| c.observations.iter().filter_map(|o| o.metrics.as_ref().map(|m| m.wall_ns)))
            .collect()
    };
    let (slow, fast) = (median(wall("sum_slow")), median(wall("sum_correct")));
    assert!(slow >= 10 * fast.max(1), "slow {slow} vs correct {fast}");

    for cell in srm.cells().filter(|c| c.implementation_id == "sum_crash") {
        assert_eq!(cell.status, CellStatus::Aborted);
        assert_eq!(cell.observations[0].outcome, Outcome::Crash);
    }

    let export = fs::read_to_string(dir.join("exports/sum-rev1-all.csv")).unwrap();
    assert!(export.starts_with("# {"));
    assert_eq!(export.lines().count(), 2 + 180);

    let inputs: serde_json::Value = read_json(&dir.join("inputs.json"));
    assert_eq!(inputs["sheets"].as_array().unwrap().len(), 10);
    assert_eq!(inputs["registry_snapshot_hash"].as_str().unwrap().len(), 64);

    // Re-running the nondeterministic variant at the same coordinates
    // conflicts with the stored cells, so the merge stage must refuse it.
    let again = run_pipeline(&config).unwrap();
    let merge = again.stages.iter().find(|s| s.stage == "merge").unwrap();
    // All 30 random cells repeating exactly has probability 2^-30.
    assert_eq!(merge.status, StageStatus::Failed);
    assert!(merge.message.as_deref().unwrap().contains("sum_nondet"), "{merge:?}");
    assert_eq!(again.exit_code(), 1);
    assert_eq!(Hypercube::open(&config.paths.srh).unwrap().head(), 1);
}

/// Drops the provenance header and the metrics columns from a CSV export.
fn functional_rows(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    let body: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let header = reader.headers().unwrap().clone();
    let keep: Vec<usize> = header
        .iter()
        .enumerate()
        .filter(|(_, h)| !["wall_ns", "mem_bytes", "trace"].contains(h))
        .map(|(i, _)| i)
        .collect();
    reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            keep.iter().map(|&i| r[i].to_string()).collect()
        })
        .collect()
}

#[test]
fn identical_runs_give_identical_functional_exports() {
    let text = r#"
name: repro
seed: 3
paths: {registry: ../corpus/manifest.json}
stages:
  - select: {abstraction: queue, implementations: [queue_correct, queue_duplicate, queue_buggy, queue_crash], sheets: ["../corpus/sheets/queue/*.sheet"]}
  - execute: {repetitions: 2, parallel_workers: 3}
  - analyze: {analyses: [cluster, discrepancy]}
  - merge: {}
  - export: {format: csv}
"#;
    let mut exports = Vec::new();
    for _ in 0..2 {
        let home = tempfile::tempdir().unwrap();
        let report = run_pipeline(&config_from(text, home.path())).unwrap();
        assert!(report.succeeded(), "{report:#?}");
        exports.push(functional_rows(&report.run_dir.join("exports/queue-rev1-all.csv")));
        let cluster = fs::read(report.run_dir.join("reports/cluster.csv")).unwrap();
        exports.push(vec![vec![String::from_utf8(cluster).unwrap()]]);
    }
    assert_eq!(exports[0], exports[2]);
    assert_eq!(exports[1], exports[3]);
    assert!(!exports[0].is_empty());
}

#[test]
fn rerun_in_the_same_home_merges_idempotently() {
    let home = tempfile::tempdir().unwrap();
    let text = r#"
paths: {registry: ../corpus/manifest.json}
stages:
  - select: {abstraction: sort, implementations: [sort_correct, sort_buggy, sort_crash], sheets: ["../corpus/sheets/sort/*.sheet"]}
  - execute: {repetitions: 2}
  - merge: {}
  - export: {format: jsonl}
"#;
    let config = config_from(text, home.path());
    let first = run_pipeline(&config).unwrap();
    let second = run_pipeline(&config).unwrap();
    assert!(first.succeeded() && second.succeeded(), "{second:#?}");
    assert_ne!(first.run_dir, second.run_dir);
    let merge: serde_json::Value = read_json(&second.run_dir.join("merge.json"));
    assert_eq!((merge["revision"].as_u64(), merge["added_cells"].as_u64()), (Some(2), Some(0)));
    let rows = |dir: &Path, rev: u32| fs::read_to_string(dir.join(format!("exports/sort-rev{rev}-all.jsonl"))).unwrap().lines().count();
    assert_eq!(rows(&first.run_dir, 1), rows(&second.run_dir, 2));
    assert_eq!(Hypercube::open(&config.paths.srh).unwrap().head(), 2);
}

#[test]
fn unresolvable_filter_fails_select_and_keeps_partial_artifacts() {
    let home = tempfile::tempdir().unwrap();
    let text = r#"
paths: {registry: ../corpus/manifest.json}
stages:
  - select: {abstraction: sum, implementations: ["nope_*"], sheets: ["../corpus/sheets/sum/*.sheet"]}
  - execute: {}
  - merge: {}
"#;
    let report = run_pipeline(&config_from(text, home.path())).unwrap();
    assert_eq!(report.exit_code(), 1);
    let statuses: Vec<StageStatus> = report.stages.iter().map(|s| s.status).collect();
    assert_eq!(
        statuses,
        [StageStatus::Ok, StageStatus::Failed, StageStatus::Skipped, StageStatus::Skipped]
    );
    assert!(report.stages[1].message.as_deref().unwrap().contains("nope_*"));
    let status: serde_json::Value = read_json(&report.run_dir.join("status.json"));
    assert_eq!(status["status"], "failed");
    assert!(report.run_dir.join("effective-config.json").is_file());
    assert!(!report.run_dir.join("srm.json").exists());
}

#[test]
fn queue_plurality_pipeline() {
    let home = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(repo().join("pipelines/queue.yaml")).unwrap();
    let report = run_pipeline(&config_from(&text, home.path())).unwrap();
    assert!(report.succeeded(), "{report:#?}");
    let classes: Vec<BehaviorClass> = read_json(&report.run_dir.join("reports/cluster.json"));
    let members: Vec<Vec<String>> = classes.into_iter().map(|c| c.members).collect();
    assert_eq!(
        members,
        [vec!["queue_buggy".to_string()], vec!["queue_correct".into(), "queue_duplicate".into()], vec!["queue_crash".into()]]
    );
    let scores: ScoreTable = read_json(&report.run_dir.join("reports/scores.json"));
    assert_eq!(scores.source, "plurality");
    assert_eq!(scores.correct_ids(), ["queue_correct", "queue_duplicate"]);
    assert!(report.run_dir.join("exports/queue-rev1-train.jsonl").is_file());
}
