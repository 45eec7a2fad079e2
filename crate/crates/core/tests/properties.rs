//! Property tests for the library-wide invariants.

use std::collections::{BTreeMap, BTreeSet};

use chrono::Utc;
use proptest::prelude::*;
use proptest::strategy::ValueTree;
use serde_json::Value as Json;

use obs_core::analysis::{
    cluster_by_behavior, discrepancy_report, fingerprint, pass_at_k, plurality_oracle, score_correctness,
    OracleSource, OracleStatus,
};
use obs_core::arena::transport::StubFactory;
use obs_core::arena::{Arena, CellRecord, CellStatus, ExecutionConfig, Observation, Outcome};
use obs_core::canonical::{canonicalize, canonicalize_str, ValueComparison};
use obs_core::cube::{to_frame, Hypercube, SliceFilter, StimulusResponseMatrix};
use obs_core::dataset::{assign_split, SplitRatios};
use obs_core::registry::{code_hash, dedup_syntactic, normalize_source, CommentSyntax, ImplementationRef, LaunchSpec, Origin};
use obs_core::sheet::{parse_sheet, CellRef, SequenceSheet, Statement, StatementKind, Value};

fn json_leaf() -> impl Strategy<Value = Json> {
    prop_oneof![
        Just(Json::Null),
        any::<bool>().prop_map(Json::Bool),
        any::<i64>().prop_map(Json::from),
        (-1e12f64..1e12).prop_map(Json::from),
        "[ -~]{0,8}".prop_map(Json::String),
        "\\PC{0,4}".prop_map(Json::String),
    ]
}

fn json_value() -> impl Strategy<Value = Json> {
    json_leaf().prop_recursive(3, 24, 4, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..4).prop_map(Json::Array),
            prop::collection::btree_map("[a-z\"\\\\ ]{0,4}", inner, 0..4)
                .prop_map(|m| Json::Object(m.into_iter().collect())),
        ]
    })
}

/// Rows of a sheet: each row is a create or an invoke, invokes may target an
/// earlier create and pass literals or references to earlier rows.
fn sheet_strategy() -> impl Strategy<Value = SequenceSheet> {
    let row = (
        any::<bool>(),
        "[a-z][a-z0-9_]{0,6}",
        any::<prop::sample::Index>(),
        prop::collection::vec(prop_oneof![json_value().prop_map(Some), Just(None)], 0..3),
        any::<prop::sample::Index>(),
    );
    (
        "[a-z][a-z0-9-]{0,8}",
        "[a-z][a-z0-9_]{0,6}",
        prop::collection::vec(row, 1..8),
        prop::collection::btree_map(0usize..64, json_value(), 0..3),
    )
        .prop_map(|(id, abstraction, rows, expect)| {
            let mut statements: Vec<Statement> = Vec::new();
            for (i, (is_create, op, target_pick, args, ref_pick)) in rows.into_iter().enumerate() {
                let row = i as u32 + 1;
                let creates: Vec<u32> = statements
                    .iter()
                    .filter(|s| s.kind == StatementKind::Create)
                    .map(|s| s.row)
                    .collect();
                let invokes: Vec<u32> = statements
                    .iter()
                    .filter(|s| s.kind == StatementKind::Invoke)
                    .map(|s| s.row)
                    .collect();
                if is_create {
                    statements.push(Statement {
                        row,
                        kind: StatementKind::Create,
                        operation: format!("T{op}"),
                        target: None,
                        args: Vec::new(),
                    });
                    continue;
                }
                let target = (!creates.is_empty()).then(|| CellRef(creates[target_pick.index(creates.len())]));
                let args = args
                    .into_iter()
                    .map(|a| match a {
                        Some(json) => Value::Literal(json),
                        // References only to invoke rows, so a leading
                        // reference is never mistaken for a target.
                        None if !invokes.is_empty() => Value::Cell(CellRef(invokes[ref_pick.index(invokes.len())])),
                        None => Value::Literal(Json::Null),
                    })
                    .collect();
                statements.push(Statement {
                    row,
                    kind: StatementKind::Invoke,
                    operation: op,
                    target,
                    args,
                });
            }
            let n = statements.len();
            let expected = expect
                .into_iter()
                .map(|(idx, v)| ((idx % n) as u32 + 1, canonicalize(&v).unwrap()))
                .collect();
            SequenceSheet {
                id,
                abstraction_id: abstraction,
                rows: statements,
                expected,
            }
        })
}

fn shuffle_keys(value: &Json, seed: u64) -> Json {
    match value {
        Json::Object(map) => {
            let mut entries: Vec<(&String, &Json)> = map.iter().collect();
            entries.sort_by_key(|(k, _)| {
                let h = obs_core::blob::sha256_hex(format!("{seed}{k}").as_bytes());
                h[..8].to_string()
            });
            let mut text = String::from("{");
            for (i, (k, v)) in entries.iter().enumerate() {
                if i > 0 {
                    text.push(',');
                }
                text.push_str(&serde_json::to_string(k).unwrap());
                text.push(':');
                text.push_str(&serde_json::to_string(&shuffle_keys(v, seed)).unwrap());
            }
            text.push('}');
            // Re-parse keeps insertion order only with preserve_order; the
            // canonical form must not care either way.
            serde_json::from_str(&text).unwrap()
        }
        Json::Array(items) => Json::Array(items.iter().map(|v| shuffle_keys(v, seed)).collect()),
        other => other.clone(),
    }
}

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

fn observation(row: u32, code: u8) -> Observation {
    match code {
        0..=3 => Observation::value(row, code.to_string()),
        4 => Observation::error(row, "empty", "message varies"),
        5 => Observation::timeout(row),
        _ => Observation::crash(row, ""),
    }
}

/// Observations following the abort contract: values until the first failure.
fn outcome_vector(codes: &[u8]) -> Vec<Observation> {
    let mut out = Vec::new();
    for (i, &code) in codes.iter().enumerate() {
        out.push(observation(i as u32 + 1, code));
        if code > 3 {
            break;
        }
    }
    out
}

/// A random matrix: `impls` implementations over `sheets` sheets with rows drawn from `codes`.
fn matrix_strategy() -> impl Strategy<Value = StimulusResponseMatrix> {
    (2usize..6, 1usize..5, 1usize..4).prop_flat_map(|(impls, sheets, rows)| {
        prop::collection::vec(prop::collection::vec(0u8..7, rows), impls * sheets).prop_map(move |codes| {
            let mut srm = StimulusResponseMatrix::new("sum", "local");
            for i in 0..impls {
                for s in 0..sheets {
                    let obs = outcome_vector(&codes[i * sheets + s]);
                    srm.insert(cell(&format!("impl{i}"), &format!("s{s}"), 1, obs)).unwrap();
                }
            }
            srm
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn sheet_render_round_trips(sheet in sheet_strategy()) {
        let text = sheet.render();
        let parsed = parse_sheet(&text).map_err(|e| TestCaseError::fail(format!("{e}\n{text}")))?;
        prop_assert_eq!(parsed, sheet);
    }

    #[test]
    fn canonical_form_is_idempotent_and_order_free(value in json_value(), seed in any::<u64>()) {
        let canon = canonicalize(&value).unwrap();
        prop_assert_eq!(&canonicalize_str(&canon).unwrap(), &canon);
        let back: Json = serde_json::from_str(&canon).unwrap();
        prop_assert_eq!(&back, &value);
        prop_assert_eq!(canonicalize(&shuffle_keys(&value, seed)).unwrap(), canon);
    }

    #[test]
    fn epsilon_comparison_accepts_exact_matches(value in json_value()) {
        let canon = canonicalize(&value).unwrap();
        prop_assert!(ValueComparison::epsilon().matches(&canon, &canon));
    }

    #[test]
    fn source_normalization_is_idempotent(source in "[a-z \\t\\n/*#\"'=;(){}]{0,60}") {
        let syntax = CommentSyntax::default();
        let once = normalize_source(&source, &syntax);
        prop_assert_eq!(normalize_source(&once, &syntax), once);
    }

    #[test]
    fn whitespace_and_comments_never_change_the_hash(
        words in prop::collection::vec("[a-z]{1,5}", 1..8),
        spaces in prop::collection::vec(" {1,3}|\\t", 8),
        comment in "[a-z ]{0,10}",
    ) {
        let syntax = CommentSyntax::default();
        let plain = words.join(" ");
        let noisy: String = words
            .iter()
            .zip(spaces.iter().cycle())
            .map(|(w, s)| format!("{w}{s}"))
            .collect::<String>()
            + &format!("// {comment}\n/* {comment} */");
        prop_assert_eq!(code_hash(&plain, &syntax), code_hash(&noisy, &syntax));
    }

    #[test]
    fn syntactic_dedup_is_a_partition(hashes in prop::collection::vec(0u8..4, 1..12)) {
        let impls: Vec<ImplementationRef> = hashes
            .iter()
            .enumerate()
            .map(|(i, h)| ImplementationRef {
                id: format!("impl{i:02}"),
                abstraction_id: "sum".into(),
                origin: Origin::Synthesized,
                launch: LaunchSpec::new("stub", ["sum:correct"]),
                code_hash: format!("{h}").repeat(64),
                source_uri: None,
                labels: BTreeMap::new(),
            })
            .collect();
        let groups = dedup_syntactic(&impls);
        let flat: Vec<&String> = groups.iter().flatten().collect();
        prop_assert_eq!(flat.len(), impls.len());
        prop_assert_eq!(flat.iter().collect::<BTreeSet<_>>().len(), impls.len());
        prop_assert_eq!(groups.len(), hashes.iter().collect::<BTreeSet<_>>().len());
        for group in &groups {
            let hs: BTreeSet<_> = group.iter().map(|id| &impls.iter().find(|i| &i.id == id).unwrap().code_hash).collect();
            prop_assert_eq!(hs.len(), 1);
        }
    }

    #[test]
    fn pass_at_k_is_monotone(n in 1u64..40, c in 0u64..40, k in 1u64..40) {
        let c = c.min(n);
        let k = k.min(n);
        let p = pass_at_k(n, c, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        if k < n {
            prop_assert!(pass_at_k(n, c, k + 1).unwrap() >= p - 1e-12);
        }
        if c < n {
            prop_assert!(pass_at_k(n, c + 1, k).unwrap() >= p - 1e-12);
        }
    }

    #[test]
    fn fingerprints_separate_distinct_vectors(srm in matrix_strategy()) {
        let ids: Vec<String> = srm.implementation_ids().map(str::to_string).collect();
        for a in &ids {
            for b in &ids {
                let same_vector = srm.sheet_ids().all(|s| {
                    srm.get(a, s, 1).unwrap().behavior() == srm.get(b, s, 1).unwrap().behavior()
                });
                let same_print = fingerprint(&srm, a).unwrap().fingerprint == fingerprint(&srm, b).unwrap().fingerprint;
                prop_assert_eq!(same_vector, same_print);
            }
        }
    }

    #[test]
    fn discrepancy_report_is_empty_iff_one_class(srm in matrix_strategy()) {
        let classes = cluster_by_behavior(&srm).unwrap();
        prop_assert_eq!(discrepancy_report(&srm).is_empty(), classes.len() == 1);
        let members: usize = classes.iter().map(|c| c.members.len()).sum();
        prop_assert_eq!(members, srm.implementation_ids().count());
    }

    #[test]
    fn oracle_votes_count_value_outcomes(srm in matrix_strategy()) {
        let table = plurality_oracle(&srm);
        for row in &table.rows {
            let values = srm
                .implementation_ids()
                .filter(|i| {
                    srm.get(i, &row.sheet_id, 1)
                        .and_then(|c| c.observations.get(row.row as usize - 1))
                        .is_some_and(|o| o.outcome == Outcome::Value)
                })
                .count();
            prop_assert_eq!(row.votes.values().sum::<usize>(), values);
            match row.status {
                OracleStatus::Resolved => prop_assert!(row.votes.values().filter(|&&n| n == row.support).count() == 1),
                OracleStatus::Tie => prop_assert!(row.votes.values().filter(|&&n| n == row.support).count() > 1),
                OracleStatus::Unresolved => prop_assert_eq!(values, 0),
            }
        }
    }

    #[test]
    fn majority_of_correct_implementations_recovers_expected(
        answers in prop::collection::vec(-50i64..50, 1..6),
        correct in 2usize..5,
        wrong_offsets in prop::collection::vec(1i64..4, 0..2),
    ) {
        prop_assume!(correct > wrong_offsets.len());
        let mut srm = StimulusResponseMatrix::new("sum", "local");
        for (s, answer) in answers.iter().enumerate() {
            let mut sheet = parse_sheet(&format!("@id s{s}\n@expect A1 {answer}\nA1, invoke, sum, {answer}, 0")).unwrap();
            sheet.abstraction_id = "sum".into();
            srm.add_sheet(sheet);
            for c in 0..correct {
                srm.insert(cell(&format!("good{c}"), &format!("s{s}"), 1, vec![Observation::value(1, answer.to_string())])).unwrap();
            }
            for (w, off) in wrong_offsets.iter().enumerate() {
                srm.insert(cell(&format!("bad{w}"), &format!("s{s}"), 1, vec![Observation::value(1, (answer + off).to_string())])).unwrap();
            }
        }
        let oracle = plurality_oracle(&srm);
        for sheet in srm.sheets() {
            prop_assert_eq!(oracle.expected_for(&sheet.id), sheet.expected.clone());
        }
        let by_vote = score_correctness(&srm, OracleSource::Plurality(&oracle), ValueComparison::Exact).unwrap();
        let by_column = score_correctness(&srm, OracleSource::Expected, ValueComparison::Exact).unwrap();
        prop_assert_eq!(by_vote.scores, by_column.scores);
    }

    #[test]
    fn frames_have_one_row_per_observation(srm in matrix_strategy()) {
        let frame = to_frame(srm.cells());
        prop_assert_eq!(frame.len(), srm.cells().map(|c| c.observations.len()).sum::<usize>());
    }

    #[test]
    fn revisions_are_pinned_and_monotone(steps in prop::collection::vec((0u8..4, 0u8..4, 1u32..3), 1..8)) {
        let mut cube = Hypercube::in_memory();
        let mut history: Vec<String> = Vec::new();
        for (i, (imp, sheet, rep)) in steps.iter().enumerate() {
            let mut srm = StimulusResponseMatrix::new("sum", "local");
            srm.insert(cell(&format!("i{imp}"), &format!("s{sheet}"), *rep, vec![Observation::value(1, "8")])).unwrap();
            srm.insert(cell(&format!("step{i}"), "s0", 1, vec![Observation::value(1, "1")])).unwrap();
            cube.merge_srm(&srm).unwrap();
            history.push(serde_json::to_string(&cube.slice(cube.head(), &SliceFilter::all()).unwrap()).unwrap());
            for (r, snapshot) in history.iter().enumerate() {
                let now = serde_json::to_string(&cube.slice(r as u32 + 1, &SliceFilter::all()).unwrap()).unwrap();
                prop_assert_eq!(&now, snapshot);
            }
            if cube.head() > 1 {
                prop_assert!(cube.cell_count(cube.head()).unwrap() >= cube.cell_count(cube.head() - 1).unwrap());
            }
        }
    }

    #[test]
    fn split_ignores_other_abstractions(
        ids in prop::collection::btree_set("[a-z]{1,10}", 1..30),
        seed in any::<u64>(),
    ) {
        let ratios = SplitRatios::default();
        let alone: Vec<_> = ids.iter().map(|id| assign_split(id, seed, &ratios).unwrap()).collect();
        let mut more = ids.clone();
        more.insert("zz-extra".into());
        let with_more: Vec<_> = ids.iter().map(|id| assign_split(id, seed, &ratios).unwrap()).collect();
        prop_assert_eq!(alone, with_more);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn failing_row_ends_the_cell_there(rows in 1u32..8, fail in 1u32..8, how in 0u8..3) {
        let fail = fail.min(rows);
        let text: String = (1..=rows).map(|r| format!("A{r}, invoke, sum, {r}, 1\n")).collect();
        let sheet = parse_sheet(&text).unwrap();
        let option = ["fail_at", "crash_at", "garbage_at"][how as usize];
        let spec = format!("sum:correct:{option}={fail}");
        let imp = ImplementationRef {
            id: "x".into(),
            abstraction_id: "sum".into(),
            origin: Origin::Exemplar,
            launch: LaunchSpec::new("stub", [spec.as_str()]),
            code_hash: "0".repeat(64),
            source_uri: None,
            labels: BTreeMap::new(),
        };
        let config = ExecutionConfig { repetitions: 1, statement_timeout_ms: 1000, ..ExecutionConfig::default() };
        let record = Arena::new(StubFactory).execute_cell(&sheet, &imp, 1, &config);
        prop_assert_eq!(record.observations.len() as u32, fail);
        prop_assert_eq!(record.status, CellStatus::Aborted);
        prop_assert!(record.check().is_ok());
        let expected = if how == 0 { Outcome::Error } else { Outcome::Crash };
        prop_assert_eq!(record.observations.last().unwrap().outcome, expected);
    }
}

#[test]
fn generated_sheets_cover_references() {
    // Guard against a generator that never exercises targets or references.
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    let mut targets = 0;
    let mut refs = 0;
    for _ in 0..200 {
        let sheet = sheet_strategy().new_tree(&mut runner).unwrap().current();
        targets += sheet.rows.iter().filter(|r| r.target.is_some()).count();
        refs += sheet.rows.iter().flat_map(|r| &r.args).filter(|a| matches!(a, Value::Cell(_))).count();
    }
    assert!(targets > 0 && refs > 0, "targets {targets}, refs {refs}");
}
