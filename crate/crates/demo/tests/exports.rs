use serde_json::Value;

use obs_demo::{canonicalize_sheet, pass_at_k_curve, split_histogram};

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

#[test]
fn curve_matches_known_points_and_rises() {
    let curve = parse(pass_at_k_curve(5, 3));
    let points = curve["points"].as_array().unwrap();
    assert_eq!(points.len(), 5);
    assert!((points[0]["pass_at_k"].as_f64().unwrap() - 0.6).abs() < 1e-12);
    assert!((points[1]["pass_at_k"].as_f64().unwrap() - 0.9).abs() < 1e-12);
    let values: Vec<f64> = points.iter().map(|p| p["pass_at_k"].as_f64().unwrap()).collect();
    assert!(values.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(values[4], 1.0);
}

#[test]
fn impossible_curve_reports_an_error() {
    let curve = parse(pass_at_k_curve(3, 4));
    assert_eq!(curve["ok"], false);
    assert!(curve["error"].is_string());
}

#[test]
fn sheet_canonicalization_is_stable() {
    let out = parse(canonicalize_sheet("@id demo\nA1, create, Queue\nA2, invoke, enqueue, A1, {\"b\":1, \"a\":2}\n"));
    assert_eq!(out["ok"], true);
    assert_eq!(out["rows"], 2);
    let canonical = out["canonical"].as_str().unwrap();
    assert!(canonical.contains("{\"a\":2,\"b\":1}"));
    assert_eq!(parse(canonicalize_sheet(canonical))["canonical"], canonical);

    let broken = parse(canonicalize_sheet("A1, invoke, sum, A9"));
    assert_eq!(broken["ok"], false);
}

#[test]
fn histogram_counts_every_id_once() {
    let out = parse(split_histogram(1000, 7, 0.8, 0.1, 0.1));
    let total: u64 = ["train", "val", "test"].iter().map(|k| out[k].as_u64().unwrap()).sum();
    assert_eq!(total, 1000);
    assert_eq!(out["sample"].as_array().unwrap().len(), 8);
    assert_eq!(parse(split_histogram(10, 7, 0.5, 0.5, 0.5))["ok"], false);
}
