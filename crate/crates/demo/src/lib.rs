//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Every export takes plain values and returns a JSON string, so the page
//! needs no generated TypeScript types and native tests can call the same
//! functions.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use obs_core::analysis::pass_at_k;
use obs_core::dataset::{assign_split, bucket, Split, SplitRatios, BUCKETS};
use obs_core::sheet::parse_sheet;

/// pass@k for k = 1..=n with `c` correct samples out of `n`.
#[wasm_bindgen]
pub fn pass_at_k_curve(n: u32, c: u32) -> String {
    let curve: Result<Vec<Value>, String> = (1..=n as u64)
        .map(|k| {
            pass_at_k(n as u64, c as u64, k)
                .map(|p| json!({ "k": k, "pass_at_k": p }))
                .map_err(|e| e.to_string())
        })
        .collect();
    match curve {
        Ok(points) => json!({ "ok": true, "n": n, "c": c, "points": points }),
        Err(error) => json!({ "ok": false, "error": error }),
    }
    .to_string()
}

/// Parse a sheet and return its canonical rendering, or the parse error.
#[wasm_bindgen]
pub fn canonicalize_sheet(text: &str) -> String {
    match parse_sheet(text) {
        Ok(sheet) => json!({
            "ok": true,
            "id": sheet.id,
            "abstraction": sheet.abstraction_id,
            "rows": sheet.rows.len(),
            "expected": sheet.expected.len(),
            "canonical": sheet.render(),
        }),
        Err(err) => json!({ "ok": false, "error": err.to_string() }),
    }
    .to_string()
}

/// Assign `count` synthetic abstraction ids to splits and count each split.
#[wasm_bindgen]
pub fn split_histogram(count: u32, seed: u64, train: f64, val: f64, test: f64) -> String {
    let ratios = match SplitRatios::new(train, val, test) {
        Ok(r) => r,
        Err(err) => return json!({ "ok": false, "error": err.to_string() }).to_string(),
    };
    let mut counts = [0u32; 3];
    let mut sample = Vec::new();
    for i in 0..count {
        let id = format!("abstraction-{i:05}");
        let split = assign_split(&id, seed, &ratios).expect("ratios validated");
        counts[split as usize] += 1;
        if i < 8 {
            sample.push(json!({ "id": id, "bucket": bucket(&id, seed), "split": split.to_string() }));
        }
    }
    json!({
        "ok": true,
        "count": count,
        "buckets": BUCKETS,
        "train": counts[Split::Train as usize],
        "val": counts[Split::Val as usize],
        "test": counts[Split::Test as usize],
        "sample": sample,
    })
    .to_string()
}
