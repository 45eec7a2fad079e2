//! Leakage-safe train/validation/test assignment and flat dataset export.
//!
//! The split unit is the abstraction: every cell of one abstraction lands in
//! the same split, so no solution of a test problem leaks into training.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cube::{to_frame, Cell, CubeError, Hypercube, SliceFilter};

/// Number of hash buckets the cumulative ratios are applied to.
pub const BUCKETS: u64 = 1_000_000;
pub const EXPORT_FORMAT: &str = "obs-export/1";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("bad split ratios: {0}")]
    BadRatios(String),
    #[error(transparent)]
    Cube(#[from] CubeError),
    #[error("export I/O: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}` (expected train, val or test)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self, DatasetError> {
        let ratios = SplitRatios { train, val, test };
        ratios.validate()?;
        Ok(ratios)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !r.is_finite() || *r <= 0.0) {
            return Err(DatasetError::BadRatios(format!("{parts:?}: every ratio must be positive")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DatasetError::BadRatios(format!("{parts:?} sums to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Hash bucket in `[0, BUCKETS)` for an abstraction under a seed: the first
/// 8 bytes of SHA-256(seed as 8 big-endian bytes ‖ id), read big-endian.
pub fn bucket(abstraction_id: &str, seed: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_be_bytes());
    hasher.update(abstraction_id.as_bytes());
    let digest = hasher.finalize();
    let head: [u8; 8] = digest[..8].try_into().expect("digest has 32 bytes");
    u64::from_be_bytes(head) % BUCKETS
}

/// Split of one abstraction. Depends only on `(abstraction_id, seed, ratios)`.
pub fn assign_split(abstraction_id: &str, seed: u64, ratios: &SplitRatios) -> Result<Split, DatasetError> {
    ratios.validate()?;
    let b = bucket(abstraction_id, seed) as f64;
    let train_end = ratios.train * BUCKETS as f64;
    let val_end = (ratios.train + ratios.val) * BUCKETS as f64;
    Ok(if b < train_end {
        Split::Train
    } else if b < val_end {
        Split::Val
    } else {
        Split::Test
    })
}

/// Assigns every abstraction present at `revision`.
pub fn split_by_abstraction(
    cube: &Hypercube,
    revision: u32,
    ratios: &SplitRatios,
    seed: u64,
) -> Result<BTreeMap<String, Split>, DatasetError> {
    ratios.validate()?;
    cube.abstractions_at(revision)?
        .into_iter()
        .map(|id| assign_split(&id, seed, ratios).map(|s| (id, s)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Jsonl,
    Csv,
}

impl ExportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Jsonl => "jsonl",
            ExportFormat::Csv => "csv",
        }
    }
}

impl FromStr for ExportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "jsonl" => Ok(ExportFormat::Jsonl),
            "csv" => Ok(ExportFormat::Csv),
            other => Err(format!("unknown export format `{other}` (expected jsonl or csv)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportOptions {
    pub format: ExportFormat,
    /// Only rows whose abstraction falls into this split; `None` keeps all.
    pub split: Option<Split>,
    pub ratios: SplitRatios,
    pub seed: u64,
    pub filter: SliceFilter,
}

impl ExportOptions {
    pub fn new(format: ExportFormat) -> Self {
        ExportOptions {
            format,
            split: None,
            ratios: SplitRatios::default(),
            seed: 0,
            filter: SliceFilter::all(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub revision: u32,
    pub manifest_hash: String,
    pub rows: usize,
    pub splits: BTreeMap<String, Split>,
}

/// Writes one record per observation visible at `revision`, with `revision`
/// and `split` columns appended to the frame columns.
///
/// The first line is a provenance header: `# {json}` for CSV and
/// `{"manifest": {json}}` for JSONL. Output is byte-identical for identical
/// inputs; nothing time-dependent is written.
pub fn export<W: Write>(cube: &Hypercube, revision: u32, options: &ExportOptions, mut out: W) -> Result<ExportSummary, DatasetError> {
    options.ratios.validate()?;
    let manifest_hash = cube.revision(revision)?.manifest_hash.clone();
    let cells = cube.slice(revision, &options.filter)?;
    let splits = split_by_abstraction(cube, revision, &options.ratios, options.seed)?;

    let mut frame = to_frame(&cells);
    frame.rows.retain(|row| match (&row[0], options.split) {
        (_, None) => true,
        (Cell::Text(abstraction), Some(wanted)) => splits.get(abstraction) == Some(&wanted),
        _ => false,
    });
    frame.columns.push("revision".into());
    frame.columns.push("split".into());
    for row in &mut frame.rows {
        let split = match &row[0] {
            Cell::Text(a) => splits.get(a).map_or(Cell::Null, |s| Cell::Text(s.to_string())),
            _ => Cell::Null,
        };
        row.push(Cell::Int(revision.into()));
        row.push(split);
    }

    let header = json!({
        "format": EXPORT_FORMAT,
        "revision": revision,
        "manifest_hash": manifest_hash,
        "split": options.split.map(Split::as_str),
        "ratios": [options.ratios.train, options.ratios.val, options.ratios.test],
        "seed": options.seed,
        "filter": options.filter,
        "columns": frame.columns,
        "rows": frame.len(),
    });
    match options.format {
        ExportFormat::Csv => {
            writeln!(out, "# {header}")?;
            frame.write_csv(&mut out)?;
        }
        ExportFormat::Jsonl => {
            writeln!(out, "{}", json!({ "manifest": header }))?;
            frame.write_jsonl(&mut out)?;
        }
    }
    out.flush()?;
    Ok(ExportSummary {
        revision,
        manifest_hash,
        rows: frame.len(),
        splits,
    })
}

/// [`export`] into a file, created or truncated.
pub fn export_to_path(cube: &Hypercube, revision: u32, options: &ExportOptions, path: &Path) -> Result<ExportSummary, DatasetError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    export(cube, revision, options, BufWriter::new(File::create(path)?))
}
