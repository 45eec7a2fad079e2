//! Stimulus-response matrices and the versioned stimulus-response hypercube.
//!
//! The hypercube is append-only. Every merge creates a revision; earlier
//! revisions stay reproducible because cells are never rewritten or deleted,
//! only marked retracted by a tombstone in a later revision.
//!
//! On-disk layout under a root directory:
//!
//! ```text
//! srh/manifest.json
//! srh/rev-<n>/cells-<shard>.jsonl
//! blobs/<sha256>
//! ```
//!
//! Each shard line is one of `{"cell": CellRecord}`, `{"sheet": SequenceSheet}`
//! or `{"tombstone": {"coord": Coord, "reason": ...}}`. The manifest lists
//! every shard with its SHA-256, and each revision's `manifest_hash` covers
//! its shard hashes and the previous revision's hash, so any edit to a
//! shard or to history is detected on load.

mod frame;
mod srm;

pub use frame::{to_frame, Cell, Frame, FRAME_COLUMNS};
pub use srm::{CellKey, SrmError, StimulusResponseMatrix};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arena::CellRecord;
use crate::blob::{sha256_hex, BlobStore};
use crate::canonical::canonicalize;
use crate::sheet::SequenceSheet;

pub const FORMAT: &str = "srh/1";
pub const DIMENSIONS: [&str; 5] = ["abstraction", "implementation", "sheet", "repetition", "environment"];
pub const DEFAULT_SHARDS: u32 = 4;
const GENESIS: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Error)]
pub enum CubeError {
    #[error("cell {0} already stored with a different payload")]
    CellConflict(Coord),
    #[error("sheet `{sheet}` of `{abstraction}` already stored with different content")]
    SheetConflict { abstraction: String, sheet: String },
    #[error("unknown revision {0}")]
    UnknownRevision(u32),
    #[error("no such cell {0}")]
    UnknownCell(Coord),
    #[error("cell {0} is already retracted")]
    AlreadyRetracted(Coord),
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("hypercube already exists at {0}")]
    AlreadyExists(PathBuf),
    #[error("malformed hypercube data: {0}")]
    Format(String),
    #[error("hypercube I/O: {0}")]
    Io(#[from] io::Error),
}

/// Full coordinates of a cell. Field order is the stable slice order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Coord {
    pub abstraction: String,
    pub implementation: String,
    pub sheet: String,
    pub repetition: u32,
    pub environment: String,
}

impl Coord {
    pub fn of(record: &CellRecord) -> Coord {
        Coord {
            abstraction: record.abstraction_id.clone(),
            implementation: record.implementation_id.clone(),
            sheet: record.sheet_id.clone(),
            repetition: record.repetition,
            environment: record.environment_id.clone(),
        }
    }
}

impl std::fmt::Display for Coord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({}, {}, {}, {}, {})",
            self.abstraction, self.implementation, self.sheet, self.repetition, self.environment
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub file: String,
    pub sha256: String,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Revision {
    pub number: u32,
    pub created_at: DateTime<Utc>,
    pub added_cells: usize,
    pub retracted_cells: usize,
    pub added_sheets: usize,
    pub shards: Vec<ShardEntry>,
    pub parent_hash: String,
    pub manifest_hash: String,
}

impl Revision {
    fn compute_hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("revision serializes");
        value.as_object_mut().expect("object").remove("manifest_hash");
        sha256_hex(canonicalize(&value).expect("no floats in revisions").as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub dimensions: Vec<String>,
    pub shard_count: u32,
    pub revisions: Vec<Revision>,
}

impl Manifest {
    fn new(shard_count: u32) -> Self {
        Manifest {
            format: FORMAT.to_string(),
            dimensions: DIMENSIONS.iter().map(|d| d.to_string()).collect(),
            shard_count,
            revisions: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tombstone {
    pub coord: Coord,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum ShardRecord {
    Sheet(SequenceSheet),
    Cell(CellRecord),
    Tombstone(Tombstone),
}

#[derive(Debug, Clone)]
struct StoredCell {
    added_in: u32,
    retracted_in: Option<u32>,
    record: CellRecord,
}

impl StoredCell {
    fn visible_at(&self, revision: u32) -> bool {
        self.added_in <= revision && self.retracted_in.is_none_or(|r| r > revision)
    }
}

/// Accept the inner `srh` directory as well as the root that contains it.
fn resolve_root(path: &Path) -> PathBuf {
    let inner = path.file_name().is_some_and(|n| n == "srh")
        && path.join("manifest.json").is_file()
        && !path.join("srh").join("manifest.json").is_file();
    match (inner, path.parent()) {
        (true, Some(parent)) => parent.to_path_buf(),
        _ => path.to_path_buf(),
    }
}

/// Conjunctive filter over the five dimensions; `None` matches everything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceFilter {
    pub abstraction: Option<BTreeSet<String>>,
    pub implementation: Option<BTreeSet<String>>,
    pub sheet: Option<BTreeSet<String>>,
    pub repetition: Option<BTreeSet<u32>>,
    pub environment: Option<BTreeSet<String>>,
}

fn set<T: Ord>(items: impl IntoIterator<Item = T>) -> Option<BTreeSet<T>> {
    Some(items.into_iter().collect())
}

impl SliceFilter {
    pub fn all() -> Self {
        SliceFilter::default()
    }

    pub fn abstraction<S: Into<String>>(mut self, ids: impl IntoIterator<Item = S>) -> Self {
        self.abstraction = set(ids.into_iter().map(Into::into));
        self
    }

    pub fn implementation<S: Into<String>>(mut self, ids: impl IntoIterator<Item = S>) -> Self {
        self.implementation = set(ids.into_iter().map(Into::into));
        self
    }

    pub fn sheet<S: Into<String>>(mut self, ids: impl IntoIterator<Item = S>) -> Self {
        self.sheet = set(ids.into_iter().map(Into::into));
        self
    }

    pub fn repetition(mut self, reps: impl IntoIterator<Item = u32>) -> Self {
        self.repetition = set(reps);
        self
    }

    pub fn environment<S: Into<String>>(mut self, ids: impl IntoIterator<Item = S>) -> Self {
        self.environment = set(ids.into_iter().map(Into::into));
        self
    }

    pub fn matches(&self, coord: &Coord) -> bool {
        fn ok<T: Ord>(filter: &Option<BTreeSet<T>>, value: &T) -> bool {
            filter.as_ref().is_none_or(|f| f.contains(value))
        }
        ok(&self.abstraction, &coord.abstraction)
            && ok(&self.implementation, &coord.implementation)
            && ok(&self.sheet, &coord.sheet)
            && ok(&self.repetition, &coord.repetition)
            && ok(&self.environment, &coord.environment)
    }
}

/// The versioned, append-only store of cell records.
#[derive(Debug, Clone)]
pub struct Hypercube {
    root: Option<PathBuf>,
    manifest: Manifest,
    cells: BTreeMap<Coord, StoredCell>,
    sheets: BTreeMap<(String, String), (u32, SequenceSheet)>,
}

fn functional_bytes(record: &CellRecord) -> String {
    serde_json::to_string(&record.functional()).expect("cell serializes")
}

impl Hypercube {
    /// A hypercube that lives only in memory.
    pub fn in_memory() -> Self {
        Hypercube {
            root: None,
            manifest: Manifest::new(DEFAULT_SHARDS),
            cells: BTreeMap::new(),
            sheets: BTreeMap::new(),
        }
    }

    pub fn manifest_path(root: &Path) -> PathBuf {
        root.join("srh").join("manifest.json")
    }

    /// Creates an empty hypercube rooted at `root`.
    pub fn create(root: &Path) -> Result<Self, CubeError> {
        let manifest_path = Self::manifest_path(root);
        if manifest_path.exists() {
            return Err(CubeError::AlreadyExists(root.to_path_buf()));
        }
        fs::create_dir_all(root.join("srh"))?;
        fs::create_dir_all(root.join("blobs"))?;
        let cube = Hypercube {
            root: Some(root.to_path_buf()),
            ..Hypercube::in_memory()
        };
        cube.write_manifest()?;
        Ok(cube)
    }

    pub fn open_or_create(root: &Path) -> Result<Self, CubeError> {
        let root = &resolve_root(root);
        if Self::manifest_path(root).exists() {
            Self::open(root)
        } else {
            Self::create(root)
        }
    }

    /// Loads a hypercube, verifying every shard hash and the revision hash chain.
    pub fn open(root: &Path) -> Result<Self, CubeError> {
        let root = &resolve_root(root);
        let srh = root.join("srh");
        let text = fs::read_to_string(srh.join("manifest.json"))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| CubeError::Format(format!("manifest: {e}")))?;
        if manifest.format != FORMAT {
            return Err(CubeError::Format(format!("unsupported format `{}`", manifest.format)));
        }
        if manifest.shard_count == 0 {
            return Err(CubeError::Format("shard_count must be positive".into()));
        }
        let mut cube = Hypercube {
            root: Some(root.to_path_buf()),
            manifest: Manifest {
                revisions: Vec::new(),
                ..manifest.clone()
            },
            cells: BTreeMap::new(),
            sheets: BTreeMap::new(),
        };
        let mut parent = GENESIS.to_string();
        for (i, revision) in manifest.revisions.iter().enumerate() {
            let number = i as u32 + 1;
            if revision.number != number {
                return Err(CubeError::Integrity(format!("revision {} out of sequence", revision.number)));
            }
            if revision.parent_hash != parent || revision.compute_hash() != revision.manifest_hash {
                return Err(CubeError::Integrity(format!("revision {number} hash chain broken")));
            }
            let mut records = Vec::new();
            for shard in &revision.shards {
                let bytes = fs::read(srh.join(&shard.file))?;
                if sha256_hex(&bytes) != shard.sha256 {
                    return Err(CubeError::Integrity(format!("shard {} does not match its hash", shard.file)));
                }
                let text = String::from_utf8(bytes).map_err(|e| CubeError::Format(e.to_string()))?;
                for line in text.lines() {
                    let record: ShardRecord = serde_json::from_str(line)
                        .map_err(|e| CubeError::Format(format!("{}: {e}", shard.file)))?;
                    records.push(record);
                }
            }
            cube.apply(number, records)?;
            cube.manifest.revisions.push(revision.clone());
            parent = revision.manifest_hash.clone();
        }
        Ok(cube)
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn blob_store(&self) -> Option<io::Result<BlobStore>> {
        self.root.as_ref().map(|r| BlobStore::open(r.join("blobs")))
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn revisions(&self) -> &[Revision] {
        &self.manifest.revisions
    }

    /// Latest revision number, 0 when nothing was merged yet.
    pub fn head(&self) -> u32 {
        self.manifest.revisions.len() as u32
    }

    pub fn revision(&self, number: u32) -> Result<&Revision, CubeError> {
        number
            .checked_sub(1)
            .and_then(|i| self.manifest.revisions.get(i as usize))
            .ok_or(CubeError::UnknownRevision(number))
    }

    /// Number of stored cells (retracted ones included) as of `revision`.
    pub fn cell_count(&self, revision: u32) -> Result<usize, CubeError> {
        self.revision(revision)?;
        Ok(self.cells.values().filter(|c| c.added_in <= revision).count())
    }

    fn apply(&mut self, number: u32, records: Vec<ShardRecord>) -> Result<(), CubeError> {
        for record in records {
            match record {
                ShardRecord::Sheet(sheet) => {
                    self.sheets
                        .insert((sheet.abstraction_id.clone(), sheet.id.clone()), (number, sheet));
                }
                ShardRecord::Cell(cell) => {
                    self.cells.insert(
                        Coord::of(&cell),
                        StoredCell {
                            added_in: number,
                            retracted_in: None,
                            record: cell,
                        },
                    );
                }
                ShardRecord::Tombstone(t) => {
                    let stored = self
                        .cells
                        .get_mut(&t.coord)
                        .ok_or_else(|| CubeError::UnknownCell(t.coord.clone()))?;
                    stored.retracted_in = Some(number);
                }
            }
        }
        Ok(())
    }

    fn shard_of(&self, key: &str) -> u32 {
        let digest = sha256_hex(key.as_bytes());
        u32::from_str_radix(&digest[..8], 16).expect("hex") % self.manifest.shard_count
    }

    /// Appends a revision holding `records`, writing shards before the manifest.
    fn commit(&mut self, records: Vec<ShardRecord>, added_cells: usize, retracted_cells: usize, added_sheets: usize) -> Result<Revision, CubeError> {
        let number = self.head() + 1;
        let mut shards: BTreeMap<u32, String> = BTreeMap::new();
        for record in &records {
            let key = match record {
                ShardRecord::Sheet(s) => format!("sheet\u{0}{}\u{0}{}", s.abstraction_id, s.id),
                ShardRecord::Cell(c) => Coord::of(c).to_string(),
                ShardRecord::Tombstone(t) => t.coord.to_string(),
            };
            let line = serde_json::to_string(record).expect("shard records serialize");
            let shard = shards.entry(self.shard_of(&key)).or_default();
            shard.push_str(&line);
            shard.push('\n');
        }
        let dir = format!("rev-{number}");
        let entries: Vec<ShardEntry> = shards
            .iter()
            .map(|(shard, text)| ShardEntry {
                file: format!("{dir}/cells-{shard:02}.jsonl"),
                sha256: sha256_hex(text.as_bytes()),
                records: text.lines().count(),
            })
            .collect();
        if let Some(root) = &self.root {
            let rev_dir = root.join("srh").join(&dir);
            fs::create_dir_all(&rev_dir)?;
            for ((_, text), entry) in shards.iter().zip(&entries) {
                fs::write(root.join("srh").join(&entry.file), text)?;
            }
        }
        let mut revision = Revision {
            number,
            created_at: Utc::now(),
            added_cells,
            retracted_cells,
            added_sheets,
            shards: entries,
            parent_hash: self
                .manifest
                .revisions
                .last()
                .map_or_else(|| GENESIS.to_string(), |r| r.manifest_hash.clone()),
            manifest_hash: String::new(),
        };
        revision.manifest_hash = revision.compute_hash();
        self.manifest.revisions.push(revision.clone());
        if let Err(e) = self.write_manifest() {
            self.manifest.revisions.pop();
            return Err(e);
        }
        self.apply(number, records)?;
        Ok(revision)
    }

    fn write_manifest(&self) -> Result<(), CubeError> {
        if let Some(root) = &self.root {
            let path = Self::manifest_path(root);
            let tmp = path.with_extension("json.tmp");
            fs::write(&tmp, self.manifest.to_json())?;
            fs::rename(&tmp, &path)?;
        }
        Ok(())
    }

    /// Merges a matrix as a new revision.
    ///
    /// Cells already stored with the same functional payload (timestamps and
    /// metrics aside) are skipped; a differing payload at the same coordinates
    /// fails the whole merge and nothing is written.
    pub fn merge_srm(&mut self, srm: &StimulusResponseMatrix) -> Result<Revision, CubeError> {
        let mut records = Vec::new();
        let mut added_sheets = 0;
        for sheet in srm.sheets() {
            let sheet = SequenceSheet {
                abstraction_id: srm.abstraction_id.clone(),
                ..sheet.clone()
            };
            match self.sheets.get(&(sheet.abstraction_id.clone(), sheet.id.clone())) {
                Some((_, stored)) if *stored == sheet => {}
                Some(_) => {
                    return Err(CubeError::SheetConflict {
                        abstraction: sheet.abstraction_id,
                        sheet: sheet.id,
                    })
                }
                None => {
                    added_sheets += 1;
                    records.push(ShardRecord::Sheet(sheet));
                }
            }
        }
        let mut added_cells = 0;
        for cell in srm.cells() {
            let coord = Coord::of(cell);
            match self.cells.get(&coord) {
                Some(stored) if functional_bytes(&stored.record) == functional_bytes(cell) => {}
                Some(_) => return Err(CubeError::CellConflict(coord)),
                None => {
                    added_cells += 1;
                    records.push(ShardRecord::Cell(cell.clone()));
                }
            }
        }
        self.commit(records, added_cells, 0, added_sheets)
    }

    /// Marks cells retracted as of a new revision. Older revisions still see them.
    pub fn retract(&mut self, coords: &[Coord], reason: &str) -> Result<Revision, CubeError> {
        let mut seen = BTreeSet::new();
        for coord in coords {
            match self.cells.get(coord) {
                None => return Err(CubeError::UnknownCell(coord.clone())),
                Some(c) if c.retracted_in.is_some() || !seen.insert(coord) => {
                    return Err(CubeError::AlreadyRetracted(coord.clone()))
                }
                Some(_) => {}
            }
        }
        let records = coords
            .iter()
            .map(|coord| {
                ShardRecord::Tombstone(Tombstone {
                    coord: coord.clone(),
                    reason: reason.to_string(),
                })
            })
            .collect();
        self.commit(records, 0, coords.len(), 0)
    }

    /// Cells visible at `revision` that match `filter`, in
    /// (abstraction, implementation, sheet, repetition, environment) order.
    pub fn slice(&self, revision: u32, filter: &SliceFilter) -> Result<Vec<CellRecord>, CubeError> {
        self.revision(revision)?;
        Ok(self
            .cells
            .iter()
            .filter(|(coord, stored)| stored.visible_at(revision) && filter.matches(coord))
            .map(|(_, stored)| stored.record.clone())
            .collect())
    }

    /// Sheets stored as of `revision`.
    pub fn sheets_at(&self, revision: u32) -> Result<Vec<&SequenceSheet>, CubeError> {
        self.revision(revision)?;
        Ok(self
            .sheets
            .values()
            .filter(|(added, _)| *added <= revision)
            .map(|(_, sheet)| sheet)
            .collect())
    }

    /// Abstraction ids with at least one visible cell at `revision`.
    pub fn abstractions_at(&self, revision: u32) -> Result<BTreeSet<String>, CubeError> {
        self.revision(revision)?;
        Ok(self
            .cells
            .iter()
            .filter(|(_, stored)| stored.visible_at(revision))
            .map(|(coord, _)| coord.abstraction.clone())
            .collect())
    }

    /// Rebuilds the matrix of one abstraction and environment at `revision`.
    pub fn matrix(&self, revision: u32, abstraction: &str, environment: &str) -> Result<StimulusResponseMatrix, CubeError> {
        let mut srm = StimulusResponseMatrix::new(abstraction, environment);
        for sheet in self.sheets_at(revision)? {
            if sheet.abstraction_id == abstraction {
                srm.add_sheet(sheet.clone());
            }
        }
        let filter = SliceFilter::all().abstraction([abstraction]).environment([environment]);
        for cell in self.slice(revision, &filter)? {
            srm.insert(cell).map_err(|e| CubeError::Format(e.to_string()))?;
        }
        Ok(srm)
    }
}
