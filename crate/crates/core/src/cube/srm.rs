use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arena::CellRecord;
use crate::sheet::SequenceSheet;

/// Coordinates of a cell within one matrix.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub implementation_id: String,
    pub sheet_id: String,
    pub repetition: u32,
}

#[derive(Debug, Error)]
pub enum SrmError {
    #[error("cell ({implementation}, {sheet}, rep {repetition}) recorded twice")]
    DuplicateCell {
        implementation: String,
        sheet: String,
        repetition: u32,
    },
    #[error("cell belongs to {found}, matrix is {expected}")]
    Mismatch { expected: String, found: String },
    #[error("matrix file: {0}")]
    Format(String),
    #[error("matrix I/O: {0}")]
    Io(#[from] io::Error),
}

/// Implementations x sheets grid of cell records for one abstraction in one
/// environment. Repetitions are a third key component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "SrmFile", try_from = "SrmFile")]
pub struct StimulusResponseMatrix {
    pub abstraction_id: String,
    pub environment_id: String,
    implementation_ids: BTreeSet<String>,
    sheet_ids: BTreeSet<String>,
    sheets: BTreeMap<String, SequenceSheet>,
    cells: BTreeMap<CellKey, CellRecord>,
}

#[derive(Serialize, Deserialize)]
struct SrmFile {
    abstraction_id: String,
    environment_id: String,
    implementation_ids: Vec<String>,
    sheet_ids: Vec<String>,
    #[serde(default)]
    sheets: Vec<SequenceSheet>,
    cells: Vec<CellRecord>,
}

impl From<StimulusResponseMatrix> for SrmFile {
    fn from(srm: StimulusResponseMatrix) -> Self {
        SrmFile {
            abstraction_id: srm.abstraction_id,
            environment_id: srm.environment_id,
            implementation_ids: srm.implementation_ids.into_iter().collect(),
            sheet_ids: srm.sheet_ids.into_iter().collect(),
            sheets: srm.sheets.into_values().collect(),
            cells: srm.cells.into_values().collect(),
        }
    }
}

impl TryFrom<SrmFile> for StimulusResponseMatrix {
    type Error = SrmError;

    fn try_from(file: SrmFile) -> Result<Self, SrmError> {
        let mut srm = StimulusResponseMatrix::new(&file.abstraction_id, &file.environment_id);
        file.implementation_ids.iter().for_each(|id| srm.add_implementation(id));
        srm.sheet_ids.extend(file.sheet_ids);
        file.sheets.into_iter().for_each(|s| srm.add_sheet(s));
        for cell in file.cells {
            srm.insert(cell)?;
        }
        Ok(srm)
    }
}

impl StimulusResponseMatrix {
    pub fn new(abstraction_id: &str, environment_id: &str) -> Self {
        StimulusResponseMatrix {
            abstraction_id: abstraction_id.to_string(),
            environment_id: environment_id.to_string(),
            implementation_ids: BTreeSet::new(),
            sheet_ids: BTreeSet::new(),
            sheets: BTreeMap::new(),
            cells: BTreeMap::new(),
        }
    }

    pub fn add_implementation(&mut self, id: &str) {
        self.implementation_ids.insert(id.to_string());
    }

    pub fn add_sheet(&mut self, sheet: SequenceSheet) {
        self.sheet_ids.insert(sheet.id.clone());
        self.sheets.insert(sheet.id.clone(), sheet);
    }

    /// Adds a cell, registering its implementation and sheet ids.
    pub fn insert(&mut self, record: CellRecord) -> Result<(), SrmError> {
        for (expected, found) in [
            (&self.abstraction_id, &record.abstraction_id),
            (&self.environment_id, &record.environment_id),
        ] {
            if expected != found {
                return Err(SrmError::Mismatch {
                    expected: expected.clone(),
                    found: found.clone(),
                });
            }
        }
        let key = record.key();
        if self.cells.contains_key(&key) {
            return Err(SrmError::DuplicateCell {
                implementation: key.implementation_id,
                sheet: key.sheet_id,
                repetition: key.repetition,
            });
        }
        self.implementation_ids.insert(key.implementation_id.clone());
        self.sheet_ids.insert(key.sheet_id.clone());
        self.cells.insert(key, record);
        Ok(())
    }

    /// Sorted implementation ids.
    pub fn implementation_ids(&self) -> impl Iterator<Item = &str> {
        self.implementation_ids.iter().map(String::as_str)
    }

    /// Sorted sheet ids.
    pub fn sheet_ids(&self) -> impl Iterator<Item = &str> {
        self.sheet_ids.iter().map(String::as_str)
    }

    pub fn sheet(&self, id: &str) -> Option<&SequenceSheet> {
        self.sheets.get(id)
    }

    pub fn sheets(&self) -> impl Iterator<Item = &SequenceSheet> {
        self.sheets.values()
    }

    pub fn get(&self, implementation_id: &str, sheet_id: &str, repetition: u32) -> Option<&CellRecord> {
        self.cells.get(&CellKey {
            implementation_id: implementation_id.to_string(),
            sheet_id: sheet_id.to_string(),
            repetition,
        })
    }

    /// All cells in (implementation, sheet, repetition) order.
    pub fn cells(&self) -> impl Iterator<Item = &CellRecord> {
        self.cells.values()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Highest repetition number present (0 when empty).
    pub fn max_repetition(&self) -> u32 {
        self.cells.keys().map(|k| k.repetition).max().unwrap_or(0)
    }

    /// Copy with timestamps and metrics cleared from every cell.
    pub fn functional(&self) -> StimulusResponseMatrix {
        StimulusResponseMatrix {
            cells: self.cells.iter().map(|(k, v)| (k.clone(), v.functional())).collect(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("matrix serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), SrmError> {
        fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<StimulusResponseMatrix, SrmError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| SrmError::Format(e.to_string()))
    }
}
