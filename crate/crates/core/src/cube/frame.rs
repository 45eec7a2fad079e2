//! Flat, one-row-per-observation view of cell records.

use std::io::{self, Write};

use serde_json::Value as Json;

use crate::arena::CellRecord;

pub const FRAME_COLUMNS: [&str; 13] = [
    "abstraction",
    "implementation",
    "sheet",
    "repetition",
    "environment",
    "row",
    "outcome",
    "value",
    "error_type",
    "wall_ns",
    "mem_bytes",
    "trace",
    "state",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Cell {
    Null,
    Int(u64),
    Text(String),
}

impl Cell {
    fn text(s: Option<&str>) -> Cell {
        s.map_or(Cell::Null, |s| Cell::Text(s.to_string()))
    }

    pub fn to_csv_field(&self) -> String {
        match self {
            Cell::Null => String::new(),
            Cell::Int(n) => n.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }

    pub fn to_json(&self) -> Json {
        match self {
            Cell::Null => Json::Null,
            Cell::Int(n) => Json::from(*n),
            Cell::Text(s) => Json::String(s.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Frame {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

/// One row per observation, ordered by (abstraction, implementation, sheet,
/// repetition, environment, row).
pub fn to_frame<'a>(cells: impl IntoIterator<Item = &'a CellRecord>) -> Frame {
    let mut cells: Vec<&CellRecord> = cells.into_iter().collect();
    cells.sort_by(|a, b| {
        (&a.abstraction_id, &a.implementation_id, &a.sheet_id, a.repetition, &a.environment_id).cmp(&(
            &b.abstraction_id,
            &b.implementation_id,
            &b.sheet_id,
            b.repetition,
            &b.environment_id,
        ))
    });
    let mut rows = Vec::new();
    for cell in cells {
        for obs in &cell.observations {
            let metrics = obs.metrics.as_ref();
            rows.push(vec![
                Cell::Text(cell.abstraction_id.clone()),
                Cell::Text(cell.implementation_id.clone()),
                Cell::Text(cell.sheet_id.clone()),
                Cell::Int(cell.repetition.into()),
                Cell::Text(cell.environment_id.clone()),
                Cell::Int(obs.row.into()),
                Cell::Text(obs.outcome.as_str().to_string()),
                Cell::text(obs.value.as_deref()),
                Cell::text(obs.error_type.as_deref()),
                metrics.map_or(Cell::Null, |m| Cell::Int(m.wall_ns)),
                metrics.and_then(|m| m.mem_bytes).map_or(Cell::Null, Cell::Int),
                Cell::text(metrics.and_then(|m| m.trace.as_deref())),
                Cell::text(obs.state.as_deref()),
            ]);
        }
    }
    Frame {
        columns: FRAME_COLUMNS.iter().map(|c| c.to_string()).collect(),
        rows,
    }
}

impl Frame {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Appends a column holding the same value on every row.
    pub fn with_constant(mut self, name: &str, value: Cell) -> Frame {
        self.columns.push(name.to_string());
        for row in &mut self.rows {
            row.push(value.clone());
        }
        self
    }

    /// RFC 4180 CSV with a header row.
    pub fn write_csv<W: Write>(&self, out: W) -> io::Result<()> {
        let mut writer = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(out);
        writer.write_record(&self.columns)?;
        for row in &self.rows {
            writer.write_record(row.iter().map(Cell::to_csv_field))?;
        }
        writer.flush()
    }

    /// One flat JSON object per line, keys in column order.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for row in &self.rows {
            let mut line = String::from("{");
            for (i, (name, cell)) in self.columns.iter().zip(row).enumerate() {
                if i > 0 {
                    line.push(',');
                }
                line.push_str(&Json::String(name.clone()).to_string());
                line.push(':');
                line.push_str(&cell.to_json().to_string());
            }
            line.push_str("}\n");
            out.write_all(line.as_bytes())?;
        }
        Ok(())
    }
}
