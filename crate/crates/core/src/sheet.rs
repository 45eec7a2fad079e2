//! Sequence sheets: the tabular stimulus notation.
//!
//! A sheet is a list of statements, one per line, each producing the output
//! cell named in its first column:
//!
//! ```text
//! @id queue-fifo
//! @abstraction queue
//! A1, create, Queue
//! A2, invoke, enqueue, A1, "a"
//! A3, invoke, enqueue, A1, "b"
//! A4, invoke, dequeue, A1
//! @expect A4 "a"
//! ```
//!
//! Fields after the operation are JSON literals, cell references `A<n>` or
//! blob references `blob:sha256:<64 hex>:<len>`. On an `invoke`, a leading
//! reference to a `create` row is the target instance; any other field is an
//! argument. Lines starting with `@` are directives, lines starting with `#`
//! are comments, and blank lines are ignored.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

use crate::blob::BlobRef;
use crate::canonical::{canonicalize, canonicalize_str};

/// Semantic parameter/return types an abstraction's operations are declared with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemType {
    Int,
    Float,
    Bool,
    String,
    Json,
    /// A previously created instance.
    Ref,
    /// Only valid as a return type.
    Void,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperationSig {
    pub name: String,
    #[serde(default)]
    pub params: Vec<SemType>,
    #[serde(default = "void")]
    pub returns: SemType,
}

fn void() -> SemType {
    SemType::Void
}

impl OperationSig {
    pub fn new(name: impl Into<String>, params: Vec<SemType>, returns: SemType) -> Self {
        OperationSig {
            name: name.into(),
            params,
            returns,
        }
    }
}

/// A named interface that sheets are written against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbstractionSpec {
    pub id: String,
    pub name: String,
    pub operations: Vec<OperationSig>,
}

impl AbstractionSpec {
    pub fn operation(&self, name: &str) -> Option<&OperationSig> {
        self.operations.iter().find(|op| op.name == name)
    }

    /// Checks the structural invariants, returning a description of the first violation.
    pub fn check(&self) -> Result<(), String> {
        if self.id.is_empty()
            || !self
                .id
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '-')
        {
            return Err(format!("abstraction id `{}` is not a lowercase token", self.id));
        }
        if self.operations.is_empty() {
            return Err(format!("abstraction `{}` declares no operations", self.id));
        }
        let mut seen = BTreeSet::new();
        for op in &self.operations {
            if !seen.insert(op.name.as_str()) {
                return Err(format!("operation `{}` declared twice", op.name));
            }
            if op.params.contains(&SemType::Void) {
                return Err(format!("operation `{}` has a void parameter", op.name));
            }
        }
        Ok(())
    }
}

/// Reference to the output of an earlier row (`A<n>`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CellRef(pub u32);

impl fmt::Display for CellRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "A{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Value {
    Literal(Json),
    Cell(CellRef),
    Blob(BlobRef),
}

impl Value {
    fn render(&self) -> String {
        match self {
            Value::Literal(json) => canonicalize(json).expect("sheet literals are finite"),
            Value::Cell(cell) => cell.to_string(),
            Value::Blob(blob) => blob.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatementKind {
    Create,
    Invoke,
}

impl StatementKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StatementKind::Create => "create",
            StatementKind::Invoke => "invoke",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Statement {
    pub row: u32,
    pub kind: StatementKind,
    /// Operation name for `invoke`, abstraction name for `create`.
    pub operation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<CellRef>,
    #[serde(default)]
    pub args: Vec<Value>,
}

impl Statement {
    pub fn references(&self) -> impl Iterator<Item = CellRef> + '_ {
        self.target.into_iter().chain(self.args.iter().filter_map(|a| match a {
            Value::Cell(c) => Some(*c),
            _ => None,
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceSheet {
    pub id: String,
    pub abstraction_id: String,
    pub rows: Vec<Statement>,
    /// Oracle column: row number to canonical expected value.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub expected: BTreeMap<u32, String>,
}

impl SequenceSheet {
    pub fn statement(&self, row: u32) -> Option<&Statement> {
        self.rows.get(row.checked_sub(1)? as usize)
    }

    pub fn blob_refs(&self) -> impl Iterator<Item = &BlobRef> {
        self.rows.iter().flat_map(|s| {
            s.args.iter().filter_map(|a| match a {
                Value::Blob(b) => Some(b),
                _ => None,
            })
        })
    }

    /// Serializes back to the text notation; `parse_sheet(&s.render())` yields `s`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        if !self.id.is_empty() {
            out.push_str(&format!("@id {}\n", self.id));
        }
        if !self.abstraction_id.is_empty() {
            out.push_str(&format!("@abstraction {}\n", self.abstraction_id));
        }
        for stmt in &self.rows {
            out.push_str(&format!("A{}, {}, {}", stmt.row, stmt.kind.as_str(), stmt.operation));
            if let Some(target) = stmt.target {
                out.push_str(&format!(", {target}"));
            }
            for arg in &stmt.args {
                out.push_str(", ");
                out.push_str(&arg.render());
            }
            out.push('\n');
        }
        for (row, value) in &self.expected {
            out.push_str(&format!("@expect A{row} {value}\n"));
        }
        out
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SheetError {
    #[error("syntax error at {line}:{column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("forward reference at {line}:{column}: row A{row} refers to A{referenced}")]
    ForwardReference {
        line: usize,
        column: usize,
        row: u32,
        referenced: u32,
    },
    #[error("unknown statement kind `{kind}` at {line}:{column}")]
    UnknownKind {
        line: usize,
        column: usize,
        kind: String,
    },
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> SheetError {
    SheetError::Syntax {
        line,
        column,
        message: message.into(),
    }
}

/// A field of a row with its 1-based starting column.
struct Field<'a> {
    text: &'a str,
    column: usize,
}

/// Splits a row on top-level commas, leaving commas inside JSON strings,
/// arrays and objects alone.
fn split_fields<'a>(line: &'a str) -> Vec<Field<'a>> {
    let mut fields = Vec::new();
    let mut depth = 0i32;
    let mut in_string = false;
    let mut escaped = false;
    let mut start = 0usize;
    let push = |start: usize, end: usize, fields: &mut Vec<Field<'a>>| {
        let raw = &line[start..end];
        let lead = raw.len() - raw.trim_start().len();
        fields.push(Field {
            text: raw.trim(),
            column: line[..start + lead].chars().count() + 1,
        });
    };
    for (i, c) in line.char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '[' | '{' => depth += 1,
            ']' | '}' => depth -= 1,
            ',' if depth == 0 => {
                push(start, i, &mut fields);
                start = i + 1;
            }
            _ => {}
        }
    }
    push(start, line.len(), &mut fields);
    fields
}

fn parse_cell_label(text: &str) -> Option<u32> {
    let digits = text.strip_prefix('A')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

fn is_identifier(text: &str) -> bool {
    let mut chars = text.chars();
    matches!(chars.next(), Some(c) if c.is_alphabetic() || c == '_')
        && chars.all(|c| c.is_alphanumeric() || matches!(c, '_' | '-' | '.' | ':'))
}

fn parse_value(field: &Field<'_>, line: usize) -> Result<Value, SheetError> {
    if field.text.is_empty() {
        return Err(syntax(line, field.column, "empty field"));
    }
    if field.text.starts_with('A') && field.text[1..].bytes().all(|b| b.is_ascii_digit()) {
        return match parse_cell_label(field.text) {
            Some(n) if n >= 1 => Ok(Value::Cell(CellRef(n))),
            _ => Err(syntax(line, field.column, format!("invalid cell reference `{}`", field.text))),
        };
    }
    if field.text.starts_with("blob:") {
        return BlobRef::parse(field.text)
            .map(Value::Blob)
            .map_err(|e| syntax(line, field.column, e));
    }
    let json: Json = serde_json::from_str(field.text).map_err(|e| {
        syntax(line, field.column, format!("`{}` is not a JSON literal: {e}", field.text))
    })?;
    Ok(Value::Literal(json))
}

enum Directive {
    Id(String),
    Abstraction(String),
    Expect(u32, String, usize),
}

fn parse_directive(line_text: &str, line: usize) -> Result<Directive, SheetError> {
    let body = &line_text[1..];
    let (name, rest) = body.split_once(char::is_whitespace).unwrap_or((body, ""));
    let rest = rest.trim();
    let rest_column = line_text[..line_text.len() - rest.len()].chars().count() + 1;
    match name {
        "id" | "abstraction" => {
            if rest.is_empty() || rest.contains(char::is_whitespace) {
                return Err(syntax(line, 2, format!("@{name} takes exactly one token")));
            }
            Ok(if name == "id" {
                Directive::Id(rest.to_string())
            } else {
                Directive::Abstraction(rest.to_string())
            })
        }
        "expect" => {
            let (cell, value) = rest.split_once(char::is_whitespace).unwrap_or((rest, ""));
            let row = parse_cell_label(cell)
                .filter(|n| *n >= 1)
                .ok_or_else(|| syntax(line, rest_column, format!("invalid cell `{cell}`")))?;
            let canonical = canonicalize_str(value.trim())
                .map_err(|e| syntax(line, rest_column + cell.chars().count() + 1, e.to_string()))?;
            Ok(Directive::Expect(row, canonical, rest_column))
        }
        _ => Err(syntax(line, 1, format!("unknown directive `@{name}`"))),
    }
}

/// Parses the sheet text notation.
pub fn parse_sheet(text: &str) -> Result<SequenceSheet, SheetError> {
    let mut sheet = SequenceSheet {
        id: String::new(),
        abstraction_id: String::new(),
        rows: Vec::new(),
        expected: BTreeMap::new(),
    };
    let mut explicit_abstraction = false;
    let mut pending_expect = Vec::new();

    for (index, raw_line) in text.split('\n').enumerate() {
        let line = index + 1;
        let line_text = raw_line.strip_suffix('\r').unwrap_or(raw_line);
        let trimmed = line_text.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if trimmed.starts_with('@') {
            match parse_directive(trimmed, line)? {
                Directive::Id(id) => sheet.id = id,
                Directive::Abstraction(id) => {
                    sheet.abstraction_id = id;
                    explicit_abstraction = true;
                }
                Directive::Expect(row, value, column) => pending_expect.push((row, value, line, column)),
            }
            continue;
        }
        let stmt = parse_row(line_text, line, &sheet)?;
        if stmt.kind == StatementKind::Create && !explicit_abstraction && sheet.abstraction_id.is_empty() {
            sheet.abstraction_id = stmt.operation.to_lowercase();
        }
        sheet.rows.push(stmt);
    }

    if sheet.rows.is_empty() {
        return Err(syntax(1, 1, "sheet has no rows"));
    }
    for (row, value, line, column) in pending_expect {
        if row as usize > sheet.rows.len() {
            return Err(syntax(line, column, format!("@expect refers to missing row A{row}")));
        }
        if sheet.expected.insert(row, value).is_some() {
            return Err(syntax(line, column, format!("duplicate @expect for A{row}")));
        }
    }
    Ok(sheet)
}

fn parse_row(line_text: &str, line: usize, sheet: &SequenceSheet) -> Result<Statement, SheetError> {
    let fields = split_fields(line_text);
    let label = &fields[0];
    let row = parse_cell_label(label.text)
        .filter(|n| *n >= 1)
        .ok_or_else(|| syntax(line, label.column, format!("expected output cell `A<n>`, found `{}`", label.text)))?;

    let kind_field = fields
        .get(1)
        .filter(|f| !f.text.is_empty())
        .ok_or_else(|| syntax(line, line_text.chars().count() + 1, "missing statement kind"))?;
    let kind = match kind_field.text {
        "create" => StatementKind::Create,
        "invoke" => StatementKind::Invoke,
        other if is_identifier(other) => {
            return Err(SheetError::UnknownKind {
                line,
                column: kind_field.column,
                kind: other.to_string(),
            })
        }
        other => return Err(syntax(line, kind_field.column, format!("invalid statement kind `{other}`"))),
    };

    let op_field = fields
        .get(2)
        .ok_or_else(|| syntax(line, line_text.chars().count() + 1, "missing operation"))?;
    if !is_identifier(op_field.text) {
        return Err(syntax(line, op_field.column, format!("invalid operation name `{}`", op_field.text)));
    }

    let mut values = Vec::with_capacity(fields.len().saturating_sub(3));
    for field in &fields[3..] {
        let value = parse_value(field, line)?;
        if let Value::Cell(CellRef(referenced)) = value {
            if referenced >= row {
                return Err(SheetError::ForwardReference {
                    line,
                    column: field.column,
                    row,
                    referenced,
                });
            }
        }
        values.push(value);
    }

    let expected_row = sheet.rows.len() as u32 + 1;
    if row != expected_row {
        return Err(syntax(line, label.column, format!("rows must be contiguous: expected A{expected_row}, found A{row}")));
    }

    let mut target = None;
    if kind == StatementKind::Invoke {
        if let Some(Value::Cell(cell)) = values.first() {
            if sheet
                .statement(cell.0)
                .is_some_and(|s| s.kind == StatementKind::Create)
            {
                target = Some(*cell);
                values.remove(0);
            }
        }
    }

    Ok(Statement {
        row,
        kind,
        operation: op_field.text.to_string(),
        target,
        args: values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingKind {
    AbstractionMismatch,
    UnknownOperation,
    Arity,
    ArgumentType,
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    /// `None` for sheet-level findings.
    pub row: Option<u32>,
    pub kind: FindingKind,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub sheet_id: String,
    pub abstraction_id: String,
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

fn literal_matches(ty: SemType, json: &Json) -> bool {
    match ty {
        SemType::Int => json.is_i64() || json.is_u64(),
        SemType::Float => json.is_number(),
        SemType::Bool => json.is_boolean(),
        SemType::String => json.is_string(),
        SemType::Json => true,
        SemType::Ref | SemType::Void => false,
    }
}

fn type_name(ty: SemType) -> &'static str {
    match ty {
        SemType::Int => "int",
        SemType::Float => "float",
        SemType::Bool => "bool",
        SemType::String => "string",
        SemType::Json => "json",
        SemType::Ref => "ref",
        SemType::Void => "void",
    }
}

/// Checks a sheet against an abstraction's declared operations.
///
/// Findings are data: a clean report means every invoke names a declared
/// operation with matching arity and literal argument types.
pub fn validate_sheet(sheet: &SequenceSheet, spec: &AbstractionSpec) -> ValidationReport {
    let mut findings = Vec::new();
    if !sheet.abstraction_id.is_empty() && sheet.abstraction_id != spec.id {
        findings.push(Finding {
            row: None,
            kind: FindingKind::AbstractionMismatch,
            message: format!("sheet is written against `{}`, not `{}`", sheet.abstraction_id, spec.id),
        });
    }
    let is_instance = |cell: CellRef| {
        sheet
            .statement(cell.0)
            .is_some_and(|s| s.kind == StatementKind::Create)
    };

    for stmt in &sheet.rows {
        let row = Some(stmt.row);
        match stmt.kind {
            StatementKind::Create => {
                if !stmt.operation.eq_ignore_ascii_case(&spec.id)
                    && !stmt.operation.eq_ignore_ascii_case(&spec.name)
                {
                    findings.push(Finding {
                        row,
                        kind: FindingKind::AbstractionMismatch,
                        message: format!("create of `{}` in a `{}` sheet", stmt.operation, spec.id),
                    });
                }
            }
            StatementKind::Invoke => {
                let Some(op) = spec.operation(&stmt.operation) else {
                    findings.push(Finding {
                        row,
                        kind: FindingKind::UnknownOperation,
                        message: format!("`{}` is not an operation of `{}`", stmt.operation, spec.id),
                    });
                    continue;
                };
                if let Some(target) = stmt.target {
                    if !is_instance(target) {
                        findings.push(Finding {
                            row,
                            kind: FindingKind::Target,
                            message: format!("target {target} is not a created instance"),
                        });
                    }
                }
                if stmt.args.len() != op.params.len() {
                    findings.push(Finding {
                        row,
                        kind: FindingKind::Arity,
                        message: format!(
                            "`{}` takes {} argument(s), {} given",
                            op.name,
                            op.params.len(),
                            stmt.args.len()
                        ),
                    });
                    continue;
                }
                for (position, (arg, ty)) in stmt.args.iter().zip(&op.params).enumerate() {
                    let ok = match arg {
                        Value::Literal(json) => literal_matches(*ty, json),
                        Value::Blob(_) => matches!(ty, SemType::String | SemType::Json),
                        Value::Cell(cell) => {
                            // Only instance references have a statically known type.
                            !is_instance(*cell) || matches!(ty, SemType::Ref | SemType::Json)
                        }
                    };
                    if !ok {
                        findings.push(Finding {
                            row,
                            kind: FindingKind::ArgumentType,
                            message: format!(
                                "argument {} of `{}` should be {}, found {}",
                                position + 1,
                                op.name,
                                type_name(*ty),
                                arg.render()
                            ),
                        });
                    }
                }
            }
        }
    }
    ValidationReport {
        sheet_id: sheet.id.clone(),
        abstraction_id: spec.id.clone(),
        findings,
    }
}
