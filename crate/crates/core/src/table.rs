//! Column-typed tables with a per-cell missing mask, and their CSV form.
//!
//! Values are stored column-major as `f64`. Binary cells hold 0 or 1,
//! categorical cells hold the level index. Missing cells hold `NaN` and are
//! flagged in the mask; the mask is authoritative.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const MISSING_TOKEN: &str = "NA";

#[derive(Debug, thiserror::Error)]
pub enum TableError {
    #[error("unknown column kind `{0}`")]
    UnknownKind(String),
    #[error("schema: {0}")]
    Schema(String),
    #[error("declared column `{0}` is absent from the header")]
    MissingColumn(String),
    #[error("column `{0}` is not declared in the schema")]
    UndeclaredColumn(String),
    #[error("row {row}: column `{column}`: cannot parse `{value}`")]
    Cell { row: usize, column: String, value: String },
    #[error("row {row}: expected {expected} fields, found {found}")]
    Ragged { row: usize, expected: usize, found: usize },
    #[error("column `{0}` not found")]
    NoSuchColumn(String),
    #[error("column `{column}`: {reason}")]
    Invalid { column: String, reason: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ColumnKind {
    Continuous,
    Binary,
    Categorical(Vec<String>),
}

impl ColumnKind {
    pub fn levels(&self) -> Option<&[String]> {
        match self {
            ColumnKind::Categorical(l) => Some(l),
            _ => None,
        }
    }
}

impl FromStr for ColumnKind {
    type Err = TableError;

    /// `continuous`, `binary`, or `categorical(a|b|c)`.
    fn from_str(s: &str) -> Result<Self, TableError> {
        let s = s.trim();
        match s {
            "continuous" => return Ok(ColumnKind::Continuous),
            "binary" => return Ok(ColumnKind::Binary),
            _ => {}
        }
        if let Some(inner) = s.strip_prefix("categorical(").and_then(|r| r.strip_suffix(')')) {
            let levels: Vec<String> = inner.split('|').map(|l| l.trim().to_string()).collect();
            if levels.iter().any(|l| l.is_empty()) {
                return Err(TableError::Schema(format!("empty level in `{s}`")));
            }
            for (i, l) in levels.iter().enumerate() {
                if levels[..i].contains(l) {
                    return Err(TableError::Schema(format!("duplicate level `{l}`")));
                }
            }
            return Ok(ColumnKind::Categorical(levels));
        }
        Err(TableError::UnknownKind(s.to_string()))
    }
}

impl fmt::Display for ColumnKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ColumnKind::Continuous => f.write_str("continuous"),
            ColumnKind::Binary => f.write_str("binary"),
            ColumnKind::Categorical(l) => write!(f, "categorical({})", l.join("|")),
        }
    }
}

/// Ordered column declarations.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Schema {
    pub columns: Vec<(String, ColumnKind)>,
}

impl Schema {
    pub fn new(columns: Vec<(String, ColumnKind)>) -> Self {
        Schema { columns }
    }

    /// Parse `name:kind` declarations separated by commas or newlines.
    /// Categorical levels use `|`, so commas never appear inside a kind.
    pub fn parse(text: &str) -> Result<Self, TableError> {
        let mut columns = Vec::new();
        for item in text.split([',', '\n']) {
            let item = item.trim();
            if item.is_empty() {
                continue;
            }
            let (name, kind) = item
                .split_once(':')
                .ok_or_else(|| TableError::Schema(format!("expected name:kind, got `{item}`")))?;
            let name = name.trim();
            if name.is_empty() {
                return Err(TableError::Schema("empty column name".into()));
            }
            if columns.iter().any(|(n, _): &(String, ColumnKind)| n == name) {
                return Err(TableError::Schema(format!("duplicate column `{name}`")));
            }
            columns.push((name.to_string(), kind.parse()?));
        }
        Ok(Schema { columns })
    }

    pub fn kind(&self, name: &str) -> Option<&ColumnKind> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, k)| k)
    }
}

#[derive(Debug, Clone)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
    values: Vec<f64>,
    missing: Vec<bool>,
}

impl PartialEq for Column {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.kind == other.kind
            && self.missing == other.missing
            && self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()))
    }
}

impl Column {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn missing(&self) -> &[bool] {
        &self.missing
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|m| **m).count()
    }

    pub fn is_fully_observed(&self) -> bool {
        !self.missing.iter().any(|m| *m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n_rows: usize,
    columns: Vec<Column>,
}

fn check_cell(kind: &ColumnKind, v: f64) -> Result<(), String> {
    match kind {
        ColumnKind::Continuous if !v.is_finite() => Err(format!("non-finite value {v}")),
        ColumnKind::Binary if v != 0.0 && v != 1.0 => Err(format!("binary value {v}")),
        ColumnKind::Categorical(levels)
            if !(v >= 0.0 && v.fract() == 0.0 && (v as usize) < levels.len()) =>
        {
            Err(format!("level index {v} out of range"))
        }
        _ => Ok(()),
    }
}

impl Dataset {
    pub fn new(n_rows: usize) -> Self {
        Dataset { n_rows, columns: Vec::new() }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn schema(&self) -> Schema {
        Schema::new(self.columns.iter().map(|c| (c.name.clone(), c.kind.clone())).collect())
    }

    pub fn has(&self, name: &str) -> bool {
        self.columns.iter().any(|c| c.name == name)
    }

    pub fn column(&self, name: &str) -> Result<&Column, TableError> {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| TableError::NoSuchColumn(name.to_string()))
    }

    fn index_of(&self, name: &str) -> Result<usize, TableError> {
        self.columns
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| TableError::NoSuchColumn(name.to_string()))
    }

    pub fn values(&self, name: &str) -> Result<&[f64], TableError> {
        Ok(self.column(name)?.values())
    }

    /// Values of a column that must be fully observed.
    pub fn observed(&self, name: &str) -> Result<&[f64], TableError> {
        let c = self.column(name)?;
        if !c.is_fully_observed() {
            return Err(TableError::Invalid {
                column: name.to_string(),
                reason: format!("{} missing cells", c.missing_count()),
            });
        }
        Ok(c.values())
    }

    /// Append a column. Cells where `missing` is set are stored as NaN.
    pub fn push_column(
        &mut self,
        name: &str,
        kind: ColumnKind,
        mut values: Vec<f64>,
        missing: Option<Vec<bool>>,
    ) -> Result<(), TableError> {
        let invalid = |reason: String| TableError::Invalid { column: name.to_string(), reason };
        if self.has(name) {
            return Err(invalid("duplicate column".into()));
        }
        if values.len() != self.n_rows {
            return Err(invalid(format!("{} cells for {} rows", values.len(), self.n_rows)));
        }
        let missing = missing.unwrap_or_else(|| vec![false; self.n_rows]);
        if missing.len() != self.n_rows {
            return Err(invalid(format!("mask has {} cells for {} rows", missing.len(), self.n_rows)));
        }
        for (v, m) in values.iter_mut().zip(&missing) {
            if *m {
                *v = f64::NAN;
            } else {
                check_cell(&kind, *v).map_err(invalid)?;
            }
        }
        self.columns.push(Column { name: name.to_string(), kind, values, missing });
        Ok(())
    }

    /// Replace the values of an existing column, clearing its mask.
    pub fn set_values(&mut self, name: &str, values: Vec<f64>) -> Result<(), TableError> {
        let i = self.index_of(name)?;
        let col = &mut self.columns[i];
        if values.len() != self.n_rows {
            return Err(TableError::Invalid {
                column: name.to_string(),
                reason: format!("{} cells for {} rows", values.len(), self.n_rows),
            });
        }
        for v in &values {
            check_cell(&col.kind, *v)
                .map_err(|reason| TableError::Invalid { column: name.to_string(), reason })?;
        }
        col.values = values;
        col.missing = vec![false; self.n_rows];
        Ok(())
    }

    /// Flag cells as missing. Already-missing cells stay missing.
    pub fn mask(&mut self, name: &str, flags: &[bool]) -> Result<(), TableError> {
        let i = self.index_of(name)?;
        let col = &mut self.columns[i];
        if flags.len() != col.values.len() {
            return Err(TableError::Invalid { column: name.to_string(), reason: "mask length".into() });
        }
        for ((v, m), f) in col.values.iter_mut().zip(col.missing.iter_mut()).zip(flags) {
            if *f {
                *m = true;
                *v = f64::NAN;
            }
        }
        Ok(())
    }

    pub fn drop_columns(&self, names: &[&str]) -> Dataset {
        Dataset {
            n_rows: self.n_rows,
            columns: self.columns.iter().filter(|c| !names.contains(&c.name.as_str())).cloned().collect(),
        }
    }

    pub fn select_columns(&self, names: &[&str]) -> Result<Dataset, TableError> {
        let mut out = Dataset::new(self.n_rows);
        for n in names {
            out.columns.push(self.column(n)?.clone());
        }
        Ok(out)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let columns = self
            .columns
            .iter()
            .map(|c| Column {
                name: c.name.clone(),
                kind: c.kind.clone(),
                values: rows.iter().map(|&r| c.values[r]).collect(),
                missing: rows.iter().map(|&r| c.missing[r]).collect(),
            })
            .collect();
        Dataset { n_rows: rows.len(), columns }
    }

    /// Names of columns that have at least one missing cell.
    pub fn incomplete_columns(&self) -> Vec<&str> {
        self.columns.iter().filter(|c| !c.is_fully_observed()).map(|c| c.name.as_str()).collect()
    }
}

/// Rows where the binary, fully observed `indicator` equals 1.
pub fn complete_case_filter(d: &Dataset, indicator: &str) -> Result<Dataset, TableError> {
    let col = d.column(indicator)?;
    if col.kind != ColumnKind::Binary {
        return Err(TableError::Invalid { column: indicator.to_string(), reason: "indicator is not binary".into() });
    }
    if !col.is_fully_observed() {
        return Err(TableError::Invalid { column: indicator.to_string(), reason: "indicator has missing cells".into() });
    }
    let rows: Vec<usize> = (0..d.n_rows()).filter(|&i| col.values[i] == 1.0).collect();
    Ok(d.select_rows(&rows))
}

/// Shortest representation that parses back to the same `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v}")
}

fn parse_cell(kind: &ColumnKind, raw: &str) -> Option<f64> {
    match kind {
        ColumnKind::Categorical(levels) => levels.iter().position(|l| l == raw).map(|i| i as f64),
        ColumnKind::Binary => match raw {
            "0" => Some(0.0),
            "1" => Some(1.0),
            _ => raw.parse::<f64>().ok().filter(|v| *v == 0.0 || *v == 1.0),
        },
        ColumnKind::Continuous => raw.parse::<f64>().ok().filter(|v| v.is_finite()),
    }
}

/// Read a CSV table. Columns follow the header order; every header column
/// must be declared and every declared column must appear.
pub fn read_table<R: Read>(reader: R, schema: &Schema) -> Result<Dataset, TableError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    for (name, _) in &schema.columns {
        if !header.contains(name) {
            return Err(TableError::MissingColumn(name.clone()));
        }
    }
    let mut kinds = Vec::with_capacity(header.len());
    for (i, h) in header.iter().enumerate() {
        if header[..i].contains(h) {
            return Err(TableError::Schema(format!("duplicate header `{h}`")));
        }
        kinds.push(schema.kind(h).ok_or_else(|| TableError::UndeclaredColumn(h.clone()))?.clone());
    }
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); header.len()];
    let mut missing: Vec<Vec<bool>> = vec![Vec::new(); header.len()];
    let mut record = csv::StringRecord::new();
    let mut row = 0usize;
    while rdr.read_record(&mut record)? {
        row += 1;
        if record.len() != header.len() {
            return Err(TableError::Ragged { row, expected: header.len(), found: record.len() });
        }
        for (j, raw) in record.iter().enumerate() {
            let raw = raw.trim();
            if raw == MISSING_TOKEN {
                values[j].push(f64::NAN);
                missing[j].push(true);
                continue;
            }
            let v = parse_cell(&kinds[j], raw).ok_or_else(|| TableError::Cell {
                row,
                column: header[j].clone(),
                value: raw.to_string(),
            })?;
            values[j].push(v);
            missing[j].push(false);
        }
    }
    let mut d = Dataset::new(row);
    for (((name, kind), v), m) in header.iter().zip(kinds).zip(values).zip(missing) {
        d.push_column(name, kind, v, Some(m))?;
    }
    Ok(d)
}

pub fn load_table(path: &Path, schema: &Schema) -> Result<Dataset, TableError> {
    let f = std::fs::File::open(path)?;
    read_table(std::io::BufReader::new(f), schema)
}

pub fn write_table<W: Write>(d: &Dataset, writer: W) -> Result<(), TableError> {
    let mut w = csv::WriterBuilder::new().from_writer(writer);
    w.write_record(d.columns.iter().map(|c| c.name.as_str()))?;
    let mut row: Vec<String> = Vec::with_capacity(d.columns.len());
    for i in 0..d.n_rows {
        row.clear();
        for c in &d.columns {
            if c.missing[i] {
                row.push(MISSING_TOKEN.to_string());
                continue;
            }
            let v = c.values[i];
            row.push(match &c.kind {
                ColumnKind::Continuous => format_float(v),
                ColumnKind::Binary => if v == 1.0 { "1".into() } else { "0".into() },
                ColumnKind::Categorical(levels) => levels[v as usize].clone(),
            });
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_table(d: &Dataset, path: &Path) -> Result<(), TableError> {
    let f = std::fs::File::create(path)?;
    write_table(d, std::io::BufWriter::new(f))
}
