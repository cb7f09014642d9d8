//! Tabular CSV/JSON output with full round-trip precision, written atomically.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{Map, Value as Json};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    F64(f64),
    U64(u64),
    Str(String),
}

impl Value {
    /// CSV cell; floats carry 17 significant digits.
    fn cell(&self) -> String {
        match self {
            Value::F64(x) => format!("{x:.16e}"),
            Value::U64(x) => x.to_string(),
            Value::Str(s) => s.clone(),
        }
    }

    fn json(&self) -> Json {
        match self {
            // non-finite floats have no JSON form and become null
            Value::F64(x) => serde_json::Number::from_f64(*x).map_or(Json::Null, Json::Number),
            Value::U64(x) => Json::from(*x),
            Value::Str(s) => Json::from(s.clone()),
        }
    }
}

impl From<f64> for Value {
    fn from(x: f64) -> Self {
        Value::F64(x)
    }
}

impl From<u64> for Value {
    fn from(x: u64) -> Self {
        Value::U64(x)
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Str(s.to_owned())
    }
}

/// Named columns with rows of equal width.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    columns: Vec<String>,
    rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Table {
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Value>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::DimensionMismatch {
                expected: self.columns.len(),
                got: row.len(),
            });
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<Value>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `{column: [values...]}`.
    pub fn to_json(&self) -> Map<String, Json> {
        self.columns
            .iter()
            .enumerate()
            .map(|(j, c)| (c.clone(), Json::Array(self.rows.iter().map(|r| r[j].json()).collect())))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::param("output", format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn csv_bytes(table: &Table) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let ser = |e: csv::Error| Error::Serialization(e.to_string());
    w.write_record(&table.columns).map_err(ser)?;
    for row in &table.rows {
        w.write_record(row.iter().map(Value::cell)).map_err(ser)?;
    }
    w.into_inner().map_err(|e| Error::Serialization(e.to_string()))
}

pub fn json_bytes(object: &Map<String, Json>) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(object).map_err(|e| Error::Serialization(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

/// Emits a nonempty table as CSV (header plus one line per record) or as a
/// single JSON object of column arrays.
pub fn emit_report(table: &Table, format: Format, path: &Path) -> Result<()> {
    if table.is_empty() {
        return Err(Error::param("records", "cannot emit an empty report"));
    }
    let bytes = match format {
        Format::Csv => csv_bytes(table)?,
        Format::Json => json_bytes(&table.to_json())?,
    };
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Table {
        let mut t = Table::new(["eta", "count", "tag"]);
        t.push(vec![0.1.into(), 3u64.into(), "a".into()]).unwrap();
        t.push(vec![(1.0f64 / 3.0).into(), 4u64.into(), "b".into()]).unwrap();
        t
    }

    #[test]
    fn csv_has_header_and_full_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        emit_report(&sample(), Format::Csv, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "eta,count,tag");
        assert_eq!(lines.len(), 3);
        let third: f64 = lines[2].split(',').next().unwrap().parse().unwrap();
        assert_eq!(third, 1.0 / 3.0);
        assert_eq!(lines[1], "1.0000000000000001e-1,3,a");
    }

    #[test]
    fn json_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        let t = sample();
        emit_report(&t, Format::Json, &path).unwrap();
        let back: Json = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        assert_eq!(back, Json::Object(t.to_json()));
        assert_eq!(back["eta"][1].as_f64().unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn empty_and_ragged_tables_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let t = Table::new(["x"]);
        assert!(emit_report(&t, Format::Csv, &dir.path().join("e.csv")).is_err());
        let mut t = Table::new(["x", "y"]);
        assert!(t.push(vec![1.0.into()]).is_err());
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing").join("t.csv");
        assert!(matches!(emit_report(&sample(), Format::Csv, &path), Err(Error::Io { .. })));
    }
}
