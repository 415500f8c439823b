//! NDJSON and CSV emission of record streams.
//!
//! Floats are written in the shortest form that parses back to the same
//! binary value, so read-then-write reproduces a file byte for byte.

use std::fs::File;
use std::io::{BufRead, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::Format;
use crate::convergence::{GridRow, SeminormRow, StrongStudy};
use crate::diagnostics::DiagnosticsRecord;
use crate::ensemble::EnsembleStats;
use crate::error::{Result, SktError};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance attached to every emitted file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunHeader {
    pub config_hash: String,
    pub base_seed: u64,
    pub code_version: String,
    pub command: String,
}

impl RunHeader {
    pub fn new(config_hash: String, base_seed: u64, command: &str) -> Self {
        RunHeader { config_hash, base_seed, code_version: CODE_VERSION.to_string(), command: command.to_string() }
    }
}

/// A flat record with a fixed column order.
pub trait Record: Serialize + DeserializeOwned {
    /// Field names in declaration order.
    const COLUMNS: &'static [&'static str];
}

macro_rules! record {
    ($ty:ty, [$($col:literal),* $(,)?]) => {
        impl Record for $ty {
            const COLUMNS: &'static [&'static str] = &[$($col),*];
        }
    };
}

record!(DiagnosticsRecord, [
    "t", "entropy", "production", "mass", "l2_norm", "linf", "sqrt_grad", "cross_sqrt_grad", "clamp_events", "segregation",
]);
record!(EnsembleStats, ["m_paths", "functional_name", "mean", "variance", "ci95_halfwidth", "stopped_fraction"]);
record!(StudyRow, ["study", "level", "eta", "rms", "mean_ratio", "paths"]);
record!(GridRow, ["cells", "lrho1_w1rho1", "lrho2_grad_pair", "l1p2d"]);
record!(SeminormRow, ["level", "eta", "mean", "paths"]);

/// One line of a strong-error table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub study: String,
    pub level: u32,
    pub eta: f64,
    pub rms: f64,
    pub mean_ratio: f64,
    pub paths: usize,
}

impl StudyRow {
    pub fn from_study(name: &str, study: &StrongStudy) -> Vec<StudyRow> {
        study
            .rows
            .iter()
            .map(|r| StudyRow {
                study: name.to_string(),
                level: r.level,
                eta: r.eta,
                rms: r.rms,
                mean_ratio: r.mean_ratio,
                paths: r.paths,
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: RunHeader,
}

/// One JSON object per line; the optional header comes first as
/// `{"header": {...}}`.
pub fn write_ndjson<T: Serialize>(mut out: impl Write, header: Option<&RunHeader>, records: &[T]) -> Result<()> {
    if let Some(h) = header {
        serde_json::to_writer(&mut out, &HeaderLine { header: h.clone() })?;
        out.write_all(b"\n")?;
    }
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_ndjson<T: DeserializeOwned>(input: impl BufRead) -> Result<(Option<RunHeader>, Vec<T>)> {
    let mut header = None;
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        if i == 0 && line.starts_with("{\"header\":") {
            header = Some(serde_json::from_str::<HeaderLine>(&line)?.header);
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok((header, records))
}

fn cell_text(v: &Value) -> Result<String> {
    Ok(match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        other => serde_json::to_string(other)?,
    })
}

fn cell_value(text: &str) -> Value {
    if text.is_empty() {
        return Value::Null;
    }
    match serde_json::from_str::<Value>(text) {
        Ok(v @ (Value::Number(_) | Value::Array(_) | Value::Object(_) | Value::Bool(_))) => v,
        _ => Value::String(text.to_string()),
    }
}

/// Optional `# key=value` header lines, the column row, then one row per
/// record; vector fields are JSON arrays inside a quoted cell.
pub fn write_csv<T: Record>(out: impl Write, header: Option<&RunHeader>, records: &[T]) -> Result<()> {
    let mut out = out;
    if let Some(h) = header {
        writeln!(out, "# config_hash={}", h.config_hash)?;
        writeln!(out, "# base_seed={}", h.base_seed)?;
        writeln!(out, "# code_version={}", h.code_version)?;
        writeln!(out, "# command={}", h.command)?;
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(T::COLUMNS)?;
    for r in records {
        let Value::Object(map) = serde_json::to_value(r)? else {
            return Err(SktError::Parse("record is not a JSON object".into()));
        };
        let row = T::COLUMNS
            .iter()
            .map(|c| cell_text(map.get(*c).unwrap_or(&Value::Null)))
            .collect::<Result<Vec<_>>>()?;
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: Record>(mut input: impl Read) -> Result<(Option<RunHeader>, Vec<T>)> {
    let mut text = String::new();
    input.read_to_string(&mut text)?;
    let mut fields = Map::new();
    let mut body = text.as_str();
    while let Some(rest) = body.strip_prefix("# ") {
        let (line, tail) = rest.split_once('\n').unwrap_or((rest, ""));
        let (k, v) = line.split_once('=').ok_or_else(|| SktError::Parse(format!("bad header line '{line}'")))?;
        let value = if k == "base_seed" { cell_value(v) } else { Value::String(v.to_string()) };
        fields.insert(k.to_string(), value);
        body = tail;
    }
    let header = if fields.is_empty() { None } else { Some(serde_json::from_value(Value::Object(fields))?) };

    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
    let columns: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if columns != T::COLUMNS {
        return Err(SktError::Parse(format!("unexpected columns {columns:?}")));
    }
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row?;
        let map: Map<String, Value> = columns.iter().cloned().zip(row.iter().map(cell_value)).collect();
        records.push(serde_json::from_value(Value::Object(map))?);
    }
    Ok((header, records))
}

/// Writes `records` to `dir/stem.<ext>` and returns the path.
pub fn write_records<T: Record>(
    dir: &Path,
    stem: &str,
    records: &[T],
    format: Format,
    header: Option<&RunHeader>,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{stem}.{}", format.extension()));
    let out = BufWriter::new(File::create(&path)?);
    match format {
        Format::Ndjson => write_ndjson(out, header, records)?,
        Format::Csv => write_csv(out, header, records)?,
    }
    Ok(path)
}

pub fn read_records<T: Record>(path: &Path) -> Result<(Option<RunHeader>, Vec<T>)> {
    let file = File::open(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_csv(file),
        _ => read_ndjson(std::io::BufReader::new(file)),
    }
}

#[derive(Serialize, Deserialize)]
struct Document<T> {
    header: RunHeader,
    body: T,
}

/// Pretty JSON document `{"header": ..., "body": ...}`.
pub fn write_json<T: Serialize>(path: &Path, header: &RunHeader, body: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut out, &Document { header: header.clone(), body })?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<(RunHeader, T)> {
    let doc: Document<T> = serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?;
    Ok((doc.header, doc.body))
}
