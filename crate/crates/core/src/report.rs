//! Tabular results as CSV or JSON.
//!
//! Every table has the columns `model, condition, metric, value`. Values are
//! written with four decimals. JSON output is
//! `{"metadata": {...}, "rows": [...]}`; CSV output carries its metadata in a
//! `<path>.meta.json` sidecar so the table itself stays plain CSV.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const COLUMNS: [&str; 4] = ["model", "condition", "metric", "value"];

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub model: String,
    pub condition: String,
    pub metric: String,
    pub value: f64,
}

impl Row {
    pub fn new(model: impl Into<String>, condition: impl Into<String>, metric: impl Into<String>, value: f64) -> Self {
        Row {
            model: model.into(),
            condition: condition.into(),
            metric: metric.into(),
            value,
        }
    }

    fn key(&self) -> (&str, &str, &str) {
        (&self.model, &self.condition, &self.metric)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metadata {
    pub seed: u64,
    /// Hex SHA-256 of the configuration text that produced the table.
    pub config_hash: String,
    pub version: String,
    pub notes: BTreeMap<String, String>,
}

impl Metadata {
    pub fn new(seed: u64, config_text: &str) -> Self {
        Metadata {
            seed,
            config_hash: config_hash(config_text),
            version: env!("CARGO_PKG_VERSION").to_string(),
            notes: BTreeMap::new(),
        }
    }

    pub fn note(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.notes.insert(key.into(), value.into());
        self
    }
}

pub fn config_hash(text: &str) -> String {
    sha256_hex(text.as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            other => Err(Error::InvalidArgument(format!("unknown report format {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub metadata: Metadata,
    pub rows: Vec<Row>,
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

fn number(v: f64) -> Result<String> {
    if v.is_finite() {
        Ok(format!("{v:.4}"))
    } else {
        Err(Error::Report(format!("non-finite value {v}")))
    }
}

impl Report {
    pub fn new(metadata: Metadata) -> Self {
        Report {
            metadata,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Row) {
        self.rows.push(row);
    }

    pub fn value(&self, model: &str, condition: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.key() == (model, condition, metric))
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        let io = |e: csv::Error| Error::Report(e.to_string());
        w.write_record(COLUMNS).map_err(io)?;
        for r in &self.rows {
            w.write_record([&r.model, &r.condition, &r.metric, &number(r.value)?])
                .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Report(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv of UTF-8 fields is UTF-8"))
    }

    pub fn metadata_json(&self) -> String {
        let m = &self.metadata;
        let notes: Vec<String> = m
            .notes
            .iter()
            .map(|(k, v)| format!("{}: {}", json_str(k), json_str(v)))
            .collect();
        format!(
            "{{\"seed\": {}, \"config_hash\": {}, \"version\": {}, \"notes\": {{{}}}}}",
            m.seed,
            json_str(&m.config_hash),
            json_str(&m.version),
            notes.join(", ")
        )
    }

    pub fn to_json(&self) -> Result<String> {
        let mut out = format!("{{\n  \"metadata\": {},\n  \"rows\": [", self.metadata_json());
        for (i, r) in self.rows.iter().enumerate() {
            out.push_str(if i == 0 { "\n" } else { ",\n" });
            let _ = write!(
                out,
                "    {{\"model\": {}, \"condition\": {}, \"metric\": {}, \"value\": {}}}",
                json_str(&r.model),
                json_str(&r.condition),
                json_str(&r.metric),
                number(r.value)?
            );
        }
        out.push_str(if self.rows.is_empty() { "]\n}\n" } else { "\n  ]\n}\n" });
        Ok(out)
    }

    /// Writes the table; CSV output also writes `<path>.meta.json`.
    pub fn emit(&self, format: Format, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let write = |p: &Path, text: String| fs::write(p, text).map_err(|e| Error::io(p, e));
        match format {
            Format::Json => write(path, self.to_json()?),
            Format::Csv => {
                write(path, self.to_csv()?)?;
                write(&sidecar(path), self.metadata_json() + "\n")
            }
        }
    }

    pub fn from_json(text: &str) -> Result<Report> {
        let bad = |m: &str| Error::Report(m.to_string());
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Report(e.to_string()))?;
        let metadata = parse_metadata(v.get("metadata").ok_or_else(|| bad("missing metadata"))?)?;
        let rows = v
            .get("rows")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("missing rows array"))?;
        let mut out = Report::new(metadata);
        for row in rows {
            let obj = row.as_object().ok_or_else(|| bad("row is not an object"))?;
            let keys: Vec<&str> = obj.keys().map(String::as_str).collect();
            check_schema(&keys)?;
            let s = |k: &str| obj[k].as_str().map(str::to_string).ok_or_else(|| bad(&format!("{k} is not a string")));
            let value = obj["value"].as_f64().ok_or_else(|| bad("value is not a number"))?;
            out.push(Row {
                model: s("model")?,
                condition: s("condition")?,
                metric: s("metric")?,
                value,
            });
        }
        Ok(out)
    }

    /// Parses a CSV table; metadata is read from the sidecar when present.
    pub fn from_csv(text: &str, metadata: Metadata) -> Result<Report> {
        let err = |e: csv::Error| Error::Report(e.to_string());
        let mut r = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let header: Vec<String> = r.headers().map_err(err)?.iter().map(str::to_string).collect();
        check_schema(&header.iter().map(String::as_str).collect::<Vec<_>>())?;
        let mut out = Report::new(metadata);
        for rec in r.records() {
            let rec = rec.map_err(err)?;
            let value = rec[3]
                .parse()
                .map_err(|_| Error::Report(format!("value {:?} is not a number", &rec[3])))?;
            out.push(Row::new(&rec[0], &rec[1], &rec[2], value));
        }
        Ok(out)
    }

    /// Loads a report, choosing the parser from the file extension.
    pub fn load(path: impl AsRef<Path>) -> Result<Report> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            return Report::from_json(&text);
        }
        let meta = match fs::read_to_string(sidecar(path)) {
            Ok(m) => {
                let v: Value = serde_json::from_str(&m).map_err(|e| Error::Report(e.to_string()))?;
                parse_metadata(&v)?
            }
            Err(_) => Metadata::default(),
        };
        Report::from_csv(&text, meta)
    }
}

pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn check_schema(columns: &[&str]) -> Result<()> {
    let mut sorted_found = columns.to_vec();
    sorted_found.sort_unstable();
    let mut sorted_expected = COLUMNS.to_vec();
    sorted_expected.sort_unstable();
    if sorted_found == sorted_expected {
        Ok(())
    } else {
        Err(Error::Report(format!(
            "schema clash: columns {columns:?} do not match {COLUMNS:?}"
        )))
    }
}

fn parse_metadata(v: &Value) -> Result<Metadata> {
    let bad = |m: &str| Error::Report(format!("metadata: {m}"));
    let notes = match v.get("notes") {
        Some(Value::Object(o)) => o
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_str().ok_or_else(|| bad("note is not a string"))?.to_string())))
            .collect::<Result<_>>()?,
        _ => BTreeMap::new(),
    };
    Ok(Metadata {
        seed: v.get("seed").and_then(Value::as_u64).ok_or_else(|| bad("missing seed"))?,
        config_hash: v
            .get("config_hash")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("missing config_hash"))?
            .to_string(),
        version: v.get("version").and_then(Value::as_str).unwrap_or_default().to_string(),
        notes,
    })
}

/// Concatenates reports into one table. `(model, condition, metric)` keys
/// must be unique across the inputs. The first report's metadata is kept,
/// and the merged table notes every input's config hash.
pub fn merge(reports: &[Report]) -> Result<Report> {
    let Some(first) = reports.first() else {
        return Err(Error::Report("nothing to merge".into()));
    };
    let mut out = Report::new(first.metadata.clone());
    if reports.len() > 1 {
        let hashes: Vec<&str> = reports.iter().map(|r| r.metadata.config_hash.as_str()).collect();
        out.metadata.notes.insert("merged_config_hashes".into(), hashes.join(","));
    }
    let mut seen = HashSet::new();
    for r in reports.iter().flat_map(|r| &r.rows) {
        if !seen.insert((r.model.clone(), r.condition.clone(), r.metric.clone())) {
            return Err(Error::Report(format!(
                "duplicate row for model {:?}, condition {:?}, metric {:?}",
                r.model, r.condition, r.metric
            )));
        }
        out.push(r.clone());
    }
    Ok(out)
}

/// Row-major grid as CSV, one line per grid row.
pub fn grid_csv(values: &[f64], width: usize) -> Result<String> {
    if width == 0 || values.len() % width != 0 {
        return Err(Error::Report(format!("{} values do not form rows of {width}", values.len())));
    }
    let mut out = String::new();
    for row in values.chunks(width) {
        let cells = row.iter().map(|&v| number(v)).collect::<Result<Vec<_>>>()?;
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> Metadata {
        Metadata::new(7, "arch=vssm_hier\n").note("alpha_term", "inactive for SSM models")
    }

    #[test]
    fn empty_report_is_header_only() {
        let r = Report::new(meta());
        assert_eq!(r.to_csv().unwrap(), "model,condition,metric,value\n");
        let json = r.to_json().unwrap();
        let v: Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["rows"], Value::Array(vec![]));
        assert_eq!(v["metadata"]["seed"], 7);
    }

    #[test]
    fn json_round_trip_recovers_values() {
        let mut r = Report::new(meta());
        r.push(Row::new("vssm_hier", "clean", "accuracy", 0.9375));
        r.push(Row::new("vssm_hier", "pgd, 5 steps", "accuracy", 0.25));
        let back = Report::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        let csv = r.to_csv().unwrap();
        assert!(csv.contains("\"pgd, 5 steps\",accuracy,0.2500"));
        assert_eq!(Report::from_csv(&csv, meta()).unwrap(), r);
    }

    #[test]
    fn merge_counts_and_duplicates() {
        let mut a = Report::new(meta());
        a.push(Row::new("m1", "clean", "accuracy", 1.0));
        let mut b = Report::new(meta());
        b.push(Row::new("m2", "clean", "accuracy", 0.5));
        b.push(Row::new("m2", "fgsm", "accuracy", 0.25));
        assert_eq!(merge(std::slice::from_ref(&a)).unwrap(), a);
        assert_eq!(merge(&[a.clone(), b.clone()]).unwrap().rows.len(), 3);
        assert!(merge(&[a.clone(), a]).unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn schema_clash_names_columns() {
        let err = Report::from_csv("model,cond,metric,value\n", meta()).unwrap_err();
        assert!(err.to_string().contains("cond"));
    }

    #[test]
    fn non_finite_values_are_refused() {
        let mut r = Report::new(meta());
        r.push(Row::new("m", "c", "x", f64::NAN));
        assert!(r.to_csv().is_err());
    }

    #[test]
    fn grid_rows() {
        assert_eq!(grid_csv(&[0.0, 0.5, 1.0, 0.25], 2).unwrap(), "0.0000,0.5000\n1.0000,0.2500\n");
        assert!(grid_csv(&[0.0; 3], 2).is_err());
    }
}
