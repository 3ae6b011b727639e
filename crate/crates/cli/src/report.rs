//! Cross-run tables from the `summary.json` / `eval.json` files runs leave behind.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde_json::Value;
use spkdino::eval::fmt_f64;

use crate::{CliError, CliResult};

const SUMMARY_NAMES: [&str; 2] = ["summary.json", "eval.json"];

/// One run's flat record.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub source: PathBuf,
    pub fields: BTreeMap<String, Field>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Field {
    Num(f64),
    Text(String),
}

impl Field {
    fn render(&self) -> String {
        match self {
            Field::Num(x) if x.fract() == 0.0 && x.abs() < 1e15 => format!("{}", *x as i64),
            Field::Num(x) => fmt_f64(*x),
            Field::Text(s) => s.clone(),
        }
    }
}

fn collect(path: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if path.is_file() {
        out.push(path.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect(&p, out)?;
        } else if p
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| SUMMARY_NAMES.contains(&n))
        {
            out.push(p);
        }
    }
    Ok(())
}

pub fn load_records(paths: &[PathBuf]) -> CliResult<Vec<Record>> {
    let mut files = Vec::new();
    for p in paths {
        collect(p, &mut files).map_err(|e| CliError::other(format!("{}: {e}", p.display())))?;
    }
    let mut out = Vec::with_capacity(files.len());
    for f in files {
        let text = std::fs::read_to_string(&f).map_err(|e| CliError::other(format!("{}: {e}", f.display())))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| CliError::other(format!("{}: {e}", f.display())))?;
        let Value::Object(map) = v else {
            return Err(CliError::other(format!("{}: expected a JSON object", f.display())));
        };
        let fields = map
            .into_iter()
            .filter_map(|(k, v)| {
                let f = match v {
                    Value::Number(n) => Field::Num(n.as_f64()?),
                    Value::String(s) => Field::Text(s),
                    Value::Bool(b) => Field::Text(if b { "on" } else { "off" }.into()),
                    _ => return None,
                };
                Some((k, f))
            })
            .collect();
        out.push(Record { source: f, fields });
    }
    Ok(out)
}

/// A row value and one mean per setting (`None` where no run matched).
pub type PivotRow = (f64, Vec<Option<f64>>);

/// Mean of `metric` per (`by` value, setting) where a setting is every text
/// field of the record; rows sorted numerically by `by`.
pub fn pivot(records: &[Record], by: &str, metric: &str) -> (Vec<String>, Vec<PivotRow>) {
    let mut cells: BTreeMap<(u64, String), (f64, usize)> = BTreeMap::new();
    let mut columns = BTreeSet::new();
    let mut rows = BTreeMap::new();
    for r in records {
        let (Some(Field::Num(x)), Some(Field::Num(m))) = (r.fields.get(by), r.fields.get(metric)) else {
            continue;
        };
        if !m.is_finite() {
            continue;
        }
        let label: Vec<String> = r
            .fields
            .iter()
            .filter_map(|(k, v)| match v {
                Field::Text(s) => Some(format!("{k}={s}")),
                Field::Num(_) => None,
            })
            .collect();
        let label = label.join(" ");
        // total order on the row key that matches numeric order for finite values
        let key = x.to_bits() ^ if x.is_sign_negative() { u64::MAX } else { 1 << 63 };
        rows.insert(key, *x);
        columns.insert(label.clone());
        let c = cells.entry((key, label)).or_insert((0.0, 0));
        c.0 += m;
        c.1 += 1;
    }
    let columns: Vec<String> = columns.into_iter().collect();
    let table = rows
        .into_iter()
        .map(|(key, x)| {
            let vals = columns
                .iter()
                .map(|c| cells.get(&(key, c.clone())).map(|(s, n)| s / *n as f64))
                .collect();
            (x, vals)
        })
        .collect();
    (columns, table)
}

/// Writes `runs.csv` (every record, every field) and `table.csv` (the pivot).
pub fn report(paths: &[PathBuf], by: &str, metric: &str, out: &Path) -> CliResult {
    let records = load_records(paths)?;
    if records.is_empty() {
        return Err(CliError::other("no summary.json or eval.json found"));
    }
    let csv_err = |e: csv::Error| CliError::other(e.to_string());

    let keys: BTreeSet<&str> = records
        .iter()
        .flat_map(|r| r.fields.keys().map(String::as_str))
        .collect();
    let mut w = csv::Writer::from_path(out.join("runs.csv")).map_err(csv_err)?;
    w.write_record(std::iter::once("run").chain(keys.iter().copied()))
        .map_err(csv_err)?;
    for r in &records {
        let run = r.source.parent().unwrap_or(Path::new("")).display().to_string();
        let vals = keys
            .iter()
            .map(|k| r.fields.get(*k).map(Field::render).unwrap_or_default());
        w.write_record(std::iter::once(run).chain(vals)).map_err(csv_err)?;
    }
    w.flush()?;

    let (columns, rows) = pivot(&records, by, metric);
    let mut w = csv::Writer::from_path(out.join("table.csv")).map_err(csv_err)?;
    w.write_record(std::iter::once(by).chain(columns.iter().map(String::as_str)))
        .map_err(csv_err)?;
    for (x, vals) in &rows {
        let cells = vals.iter().map(|v| v.map(fmt_f64).unwrap_or_default());
        w.write_record(std::iter::once(fmt_f64(*x)).chain(cells))
            .map_err(csv_err)?;
    }
    w.flush()?;
    println!(
        "{} runs; {metric} by {by}: {} rows x {} settings",
        records.len(),
        rows.len(),
        columns.len()
    );
    Ok(())
}
