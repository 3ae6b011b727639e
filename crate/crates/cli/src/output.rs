//! Small writers for the tool's own artifacts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use spkdino::eval::fmt_f64;

pub enum Json {
    Str(String),
    Num(f64),
    Int(usize),
    Bool(bool),
}

/// One flat JSON object, numbers with 17 significant digits.
pub fn write_json(path: &Path, fields: &[(&str, Json)]) -> std::io::Result<String> {
    let body: Vec<String> = fields
        .iter()
        .map(|(k, v)| {
            let v = match v {
                Json::Str(s) => serde_json::to_string(s).expect("strings serialize"),
                Json::Num(x) if x.is_finite() => fmt_f64(*x),
                Json::Num(_) => "null".into(),
                Json::Int(n) => n.to_string(),
                Json::Bool(b) => b.to_string(),
            };
            format!("  {}: {v}", serde_json::to_string(k).expect("strings serialize"))
        })
        .collect();
    let text = format!("{{\n{}\n}}\n", body.join(",\n"));
    std::fs::write(path, &text)?;
    Ok(text)
}

/// Line-buffered CSV log that is flushed after every row, so a run that
/// stops early still leaves its history behind.
pub struct CsvLog {
    out: BufWriter<File>,
}

impl CsvLog {
    pub fn create(path: &Path, header: &str) -> std::io::Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{header}")?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn row(&mut self, line: &str) -> std::io::Result<()> {
        writeln!(self.out, "{line}")?;
        self.out.flush()
    }
}
