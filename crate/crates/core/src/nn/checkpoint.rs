use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{lit, Scalar};

use super::Params;

pub const FORMAT_VERSION: u32 = 1;

/// Ordered, named tensors plus the hash of the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub format_version: u32,
    pub config_hash: String,
    blocks: Vec<(String, Matrix<T>)>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config_hash: config_hash.into(),
            blocks: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    /// Short hex digest used as `config_hash`.
    pub fn hash_config(text: &str) -> String {
        let d = Sha256::digest(text.as_bytes());
        d.iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn push(&mut self, name: impl Into<String>, m: Matrix<T>) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!("bad tensor name {name:?}")));
        }
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate tensor {name}")));
        }
        self.index.insert(name.clone(), self.blocks.len());
        self.blocks.push((name, m));
        Ok(())
    }

    pub fn push_params<P: Params<T>>(&mut self, p: &P, prefix: &str) -> Result<()> {
        for (name, m) in p.named(prefix) {
            self.push(name, m.clone())?;
        }
        Ok(())
    }

    /// Stores a plain vector as a `1 × n` block.
    pub fn push_vec(&mut self, name: impl Into<String>, v: &[T]) -> Result<()> {
        self.push(name, Matrix::row_vector(v))
    }

    pub fn has(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Matrix<T>> {
        self.index
            .get(name)
            .map(|&i| &self.blocks[i].1)
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint has no tensor {name}")))
    }

    pub fn get_vec(&self, name: &str) -> Result<Vec<T>> {
        Ok(self.get(name)?.as_slice().to_vec())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.iter().map(|(n, _)| n.as_str())
    }

    pub fn blocks(&self) -> &[(String, Matrix<T>)] {
        &self.blocks
    }

    /// Copies the tensors named under `prefix` into `p`, checking shapes.
    pub fn load_into<P: Params<T>>(&self, p: &mut P, prefix: &str) -> Result<()> {
        let names: Vec<String> = p.named(prefix).into_iter().map(|(n, _)| n).collect();
        for (name, dst) in names.iter().zip(p.tensors_mut()) {
            let src = self.get(name)?;
            if src.shape() != dst.shape() {
                return Err(Error::DimensionMismatch(format!(
                    "{name}: checkpoint {:?} vs model {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.as_mut_slice().copy_from_slice(src.as_slice());
        }
        Ok(())
    }
}

pub fn write_checkpoint<T: Scalar>(path: &Path, ck: &Checkpoint<T>) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "{} {}", ck.format_version, ck.config_hash);
    for (name, m) in &ck.blocks {
        let _ = writeln!(s, "{name} {} {}", m.rows(), m.cols());
        for row in m.iter_rows() {
            let line: Vec<String> = row.iter().map(|x| format!("{:.16e}", x.as_f64())).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::parse(path, msg);
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| bad("empty checkpoint".into()))?;
    let mut hp = header.split_whitespace();
    let version: u32 = hp
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing format version".into()))?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported format version {version}")));
    }
    let hash = hp.next().ok_or_else(|| bad("missing config hash".into()))?;
    let mut ck = Checkpoint::new(hash);
    while let Some((ln, head)) = lines.next() {
        let f: Vec<&str> = head.split_whitespace().collect();
        if f.len() != 3 {
            return Err(bad(format!("line {}: expected `<name> <rows> <cols>`", ln + 1)));
        }
        let (rows, cols): (usize, usize) = match (f[1].parse(), f[2].parse()) {
            (Ok(r), Ok(c)) => (r, c),
            _ => return Err(bad(format!("line {}: bad shape", ln + 1))),
        };
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (ln, row) = lines.next().ok_or_else(|| bad(format!("tensor {} truncated", f[0])))?;
            let before = data.len();
            for tok in row.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| bad(format!("line {}: bad number {tok:?}", ln + 1)))?;
                data.push(lit::<T>(v));
            }
            if data.len() - before != cols {
                return Err(bad(format!("line {}: expected {cols} values", ln + 1)));
            }
        }
        let m = Matrix::from_vec(rows, cols, data)?;
        ck.push(f[0], m).map_err(|e| bad(e.to_string()))?;
    }
    Ok(ck)
}
