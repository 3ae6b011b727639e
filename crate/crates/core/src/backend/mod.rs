//! Scoring and classification back-ends over utterance embeddings.

mod logreg;
mod pca;
mod plda;

pub use logreg::objective as logreg_objective;
pub use logreg::{LogReg, LogRegConfig};
pub use pca::Pca;
pub use plda::{Plda, PldaFit, PldaInit, PldaScorer, SW_JITTER};

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::fmt_f64;
use crate::scalar::{dot, lit, norm, Scalar};

/// Norms below this are treated as this value.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

pub fn cosine_score<T: Scalar>(a: &[T], b: &[T]) -> T {
    let floor = lit::<T>(COSINE_NORM_FLOOR);
    dot(a, b) / (norm(a).max(floor) * norm(b).max(floor))
}

/// Scales to unit length (vectors below the norm floor are left as is).
pub fn length_normalize<T: Scalar>(v: &[T]) -> Vec<T> {
    let n = norm(v);
    if n <= lit(COSINE_NORM_FLOOR) {
        return v.to_vec();
    }
    v.iter().map(|x| *x / n).collect()
}

pub fn mean_vector<T: Scalar>(vs: &[Vec<T>]) -> Vec<T> {
    let d = vs.first().map_or(0, Vec::len);
    let mut m = vec![T::zero(); d];
    for v in vs {
        for (a, b) in m.iter_mut().zip(v) {
            *a += *b;
        }
    }
    let n = lit::<T>(vs.len().max(1) as f64);
    m.iter_mut().for_each(|x| *x /= n);
    m
}

/// Per-class mean embeddings, classes `0..n_classes`.
pub fn class_means<T: Scalar>(vs: &[Vec<T>], labels: &[usize], n_classes: usize) -> Result<Vec<Vec<T>>> {
    if vs.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} vectors, {} labels",
            vs.len(),
            labels.len()
        )));
    }
    let mut groups: Vec<Vec<Vec<T>>> = vec![Vec::new(); n_classes];
    for (v, &l) in vs.iter().zip(labels) {
        groups
            .get_mut(l)
            .ok_or_else(|| Error::InvalidArgument(format!("label {l} >= {n_classes}")))?
            .push(v.clone());
    }
    groups
        .iter()
        .enumerate()
        .map(|(c, g)| {
            if g.is_empty() {
                Err(Error::InvalidArgument(format!("class {c} has no examples")))
            } else {
                Ok(mean_vector(g))
            }
        })
        .collect()
}

/// Embedding file: one `<utt_id> <values…>` line per utterance.
pub fn write_embeddings<T: Scalar>(path: &Path, ids: &[String], vs: &[Vec<T>]) -> Result<()> {
    let mut s = String::new();
    for (id, v) in ids.iter().zip(vs) {
        s.push_str(id);
        for x in v {
            let _ = write!(s, " {}", fmt_f64(x.as_f64()));
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings<T: Scalar>(path: &Path) -> Result<(Vec<String>, Vec<Vec<T>>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ids = Vec::new();
    let mut vs: Vec<Vec<T>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let mut f = line.split_whitespace();
        let Some(id) = f.next() else { continue };
        let v = f
            .map(|t| t.parse::<f64>().map(lit::<T>))
            .collect::<std::result::Result<Vec<T>, _>>()
            .map_err(|_| Error::parse(path, format!("line {}: bad number", ln + 1)))?;
        if v.is_empty() || vs.first().is_some_and(|w| w.len() != v.len()) {
            return Err(Error::parse(path, format!("line {}: inconsistent dimension", ln + 1)));
        }
        ids.push(id.to_string());
        vs.push(v);
    }
    Ok((ids, vs))
}

/// Lookup from utterance id to embedding.
pub fn embedding_index<'a, T>(ids: &'a [String], vs: &'a [Vec<T>]) -> HashMap<&'a str, &'a [T]> {
    ids.iter()
        .map(String::as_str)
        .zip(vs.iter().map(Vec::as_slice))
        .collect()
}

/// PLDA together with the preprocessing it was trained under: subtract the
/// training mean, then optionally scale to unit length.
#[derive(Clone, Debug, PartialEq)]
pub struct PldaBackend<T> {
    pub mean: Vec<T>,
    pub length_norm: bool,
    pub plda: Plda<T>,
}

impl<T: Scalar> PldaBackend<T> {
    /// Fits the preprocessing and the PLDA model; returns the EM log-likelihood trace too.
    pub fn fit(
        xs: &[Vec<T>],
        labels: &[usize],
        q: usize,
        n_iter: usize,
        init: PldaInit,
        length_norm: bool,
    ) -> Result<(Self, Vec<f64>)> {
        let mean = mean_vector(xs);
        let pre = |v: &Vec<T>| preprocess(v, &mean, length_norm);
        let ys: Vec<Vec<T>> = xs.iter().map(pre).collect();
        let fit = Plda::fit(&ys, labels, q, n_iter, init)?;
        Ok((
            Self {
                mean,
                length_norm,
                plda: fit.model,
            },
            fit.log_likelihood,
        ))
    }

    pub fn preprocess(&self, v: &[T]) -> Vec<T> {
        preprocess(v, &self.mean, self.length_norm)
    }

    /// Log-likelihood ratio of raw embeddings.
    pub fn scorer(&self) -> Result<impl Fn(&[T], &[T]) -> T + '_> {
        let s = self.plda.scorer()?;
        Ok(move |e: &[T], t: &[T]| s.llr(&self.preprocess(e), &self.preprocess(t)))
    }

    /// `plda-backend <length_norm>`, the mean, then the PLDA model.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = format!("plda-backend {}\n", u8::from(self.length_norm));
        let mean: Vec<String> = self.mean.iter().map(|x| format!("{:.16e}", x.as_f64())).collect();
        let _ = writeln!(s, "{}", mean.join(" "));
        s.push_str(&self.plda.to_text());
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::parse(path, m.to_string());
        let mut parts = text.splitn(3, '\n');
        let length_norm = match parts
            .next()
            .map(str::split_whitespace)
            .map(|w| w.collect::<Vec<_>>())
            .as_deref()
        {
            Some(["plda-backend", "0"]) => false,
            Some(["plda-backend", "1"]) => true,
            _ => return Err(bad("expected `plda-backend <0|1>` header")),
        };
        let mean = parts
            .next()
            .ok_or_else(|| bad("missing mean"))?
            .split_whitespace()
            .map(|t| t.parse::<f64>().map(lit::<T>).map_err(|_| bad("bad number")))
            .collect::<Result<Vec<T>>>()?;
        let plda = Plda::parse_text(parts.next().unwrap_or(""), path)?;
        if plda.dim() != mean.len() {
            return Err(bad("mean and model dimensions differ"));
        }
        Ok(Self {
            mean,
            length_norm,
            plda,
        })
    }
}

fn preprocess<T: Scalar>(v: &[T], mean: &[T], length_norm: bool) -> Vec<T> {
    let c: Vec<T> = v.iter().zip(mean).map(|(a, b)| *a - *b).collect();
    if length_norm {
        length_normalize(&c)
    } else {
        c
    }
}
