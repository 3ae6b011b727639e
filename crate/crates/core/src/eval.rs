//! Verification and classification metrics: DET sweep, EER, minDCF, accuracy,
//! cross-validation folds, and the trial/score file formats.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

/// One scored trial.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredTrial {
    pub enroll: String,
    pub test: String,
    pub score: f64,
    pub target: bool,
}

/// A trial definition; the label is optional in trial files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub target: Option<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_fa: f64,
    pub p_miss: f64,
}

fn split_counts(trials: &[(f64, bool)]) -> Result<(usize, usize)> {
    let n_t = trials.iter().filter(|t| t.1).count();
    let n_n = trials.len() - n_t;
    if n_t == 0 || n_n == 0 {
        return Err(Error::InvalidArgument(format!(
            "need at least one target and one nontarget trial (got {n_t} and {n_n})"
        )));
    }
    if trials.iter().any(|t| !t.0.is_finite()) {
        return Err(Error::InvalidArgument("scores must be finite".into()));
    }
    Ok((n_t, n_n))
}

type Counts = Vec<(f64, usize, usize)>;

/// `(threshold, #nontarget ≥ θ, #target < θ)` at −∞, every distinct score and +∞.
fn sweep_counts(trials: &[(f64, bool)]) -> Result<(Counts, usize, usize)> {
    let (n_t, n_n) = split_counts(trials)?;
    let mut sorted: Vec<(f64, bool)> = trials.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut pts = vec![(f64::NEG_INFINITY, n_n, 0)];
    // Scores strictly below the current threshold.
    let (mut miss, mut rejected_nt) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let th = sorted[i].0;
        pts.push((th, n_n - rejected_nt, miss));
        while i < sorted.len() && sorted[i].0 == th {
            if sorted[i].1 {
                miss += 1;
            } else {
                rejected_nt += 1;
            }
            i += 1;
        }
    }
    pts.push((f64::INFINITY, 0, n_t));
    pts.dedup_by(|b, a| a.1 == b.1 && a.2 == b.2);
    Ok((pts, n_t, n_n))
}

/// Operating points at −∞, every distinct score and +∞, with
/// `P_fa = #{nontarget ≥ θ}/N_n` and `P_miss = #{target < θ}/N_t`.
/// Consecutive thresholds with identical error rates are merged.
pub fn det_sweep(trials: &[(f64, bool)]) -> Result<Vec<DetPoint>> {
    let (pts, n_t, n_n) = sweep_counts(trials)?;
    Ok(pts
        .into_iter()
        .map(|(threshold, fa, miss)| DetPoint {
            threshold,
            p_fa: fa as f64 / n_n as f64,
            p_miss: miss as f64 / n_t as f64,
        })
        .collect())
}

/// Equal error rate on the convex hull of the DET points: linear interpolation
/// between the two hull vertices where `P_fa − P_miss` changes sign.
///
/// Hull and crossing are computed in integer counts, so the result is the
/// correctly rounded value of an exact rational.
pub fn eer(trials: &[(f64, bool)]) -> Result<f64> {
    let (pts, n_t, n_n) = sweep_counts(trials)?;
    let (nt, nn) = (n_t as i128, n_n as i128);
    // Scaled coordinates (P_fa, P_miss)·N_t·N_n, ascending P_fa.
    let mut xy: Vec<(i128, i128)> = pts.iter().rev().map(|p| (p.1 as i128 * nt, p.2 as i128 * nn)).collect();
    xy.dedup();
    let mut hull: Vec<(i128, i128)> = Vec::with_capacity(xy.len());
    for p in xy {
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            if (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0) <= 0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    let scale = nt * nn;
    for w in hull.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (da, db) = (a.0 - a.1, b.0 - b.1);
        if da == 0 {
            return Ok(ratio(a.0, scale));
        }
        if da < 0 && db >= 0 {
            // x = (a.0·b.1 − a.1·b.0) / ((b.1 − a.1) − (b.0 − a.0)), in scaled units.
            let num = a.0 * b.1 - a.1 * b.0;
            let den = (b.1 - a.1) - (b.0 - a.0);
            return Ok(ratio(num, den * scale));
        }
    }
    Ok(hull.last().map_or(0.5, |p| ratio(p.0, scale)))
}

/// `num / den` as a reduced fraction, so equal rationals map to the same float.
fn ratio(num: i128, den: i128) -> f64 {
    let (mut a, mut b) = (num.abs(), den.abs());
    while b != 0 {
        (a, b) = (b, a % b);
    }
    let g = a.max(1);
    (num / g) as f64 / (den / g) as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

/// Minimum over thresholds of the detection cost, normalized by the cost of
/// the better trivial system.
pub fn min_dcf(trials: &[(f64, bool)], p: DcfParams) -> Result<f64> {
    if !(p.p_target > 0.0 && p.p_target < 1.0 && p.c_miss > 0.0 && p.c_fa > 0.0) {
        return Err(Error::InvalidArgument(format!("invalid cost parameters {p:?}")));
    }
    let norm = (p.p_target * p.c_miss).min((1.0 - p.p_target) * p.c_fa);
    let best = det_sweep(trials)?
        .iter()
        .map(|d| p.p_target * p.c_miss * d.p_miss + (1.0 - p.p_target) * p.c_fa * d.p_fa)
        .fold(f64::INFINITY, f64::min);
    Ok(best / norm)
}

pub fn accuracy<L: PartialEq>(preds: &[L], labels: &[L]) -> f64 {
    assert_eq!(preds.len(), labels.len(), "prediction/label length");
    if preds.is_empty() {
        return 0.0;
    }
    preds.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / preds.len() as f64
}

#[derive(Clone, Copy, Debug)]
pub enum Stratify<'a> {
    None,
    /// Balance these class labels across folds.
    Class(&'a [usize]),
    /// Keep every member of a group in a single fold.
    Group(&'a [usize]),
}

/// Splits `0..n` into `k` folds (deterministic in `seed`).
pub fn kfold(n: usize, k: usize, mode: Stratify<'_>, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("need 1 <= k <= n, got k={k}, n={n}")));
    }
    let mut r = rng::derived(seed, &[&"kfold"]);
    let mut folds = vec![Vec::new(); k];
    match mode {
        Stratify::None => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut r);
            for (j, i) in idx.into_iter().enumerate() {
                folds[j % k].push(i);
            }
        }
        Stratify::Class(labels) | Stratify::Group(labels) if labels.len() != n => {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {n} items",
                labels.len()
            )));
        }
        Stratify::Class(labels) => {
            let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, &c) in labels.iter().enumerate() {
                by_class.entry(c).or_default().push(i);
            }
            let mut next = 0;
            for (_, mut members) in by_class {
                members.shuffle(&mut r);
                for i in members {
                    folds[next % k].push(i);
                    next += 1;
                }
            }
        }
        Stratify::Group(groups) => {
            let mut by_group: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, &g) in groups.iter().enumerate() {
                by_group.entry(g).or_default().push(i);
            }
            if by_group.len() < k {
                return Err(Error::InvalidArgument(format!(
                    "{} groups cannot fill {k} folds",
                    by_group.len()
                )));
            }
            let mut groups: Vec<Vec<usize>> = by_group.into_values().collect();
            groups.shuffle(&mut r);
            groups.sort_by_key(|g| std::cmp::Reverse(g.len()));
            for g in groups {
                let smallest = (0..k).min_by_key(|&f| (folds[f].len(), f)).expect("k > 0");
                folds[smallest].extend(g);
            }
        }
    }
    for f in folds.iter_mut() {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Every unordered pair of distinct utterances, labelled by speaker identity.
/// Nontarget pairs are subsampled to at most `max_nontarget` (deterministic in `seed`).
pub fn make_trials(utts: &[(String, String)], max_nontarget: Option<usize>, seed: u64) -> Vec<Trial> {
    let mut target = Vec::new();
    let mut non = Vec::new();
    for i in 0..utts.len() {
        for j in i + 1..utts.len() {
            let t = Trial {
                enroll: utts[i].0.clone(),
                test: utts[j].0.clone(),
                target: Some(utts[i].1 == utts[j].1),
            };
            if utts[i].1 == utts[j].1 {
                target.push(t);
            } else {
                non.push(t);
            }
        }
    }
    if let Some(m) = max_nontarget {
        if non.len() > m {
            non.shuffle(&mut rng::derived(seed, &[&"trials"]));
            non.truncate(m);
        }
    }
    target.extend(non);
    target
}

pub fn write_trials(path: &Path, trials: &[Trial]) -> Result<()> {
    let mut s = String::new();
    for t in trials {
        let _ = match t.target {
            Some(true) => writeln!(s, "{} {} target", t.enroll, t.test),
            Some(false) => writeln!(s, "{} {} nontarget", t.enroll, t.test),
            None => writeln!(s, "{} {}", t.enroll, t.test),
        };
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        let target = match f.as_slice() {
            [_, _] => None,
            [_, _, "target"] => Some(true),
            [_, _, "nontarget"] => Some(false),
            _ => {
                return Err(Error::parse(
                    path,
                    format!("line {}: expected `<enroll> <test> [target|nontarget]`", ln + 1),
                ))
            }
        };
        out.push(Trial {
            enroll: f[0].to_string(),
            test: f[1].to_string(),
            target,
        });
    }
    Ok(out)
}

pub fn write_scores(path: &Path, scores: &[(String, String, f64)]) -> Result<()> {
    let mut s = String::new();
    for (e, t, v) in scores {
        let _ = writeln!(s, "{e} {t} {}", fmt_f64(*v));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<(String, String, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.is_empty() {
            continue;
        }
        let score = match f.as_slice() {
            [_, _, v] => v.parse::<f64>().ok(),
            _ => None,
        }
        .ok_or_else(|| Error::parse(path, format!("line {}: expected `<enroll> <test> <score>`", ln + 1)))?;
        out.push((f[0].to_string(), f[1].to_string(), score));
    }
    Ok(out)
}

/// Attaches trial labels to scores. Every labelled trial must have a score.
pub fn join_scores(scores: &[(String, String, f64)], trials: &[Trial]) -> Result<Vec<ScoredTrial>> {
    let index: HashMap<(&str, &str), f64> = scores.iter().map(|(e, t, s)| ((e.as_str(), t.as_str()), *s)).collect();
    let mut out = Vec::with_capacity(trials.len());
    for t in trials {
        let Some(target) = t.target else {
            return Err(Error::InvalidArgument(format!(
                "trial {} {} has no target/nontarget label",
                t.enroll, t.test
            )));
        };
        let score = index
            .get(&(t.enroll.as_str(), t.test.as_str()))
            .or_else(|| index.get(&(t.test.as_str(), t.enroll.as_str())))
            .ok_or_else(|| Error::InvalidArgument(format!("no score for trial {} {}", t.enroll, t.test)))?;
        out.push(ScoredTrial {
            enroll: t.enroll.clone(),
            test: t.test.clone(),
            score: *score,
            target,
        });
    }
    Ok(out)
}

pub fn score_label_pairs(trials: &[ScoredTrial]) -> Vec<(f64, bool)> {
    trials.iter().map(|t| (t.score, t.target)).collect()
}

pub fn write_det_csv(path: &Path, pts: &[DetPoint]) -> Result<()> {
    let mut s = String::from("threshold,p_fa,p_miss\n");
    for p in pts {
        let _ = writeln!(s, "{},{},{}", fmt_f64(p.threshold), fmt_f64(p.p_fa), fmt_f64(p.p_miss));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// 17 significant digits; infinities as `inf`/`-inf`.
pub fn fmt_f64(x: f64) -> String {
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 || x.is_nan() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..17).contains(&exp) {
        let decimals = (16 - exp).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        format!("{x:.16e}")
    }
}
