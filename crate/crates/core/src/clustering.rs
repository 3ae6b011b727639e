//! Pseudo speaker labels from unlabeled embeddings (k-means, then
//! agglomerative clustering of the centers) and the relabel → retrain loop.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng as _;

use crate::backend::cosine_score;
use crate::data::{extract_embeddings, index_labels, Augmenter, Frontend, PreparedUtt};
use crate::error::{Error, Result};
use crate::eval::{eer, fmt_f64, Trial};
use crate::nn::{EncoderParams, GradScope};
use crate::rng;
use crate::scalar::{lit, Scalar};
use crate::supervised::{train_supervised, Classifier, Labeled, SupervisedConfig, SupervisedEpoch, SupervisedInit};

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| (*x - *y) * (*x - *y)).sum()
}

fn check_points<T: Scalar>(xs: &[Vec<T>]) -> Result<usize> {
    let d = xs
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::InvalidArgument("no points to cluster".into()))?;
    if xs.iter().any(|x| x.len() != d) {
        return Err(Error::DimensionMismatch("points differ in length".into()));
    }
    Ok(d)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans<T> {
    pub assignment: Vec<usize>,
    pub centers: Vec<Vec<T>>,
    /// Inertia after each assignment step.
    pub inertia: Vec<f64>,
}

impl<T> KMeans<T> {
    pub fn final_inertia(&self) -> f64 {
        self.inertia.last().copied().unwrap_or(0.0)
    }
}

/// Nearest center per point (ties go to the lower index) and the total squared distance.
fn assign<T: Scalar>(xs: &[Vec<T>], centers: &[Vec<T>]) -> (Vec<usize>, Vec<T>, f64) {
    let mut a = Vec::with_capacity(xs.len());
    let mut dist = Vec::with_capacity(xs.len());
    let mut total = 0.0;
    for x in xs {
        let (mut best, mut bd) = (0, sq_dist(x, &centers[0]));
        for (c, ctr) in centers.iter().enumerate().skip(1) {
            let d = sq_dist(x, ctr);
            if d < bd {
                best = c;
                bd = d;
            }
        }
        a.push(best);
        dist.push(bd);
        total += bd.as_f64();
    }
    (a, dist, total)
}

/// k-means++ seeding followed by Lloyd iterations until the assignment is
/// stable or `max_iter` updates have run. An empty cluster is re-seeded at the
/// point currently farthest from its center.
pub fn kmeans<T: Scalar>(xs: &[Vec<T>], k: usize, max_iter: usize, seed: u64) -> Result<KMeans<T>> {
    let d = check_points(xs)?;
    if k == 0 || k > xs.len() {
        return Err(Error::InvalidArgument(format!("k = {k} must lie in 1..={}", xs.len())));
    }
    let mut r = rng::derived(seed, &[&"kmeans++"]);
    let mut centers = vec![xs[r.random_range(0..xs.len())].clone()];
    let mut d2: Vec<f64> = xs.iter().map(|x| sq_dist(x, &centers[0]).as_f64()).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = r.random::<f64>() * total;
            let mut pick = d2.iter().rposition(|&v| v > 0.0).unwrap_or(0);
            for (i, v) in d2.iter().enumerate() {
                if *v > 0.0 && u < *v {
                    pick = i;
                    break;
                }
                u -= v;
            }
            pick
        } else {
            // all remaining points coincide with chosen centers
            r.random_range(0..xs.len())
        };
        centers.push(xs[next].clone());
        for (v, x) in d2.iter_mut().zip(xs) {
            *v = v.min(sq_dist(x, &xs[next]).as_f64());
        }
    }
    let (mut assignment, mut dist, inertia0) = assign(xs, &centers);
    let mut inertia = vec![inertia0];
    for _ in 0..max_iter {
        let mut sums = vec![vec![T::zero(); d]; k];
        let mut counts = vec![0usize; k];
        for (x, &a) in xs.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(x) {
                *s += *v;
            }
        }
        let mut taken = vec![false; xs.len()];
        for c in 0..k {
            if counts[c] > 0 {
                let n = lit::<T>(counts[c] as f64);
                centers[c] = sums[c].iter().map(|s| *s / n).collect();
            } else {
                let far = (0..xs.len())
                    .filter(|&i| !taken[i])
                    .fold(None::<usize>, |b, i| match b {
                        Some(j) if dist[j] >= dist[i] => Some(j),
                        _ => Some(i),
                    })
                    .expect("k <= n leaves a free point");
                taken[far] = true;
                centers[c] = xs[far].clone();
            }
        }
        let (a, dd, total) = assign(xs, &centers);
        inertia.push(total);
        let stable = a == assignment;
        assignment = a;
        dist = dd;
        if stable {
            break;
        }
    }
    Ok(KMeans {
        assignment,
        centers,
        inertia,
    })
}

/// Agglomerative clustering with average linkage on cosine distance.
///
/// Clusters are ordered by their smallest member index; among equal
/// distances the pair with the smallest `(i, j)` in that order merges first.
/// Returned labels are dense, numbered by first appearance.
pub fn ahc<T: Scalar>(items: &[Vec<T>], n_clusters: usize) -> Result<Vec<usize>> {
    check_points(items)?;
    let n = items.len();
    if n_clusters == 0 || n_clusters > n {
        return Err(Error::InvalidArgument(format!(
            "n_clusters = {n_clusters} must lie in 1..={n}"
        )));
    }
    let mut dist = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = 1.0 - cosine_score(&items[i], &items[j]).as_f64();
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    // active cluster ids are their smallest member; `members[i]` is empty once merged away
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut active: Vec<usize> = (0..n).collect();
    while active.len() > n_clusters {
        let mut best = (f64::INFINITY, 0, 0);
        for (ai, &i) in active.iter().enumerate() {
            for &j in &active[ai + 1..] {
                if dist[i][j] < best.0 {
                    best = (dist[i][j], i, j);
                }
            }
        }
        let (_, i, j) = best;
        let (ni, nj) = (members[i].len() as f64, members[j].len() as f64);
        for &k in &active {
            if k != i && k != j {
                let d = (ni * dist[i][k] + nj * dist[j][k]) / (ni + nj);
                dist[i][k] = d;
                dist[k][i] = d;
            }
        }
        let moved = std::mem::take(&mut members[j]);
        members[i].extend(moved);
        active.retain(|&k| k != j);
    }
    let mut labels = vec![0usize; n];
    for (c, &i) in active.iter().enumerate() {
        for &m in &members[i] {
            labels[m] = c;
        }
    }
    Ok(dense_labels(&labels))
}

/// Renumbers labels by order of first appearance.
pub fn dense_labels(labels: &[usize]) -> Vec<usize> {
    let mut map = HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

/// k-means with `kmeans_k` means, AHC of the means into `n_clusters`, and the
/// center labels propagated back to the points.
pub fn pseudo_label_embeddings<T: Scalar>(
    embeddings: &[Vec<T>],
    kmeans_k: usize,
    n_clusters: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if n_clusters > kmeans_k {
        return Err(Error::InvalidArgument(format!(
            "ahc clusters ({n_clusters}) exceed k-means centers ({kmeans_k})"
        )));
    }
    let km = kmeans(embeddings, kmeans_k, 100, seed)?;
    let center_labels = ahc(&km.centers, n_clusters)?;
    Ok(dense_labels(
        &km.assignment.iter().map(|&a| center_labels[a]).collect::<Vec<_>>(),
    ))
}

pub fn pseudo_label<T: Scalar>(
    encoder: &EncoderParams<T>,
    fe: &Frontend<T>,
    utts: &[PreparedUtt<T>],
    kmeans_k: usize,
    n_clusters: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    pseudo_label_embeddings(&extract_embeddings(encoder, fe, utts)?, kmeans_k, n_clusters, seed)
}

/// Fraction of points whose cluster's majority true label matches their own.
pub fn purity(pred: &[usize], truth: &[usize]) -> f64 {
    let mut table: HashMap<usize, HashMap<usize, usize>> = HashMap::new();
    for (&p, &t) in pred.iter().zip(truth) {
        *table.entry(p).or_default().entry(t).or_default() += 1;
    }
    let hits: usize = table.values().map(|row| row.values().copied().max().unwrap_or(0)).sum();
    hits as f64 / pred.len().max(1) as f64
}

/// F1 of "same cluster" against "same true label" over all unordered pairs.
pub fn pairwise_f1(pred: &[usize], truth: &[usize]) -> f64 {
    let pairs = |n: usize| (n * n.saturating_sub(1) / 2) as f64;
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut pc: HashMap<usize, usize> = HashMap::new();
    let mut tc: HashMap<usize, usize> = HashMap::new();
    for (&p, &t) in pred.iter().zip(truth) {
        *joint.entry((p, t)).or_default() += 1;
        *pc.entry(p).or_default() += 1;
        *tc.entry(t).or_default() += 1;
    }
    let tp: f64 = joint.values().map(|&n| pairs(n)).sum();
    let pp: f64 = pc.values().map(|&n| pairs(n)).sum();
    let tt: f64 = tc.values().map(|&n| pairs(n)).sum();
    if tp == 0.0 {
        return 0.0;
    }
    let (prec, rec) = (tp / pp, tp / tt);
    2.0 * prec * rec / (prec + rec)
}

pub fn write_pseudo_labels(path: &Path, ids: &[String], labels: &[usize]) -> Result<()> {
    let mut s = String::new();
    for (id, l) in ids.iter().zip(labels) {
        let _ = writeln!(s, "{id} {l}");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_pseudo_labels(path: &Path) -> Result<Vec<(String, usize)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split_whitespace().collect();
            match f.as_slice() {
                [id, lab] => lab
                    .parse()
                    .map(|v| (id.to_string(), v))
                    .map_err(|_| Error::parse(path, format!("line {}: bad label", i + 1))),
                _ => Err(Error::parse(
                    path,
                    format!("line {}: expected `<utt_id> <label>`", i + 1),
                )),
            }
        })
        .collect()
}

/// Cosine-scored EER of `trials` over the given utterances.
pub fn heldout_eer<T: Scalar>(
    encoder: &EncoderParams<T>,
    fe: &Frontend<T>,
    utts: &[PreparedUtt<T>],
    trials: &[Trial],
) -> Result<f64> {
    let embs = extract_embeddings(encoder, fe, utts)?;
    let index: HashMap<&str, &Vec<T>> = utts.iter().map(|u| u.utt_id.as_str()).zip(&embs).collect();
    let mut pairs = Vec::with_capacity(trials.len());
    for t in trials {
        let (Some(e), Some(s)) = (index.get(t.enroll.as_str()), index.get(t.test.as_str())) else {
            return Err(Error::InvalidArgument(format!(
                "trial {} {} not in held-out set",
                t.enroll, t.test
            )));
        };
        let label = t
            .target
            .ok_or_else(|| Error::InvalidArgument("held-out trials need target labels".into()))?;
        pairs.push((cosine_score(e, s).as_f64(), label));
    }
    eer(&pairs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterateConfig {
    pub cycles: usize,
    pub kmeans_k: usize,
    pub n_clusters: usize,
    /// Per-cycle training; its margin is the cycle margin.
    pub train: SupervisedConfig,
    /// Double hidden widths for every cycle's fresh model.
    pub widen: bool,
    /// Large-margin stage after the last cycle (post-pooling layers only); `None` skips it.
    pub robust: Option<SupervisedConfig>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Initial,
    Cycle,
    Robust,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Initial => "initial",
            Stage::Cycle => "cycle",
            Stage::Robust => "robust",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CycleMetrics {
    pub cycle: usize,
    pub stage: Stage,
    /// Quality of the pseudo labels the stage trained on (absent for the initial model).
    pub n_clusters: Option<usize>,
    pub purity: Option<f64>,
    pub pairwise_f1: Option<f64>,
    pub eer: f64,
    pub train_accuracy: Option<f64>,
}

pub const METRICS_HEADER: &str = "cycle,stage,n_clusters,purity,pairwise_f1,eer,train_accuracy";

impl CycleMetrics {
    pub fn csv_row(&self) -> String {
        let o = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.cycle,
            self.stage.name(),
            self.n_clusters.map(|n| n.to_string()).unwrap_or_default(),
            o(self.purity),
            o(self.pairwise_f1),
            fmt_f64(self.eer),
            o(self.train_accuracy)
        )
    }
}

/// Everything the loop produced.
pub struct IterateOutput<T> {
    pub encoder: EncoderParams<T>,
    pub classifier: Option<Classifier<T>>,
    pub labels: Option<Vec<usize>>,
    pub metrics: Vec<CycleMetrics>,
}

/// Repeats pseudo-label → train-fresh-model for `cycles` rounds, then the
/// optional large-margin stage. `truth` (true speaker ids of `train`) is used
/// only for the purity and F1 columns.
#[allow(clippy::too_many_arguments)]
pub fn iterate_pipeline<T: Scalar>(
    cfg: &IterateConfig,
    initial: &EncoderParams<T>,
    fe: &Frontend<T>,
    aug: Option<&Augmenter<T>>,
    train: &[PreparedUtt<T>],
    heldout: &[PreparedUtt<T>],
    trials: &[Trial],
    seed: u64,
    mut on_epoch: impl FnMut(usize, Stage, &SupervisedEpoch),
    mut on_cycle: impl FnMut(&CycleMetrics),
) -> Result<IterateOutput<T>> {
    let (truth, _) = index_labels(train.iter().map(|u| u.speaker_id.as_str()));
    let mut metrics = Vec::new();
    let mut push = |m: CycleMetrics, metrics: &mut Vec<CycleMetrics>| {
        on_cycle(&m);
        metrics.push(m);
    };
    push(
        CycleMetrics {
            cycle: 0,
            stage: Stage::Initial,
            n_clusters: None,
            purity: None,
            pairwise_f1: None,
            eer: heldout_eer(initial, fe, heldout, trials)?,
            train_accuracy: None,
        },
        &mut metrics,
    );
    let mut encoder = initial.clone();
    let mut classifier = None;
    let mut labels = None;
    let mut enc_cfg = initial.config();
    for cycle in 1..=cfg.cycles {
        let lab = pseudo_label(
            &encoder,
            fe,
            train,
            cfg.kmeans_k,
            cfg.n_clusters,
            rng::derive_seed(seed, &[&"pl", &cycle]),
        )?;
        let n_cls = lab.iter().max().map_or(0, |m| m + 1);
        if cfg.widen {
            enc_cfg = enc_cfg.widened();
        }
        let (model, hist) = train_supervised(
            &cfg.train,
            SupervisedInit::Fresh(&enc_cfg),
            fe,
            aug,
            Labeled::new(train, &lab)?,
            n_cls,
            GradScope::All,
            rng::derive_seed(seed, &[&"cycle", &cycle]),
            |e| on_epoch(cycle, Stage::Cycle, e),
        )?;
        push(
            CycleMetrics {
                cycle,
                stage: Stage::Cycle,
                n_clusters: Some(n_cls),
                purity: Some(purity(&lab, &truth)),
                pairwise_f1: Some(pairwise_f1(&lab, &truth)),
                eer: heldout_eer(&model.encoder, fe, heldout, trials)?,
                train_accuracy: hist.last().map(|h| h.accuracy),
            },
            &mut metrics,
        );
        encoder = model.encoder.clone();
        classifier = Some(model);
        labels = Some(lab);
    }
    if let (Some(rcfg), Some(model), Some(lab)) = (&cfg.robust, classifier.as_ref(), labels.as_ref()) {
        let n_cls = model.n_classes();
        let (tuned, hist) = train_supervised(
            rcfg,
            SupervisedInit::Model(model),
            fe,
            aug,
            Labeled::new(train, lab)?,
            n_cls,
            GradScope::PostPooling,
            rng::derive_seed(seed, &[&"robust"]),
            |e| on_epoch(cfg.cycles, Stage::Robust, e),
        )?;
        push(
            CycleMetrics {
                cycle: cfg.cycles,
                stage: Stage::Robust,
                n_clusters: Some(n_cls),
                purity: Some(purity(lab, &truth)),
                pairwise_f1: Some(pairwise_f1(lab, &truth)),
                eer: heldout_eer(&tuned.encoder, fe, heldout, trials)?,
                train_accuracy: hist.last().map(|h| h.accuracy),
            },
            &mut metrics,
        );
        encoder = tuned.encoder.clone();
        classifier = Some(tuned);
    }
    Ok(IterateOutput {
        encoder,
        classifier,
        labels,
        metrics,
    })
}
