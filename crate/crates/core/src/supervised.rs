//! Supervised embedding training: x-vector style classification with an
//! additive angular margin, and transfer of a pretrained encoder to a labeled
//! task (all-at-once or affine-layers-first).

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::augment::{pad_chunk, PadMode};
use crate::data::{Augmenter, Frontend, PreparedUtt};
use crate::dino::{schedule_value, ScheduleKind};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::linalg::Matrix;
use crate::nn::{
    AdamConfig, AdamState, Affine, Checkpoint, EncoderCache, EncoderConfig, EncoderParams, GradScope, Params,
};
use crate::rng::{self, Rng};
use crate::scalar::{dot, lit, norm, Scalar};

/// Norms below this are treated as this value inside the cosine classifier.
pub const AAM_NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct AamConfig {
    pub scale: f64,
    pub margin: f64,
    /// The margin grows linearly from 0 over this many epochs.
    pub margin_warmup_epochs: usize,
}

impl Default for AamConfig {
    fn default() -> Self {
        Self {
            scale: 30.0,
            margin: 0.3,
            margin_warmup_epochs: 20,
        }
    }
}

impl AamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::InvalidArgument("aam scale must be positive".into()));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::InvalidArgument("aam margin must lie in [0, pi/2)".into()));
        }
        Ok(())
    }
}

pub fn margin_at(epoch: usize, cfg: &AamConfig) -> f64 {
    if cfg.margin_warmup_epochs == 0 || epoch >= cfg.margin_warmup_epochs {
        cfg.margin
    } else {
        cfg.margin * epoch as f64 / cfg.margin_warmup_epochs as f64
    }
}

/// Target-class logit before scaling, as a function of `c = cos θ`, and its derivative in `c`.
///
/// `cos(θ + m)` while `θ + m ≤ π`; beyond that the usual ArcFace extension
/// `cos θ − m·sin m` keeps the logit decreasing in `θ`.
fn margin_cos(c: f64, m: f64) -> (f64, f64) {
    if m == 0.0 {
        return (c, 1.0);
    }
    if c > (std::f64::consts::PI - m).cos() {
        let s = (1.0 - c * c).max(1e-24).sqrt();
        (c * m.cos() - s * m.sin(), m.cos() + m.sin() * c / s)
    } else {
        (c - m * m.sin(), 1.0)
    }
}

fn unit<T: Scalar>(v: &[T]) -> (Vec<T>, T) {
    let n = norm(v).max(lit(AAM_NORM_FLOOR));
    (v.iter().map(|x| *x / n).collect(), n)
}

/// `(g − (g·x̂) x̂) / ‖x‖`: gradient through `x ↦ x / ‖x‖`.
fn through_normalization<T: Scalar>(g: &[T], xhat: &[T], n: T) -> Vec<T> {
    let p = dot(g, xhat);
    g.iter().zip(xhat).map(|(gi, xi)| (*gi - p * *xi) / n).collect()
}

fn softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|v| (*v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `−log softmax(z)_y`, accurate when the target dominates.
fn nll<T: Scalar>(z: &[T], y: usize) -> T {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let rest: T = z
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != y)
        .map(|(_, v)| (*v - m).exp())
        .sum();
    if z[y] == m {
        rest.ln_1p()
    } else {
        m - z[y] + (rest + (z[y] - m).exp()).ln()
    }
}

/// Output of a batch loss: mean loss, per-example gradients to the embeddings,
/// gradient to the classifier weights and the number of correct argmax predictions.
pub struct LossOut<T> {
    pub loss: T,
    pub g_embed: Vec<Vec<T>>,
    pub g_classifier: Affine<T>,
    pub correct: usize,
}

/// Additive angular margin softmax over the rows of `w` (`C × E`, bias unused).
pub fn aam_loss<T: Scalar>(
    embeddings: &[Vec<T>],
    labels: &[usize],
    w: &Matrix<T>,
    scale: f64,
    margin: f64,
) -> Result<LossOut<T>> {
    check_batch(embeddings, labels, w)?;
    let rows: Vec<(Vec<T>, T)> = w.iter_rows().map(unit).collect();
    let s = lit::<T>(scale);
    let inv_b = T::one() / lit::<T>(embeddings.len() as f64);
    let mut g_w = Affine::zeros(w.rows(), w.cols());
    let mut g_embed = Vec::with_capacity(embeddings.len());
    let mut loss = T::zero();
    let mut correct = 0;
    for (e, &y) in embeddings.iter().zip(labels) {
        let (ehat, en) = unit(e);
        let cos: Vec<T> = rows.iter().map(|(r, _)| dot(r, &ehat)).collect();
        if argmax(&cos) == y {
            correct += 1;
        }
        let (psi, dpsi) = margin_cos(cos[y].as_f64(), margin);
        let mut logits: Vec<T> = cos.iter().map(|c| s * *c).collect();
        logits[y] = s * lit::<T>(psi);
        let p = softmax(&logits);
        loss += nll(&logits, y) * inv_b;
        // d loss / d cos_j
        let g_cos: Vec<T> = p
            .iter()
            .enumerate()
            .map(|(j, pj)| {
                let d = if j == y { *pj - T::one() } else { *pj };
                let chain = if j == y { lit::<T>(dpsi) } else { T::one() };
                d * s * chain * inv_b
            })
            .collect();
        let mut g_ehat = vec![T::zero(); e.len()];
        for (j, ((r, rn), gc)) in rows.iter().zip(&g_cos).enumerate() {
            for (a, b) in g_ehat.iter_mut().zip(r) {
                *a += *gc * *b;
            }
            let g_rhat: Vec<T> = ehat.iter().map(|x| *gc * *x).collect();
            let g_row = through_normalization(&g_rhat, r, *rn);
            for (a, b) in g_w.w.row_mut(j).iter_mut().zip(&g_row) {
                *a += *b;
            }
        }
        g_embed.push(through_normalization(&g_ehat, &ehat, en));
    }
    Ok(LossOut {
        loss,
        g_embed,
        g_classifier: g_w,
        correct,
    })
}

/// Plain softmax cross-entropy on `W e + b`.
pub fn ce_loss<T: Scalar>(embeddings: &[Vec<T>], labels: &[usize], cls: &Affine<T>) -> Result<LossOut<T>> {
    check_batch(embeddings, labels, &cls.w)?;
    let inv_b = T::one() / lit::<T>(embeddings.len() as f64);
    let mut g_cls = cls.zeros_like();
    let mut g_embed = Vec::with_capacity(embeddings.len());
    let mut loss = T::zero();
    let mut correct = 0;
    for (e, &y) in embeddings.iter().zip(labels) {
        let z = cls.forward(e);
        if argmax(&z) == y {
            correct += 1;
        }
        let mut g = softmax(&z);
        loss += nll(&z, y) * inv_b;
        g[y] -= T::one();
        g.iter_mut().for_each(|v| *v *= inv_b);
        g_embed.push(cls.backward(e, &g, &mut g_cls));
    }
    Ok(LossOut {
        loss,
        g_embed,
        g_classifier: g_cls,
        correct,
    })
}

fn check_batch<T: Scalar>(embeddings: &[Vec<T>], labels: &[usize], w: &Matrix<T>) -> Result<()> {
    if embeddings.len() != labels.len() || embeddings.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} embeddings, {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= w.rows()) {
        return Err(Error::InvalidArgument(format!("label {l} >= {} classes", w.rows())));
    }
    if embeddings.iter().any(|e| e.len() != w.cols()) {
        return Err(Error::DimensionMismatch(
            "embedding width differs from classifier input".into(),
        ));
    }
    Ok(())
}

pub(crate) fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Aam,
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::CrossEntropy),
            "aam" => Ok(LossKind::Aam),
            other => Err(Error::InvalidArgument(format!("unknown loss `{other}` (ce|aam)"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::CrossEntropy => "ce",
            LossKind::Aam => "aam",
        })
    }
}

/// Encoder plus a linear classifier over its embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T> {
    pub encoder: EncoderParams<T>,
    pub output: Affine<T>,
}

impl<T: Scalar> Classifier<T> {
    /// Appends a fresh output layer to `encoder`.
    pub fn new(encoder: EncoderParams<T>, n_classes: usize, rng: &mut Rng) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {n_classes}"
            )));
        }
        let output = Affine::init(n_classes, encoder.embed_dim(), rng);
        Ok(Self { encoder, output })
    }

    pub fn n_classes(&self) -> usize {
        self.output.out_dim()
    }

    /// Scores used for prediction: cosines for the margin loss, logits otherwise.
    pub fn scores(&self, f: &FeatureMatrix<T>, loss: LossKind) -> Result<Vec<T>> {
        let e = self.encoder.embed(f)?;
        Ok(match loss {
            LossKind::CrossEntropy => self.output.forward(&e),
            LossKind::Aam => {
                let (ehat, _) = unit(&e);
                self.output.w.iter_rows().map(|r| dot(&unit(r).0, &ehat)).collect()
            }
        })
    }

    pub fn predict(&self, f: &FeatureMatrix<T>, loss: LossKind) -> Result<usize> {
        Ok(argmax(&self.scores(f, loss)?))
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Result<Checkpoint<T>> {
        let mut ck = Checkpoint::new(config_hash);
        ck.push_params(self, "")?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        Ok(Self {
            encoder: EncoderParams::from_checkpoint(ck, "enc")?,
            output: Affine::from_checkpoint(ck, "out")?,
        })
    }

    /// Trainable mask for the embedding affine and the output layer only.
    pub fn affine_only_mask(&self) -> Vec<bool> {
        self.mask_where(|n| n.starts_with("enc.embed.") || n.starts_with("out."))
    }

    fn batch_loss(
        &self,
        embeddings: &[Vec<T>],
        labels: &[usize],
        loss: LossKind,
        aam: &AamConfig,
        margin: f64,
    ) -> Result<LossOut<T>> {
        match loss {
            LossKind::CrossEntropy => ce_loss(embeddings, labels, &self.output),
            LossKind::Aam => aam_loss(embeddings, labels, &self.output.w, aam.scale, margin),
        }
    }
}

impl<T: Scalar> Params<T> for Classifier<T> {
    fn named(&self, prefix: &str) -> Vec<(String, &Matrix<T>)> {
        let mut v = self.encoder.named(&format!("{prefix}enc"));
        v.extend(self.output.named(&format!("{prefix}out")));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.output.tensors_mut());
        v
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedEpoch {
    /// 1 or 2; always 1 outside two-phase fine-tuning.
    pub phase: usize,
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub margin: f64,
    pub lr: f64,
    pub heldout_loss: Option<f64>,
    pub heldout_accuracy: Option<f64>,
}

pub const HISTORY_HEADER: &str = "phase,epoch,loss,accuracy,margin,lr,heldout_loss,heldout_accuracy";

impl SupervisedEpoch {
    pub fn csv_row(&self) -> String {
        let f = crate::eval::fmt_f64;
        let opt = |v: Option<f64>| v.map(f).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.phase,
            self.epoch,
            f(self.loss),
            f(self.accuracy),
            f(self.margin),
            f(self.lr),
            opt(self.heldout_loss),
            opt(self.heldout_accuracy)
        )
    }
}

/// A labeled view of prepared utterances.
#[derive(Clone, Copy)]
pub struct Labeled<'a, T> {
    pub utts: &'a [PreparedUtt<T>],
    pub labels: &'a [usize],
}

impl<'a, T: Scalar> Labeled<'a, T> {
    pub fn new(utts: &'a [PreparedUtt<T>], labels: &'a [usize]) -> Result<Self> {
        if utts.len() != labels.len() || utts.is_empty() {
            return Err(Error::DimensionMismatch(format!(
                "{} utterances, {} labels",
                utts.len(),
                labels.len()
            )));
        }
        Ok(Self { utts, labels })
    }
}

/// Fixed-length training chunk: a random window of long utterances, the whole
/// (padded) utterance otherwise.
fn train_chunk<T: Scalar>(
    fe: &Frontend<T>,
    u: &PreparedUtt<T>,
    len: usize,
    pad: PadMode,
    aug: Option<&Augmenter<T>>,
    r: &mut Rng,
) -> Result<FeatureMatrix<T>> {
    let n = u.n_frames();
    if n >= len {
        let start = r.random_range(0..=n - len);
        fe.chunk(u, start, len, aug, r)
    } else {
        pad_chunk(&fe.chunk(u, 0, n, aug, r)?, len, pad)
    }
}

/// Deterministic evaluation chunk: the centred window, or the padded utterance.
pub fn eval_chunk<T: Scalar>(
    fe: &Frontend<T>,
    u: &PreparedUtt<T>,
    len: usize,
    pad: PadMode,
) -> Result<FeatureMatrix<T>> {
    let n = u.n_frames();
    let mut r = rng::seeded(0);
    if n >= len {
        fe.chunk(u, (n - len) / 2, len, None, &mut r)
    } else {
        pad_chunk(&fe.chunk(u, 0, n, None, &mut r)?, len, pad)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub warmup_epochs: usize,
    pub chunk_len_s: f64,
    pub pad: PadMode,
    pub aam: AamConfig,
    pub adam: AdamConfig,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 2e-3,
            lr_min: 1e-5,
            warmup_epochs: 2,
            chunk_len_s: 2.0,
            pad: PadMode::Repeat,
            aam: AamConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl SupervisedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(Error::InvalidArgument("need 0 <= lr_min <= lr, lr > 0".into()));
        }
        if !(self.chunk_len_s > 0.0) {
            return Err(Error::InvalidArgument("chunk_len_s must be positive".into()));
        }
        self.aam.validate()?;
        self.adam.validate()
    }
}

/// Shared epoch loop: shuffles, chunks, forward/backward, one Adam step per batch.
struct EpochRunner<'a, T: Scalar> {
    fe: &'a Frontend<T>,
    aug: Option<&'a Augmenter<T>>,
    data: Labeled<'a, T>,
    chunk_frames: usize,
    pad: PadMode,
    batch_size: usize,
    loss: LossKind,
    scope: GradScope,
    seed: u64,
    tag: &'a str,
}

impl<T: Scalar> EpochRunner<'_, T> {
    /// Returns (mean loss, accuracy) over the epoch's chunks.
    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        model: &mut Classifier<T>,
        adam: &mut AdamState<T>,
        epoch: usize,
        aam: &AamConfig,
        margin: f64,
        lr: impl Fn(usize) -> f64,
        mask: Option<&[bool]>,
    ) -> Result<(f64, f64)> {
        let mut order: Vec<usize> = (0..self.data.utts.len()).collect();
        order.shuffle(&mut rng::derived(self.seed, &[&self.tag, &"order", &epoch]));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (bi, batch) in order.chunks(self.batch_size).enumerate() {
            let mut caches: Vec<EncoderCache<T>> = Vec::with_capacity(batch.len());
            let mut embs = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &i in batch {
                let u = &self.data.utts[i];
                let mut r = rng::derived(self.seed, &[&self.tag, &"chunk", &epoch, &u.utt_id]);
                let f = train_chunk(self.fe, u, self.chunk_frames, self.pad, self.aug, &mut r)?;
                let (e, c) = model.encoder.forward(&f)?;
                embs.push(e);
                caches.push(c);
                labels.push(self.data.labels[i]);
            }
            let out = model.batch_loss(&embs, &labels, self.loss, aam, margin)?;
            if !out.loss.is_finite() {
                return Err(Error::Diverged(format!("non-finite loss in epoch {epoch}, batch {bi}")));
            }
            loss_sum += out.loss.as_f64() * batch.len() as f64;
            correct += out.correct;
            let mut grads = model.zeros_like();
            grads.output = out.g_classifier;
            for (c, g) in caches.iter().zip(&out.g_embed) {
                model.encoder.backward(c, g, &mut grads.encoder, self.scope);
            }
            adam.step(model, &grads, lr(adam.step_count() as usize), mask)?;
        }
        let n = self.data.utts.len() as f64;
        Ok((loss_sum / n, correct as f64 / n))
    }
}

/// Mean loss and accuracy on deterministic evaluation chunks.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<T: Scalar>(
    model: &Classifier<T>,
    fe: &Frontend<T>,
    data: Labeled<'_, T>,
    chunk_len_s: f64,
    pad: PadMode,
    loss: LossKind,
    aam: &AamConfig,
    margin: f64,
) -> Result<(f64, f64)> {
    let len = fe.cfg.frames_for_seconds(chunk_len_s).max(1);
    let mut embs = Vec::with_capacity(data.utts.len());
    for u in data.utts {
        embs.push(model.encoder.embed(&eval_chunk(fe, u, len, pad)?)?);
    }
    let out = model.batch_loss(&embs, data.labels, loss, aam, margin)?;
    Ok((out.loss.as_f64(), out.correct as f64 / data.utts.len() as f64))
}

/// Trains an encoder and margin classifier from scratch (or from `init`).
///
/// With `GradScope::PostPooling` only the embedding affine and the classifier
/// are updated; the frame-level stack stays bit-identical.
#[allow(clippy::too_many_arguments)]
pub fn train_supervised<T: Scalar>(
    cfg: &SupervisedConfig,
    init: SupervisedInit<'_, T>,
    fe: &Frontend<T>,
    aug: Option<&Augmenter<T>>,
    data: Labeled<'_, T>,
    n_classes: usize,
    scope: GradScope,
    seed: u64,
    mut on_epoch: impl FnMut(&SupervisedEpoch),
) -> Result<(Classifier<T>, Vec<SupervisedEpoch>)> {
    cfg.validate()?;
    if let Some(&l) = data.labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidArgument(format!("label {l} >= {n_classes} classes")));
    }
    let mut r = rng::derived(seed, &[&"sup-init"]);
    let mut model = match init {
        SupervisedInit::Fresh(enc) => {
            if enc.input_dim != fe.dim() {
                return Err(Error::DimensionMismatch(format!(
                    "encoder input_dim {} but features have {} dims",
                    enc.input_dim,
                    fe.dim()
                )));
            }
            Classifier::new(EncoderParams::init(enc, &mut r)?, n_classes, &mut r)?
        }
        SupervisedInit::From(e) => Classifier::new(e.clone(), n_classes, &mut r)?,
        SupervisedInit::Model(m) => {
            if m.n_classes() != n_classes {
                return Err(Error::DimensionMismatch(format!(
                    "model has {} classes, labels need {n_classes}",
                    m.n_classes()
                )));
            }
            m.clone()
        }
    };
    let mask = (scope == GradScope::PostPooling).then(|| model.affine_only_mask());
    let mut adam = AdamState::new(&model, cfg.adam.clone());
    let runner = EpochRunner {
        fe,
        aug,
        data,
        chunk_frames: fe.cfg.frames_for_seconds(cfg.chunk_len_s).max(1),
        pad: cfg.pad,
        batch_size: cfg.batch_size,
        loss: LossKind::Aam,
        scope,
        seed,
        tag: "sup",
    };
    let steps = data.utts.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps;
    let lr_at = |step: usize| {
        schedule_value(
            ScheduleKind::LinearWarmupCosine {
                warmup: cfg.warmup_epochs * steps,
            },
            step,
            total,
            cfg.lr,
            cfg.lr_min,
        )
    };
    let mut hist = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let margin = margin_at(epoch, &cfg.aam);
        let (loss, accuracy) = runner.run(&mut model, &mut adam, epoch, &cfg.aam, margin, lr_at, mask.as_deref())?;
        let rec = SupervisedEpoch {
            phase: 1,
            epoch,
            loss,
            accuracy,
            margin,
            lr: lr_at(adam.step_count().saturating_sub(1) as usize),
            heldout_loss: None,
            heldout_accuracy: None,
        };
        on_epoch(&rec);
        hist.push(rec);
    }
    Ok((model, hist))
}

/// Where the supervised encoder starts.
#[derive(Clone, Copy, Debug)]
pub enum SupervisedInit<'a, T> {
    Fresh(&'a EncoderConfig),
    /// Pretrained encoder, fresh output layer.
    From(&'a EncoderParams<T>),
    /// Continue training an existing classifier.
    Model(&'a Classifier<T>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// Everything trained together.
    Ft1,
    /// Embedding affine and new output layer first, then everything.
    Ft2,
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ft1" => Ok(Strategy::Ft1),
            "ft2" => Ok(Strategy::Ft2),
            other => Err(Error::InvalidArgument(format!("unknown strategy `{other}` (ft1|ft2)"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Ft1 => "ft1",
            Strategy::Ft2 => "ft2",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub strategy: Strategy,
    pub loss: LossKind,
    pub chunk_len_s: f64,
    pub pad: PadMode,
    pub augment: bool,
    /// Epochs per phase.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    pub aam: AamConfig,
    pub adam: AdamConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Ft2,
            loss: LossKind::CrossEntropy,
            chunk_len_s: 2.0,
            pad: PadMode::Repeat,
            augment: false,
            epochs: 50,
            batch_size: 32,
            lr: 1e-4,
            plateau_factor: 0.1,
            plateau_patience: 10,
            plateau_min_delta: 1e-5,
            aam: AamConfig::default(),
            adam: AdamConfig {
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.lr > 0.0) || !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(Error::InvalidArgument(
                "need lr > 0 and plateau_factor in (0, 1]".into(),
            ));
        }
        if !(self.chunk_len_s > 0.0) || !(self.plateau_min_delta >= 0.0) {
            return Err(Error::InvalidArgument(
                "chunk_len_s must be positive, plateau_min_delta non-negative".into(),
            ));
        }
        self.aam.validate()?;
        self.adam.validate()
    }
}

/// Reduce-on-plateau learning rate on a monitored loss.
#[derive(Clone, Debug)]
pub struct Plateau {
    pub lr: f64,
    best: f64,
    stale: usize,
    factor: f64,
    patience: usize,
    min_delta: f64,
}

impl Plateau {
    pub fn new(lr: f64, factor: f64, patience: usize, min_delta: f64) -> Self {
        Self {
            lr,
            best: f64::INFINITY,
            stale: 0,
            factor,
            patience,
            min_delta,
        }
    }

    /// Records one epoch's monitored loss; returns the learning rate for the next epoch.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale >= self.patience {
                self.lr *= self.factor;
                self.stale = 0;
            }
        }
        self.lr
    }
}

/// Adapts a pretrained encoder to a labeled task with a fresh output layer.
#[allow(clippy::too_many_arguments)]
pub fn finetune<T: Scalar>(
    cfg: &FinetuneConfig,
    pretrained: &EncoderParams<T>,
    fe: &Frontend<T>,
    aug: Option<&Augmenter<T>>,
    train: Labeled<'_, T>,
    heldout: Labeled<'_, T>,
    n_classes: usize,
    seed: u64,
    mut on_epoch: impl FnMut(&SupervisedEpoch),
) -> Result<(Classifier<T>, Vec<SupervisedEpoch>)> {
    cfg.validate()?;
    if pretrained.input_dim() != fe.dim() {
        return Err(Error::DimensionMismatch(format!(
            "encoder input_dim {} but features have {} dims",
            pretrained.input_dim(),
            fe.dim()
        )));
    }
    if let Some(&l) = train.labels.iter().chain(heldout.labels).find(|&&l| l >= n_classes) {
        return Err(Error::InvalidArgument(format!("label {l} >= {n_classes} classes")));
    }
    let mut model = Classifier::new(pretrained.clone(), n_classes, &mut rng::derived(seed, &[&"ft-init"]))?;
    let phases: &[(usize, bool)] = match cfg.strategy {
        Strategy::Ft1 => &[(1, false)],
        Strategy::Ft2 => &[(1, true), (2, false)],
    };
    let mut hist = Vec::new();
    for &(phase, affine_only) in phases {
        hist.extend(finetune_phase(
            cfg,
            &mut model,
            phase,
            affine_only,
            fe,
            aug,
            train,
            heldout,
            seed,
            &mut on_epoch,
        )?);
    }
    Ok((model, hist))
}

/// One fine-tuning phase with its own optimizer and plateau schedule. With
/// `affine_only` only the embedding affine and the output layer change.
#[allow(clippy::too_many_arguments)]
pub fn finetune_phase<T: Scalar>(
    cfg: &FinetuneConfig,
    model: &mut Classifier<T>,
    phase: usize,
    affine_only: bool,
    fe: &Frontend<T>,
    aug: Option<&Augmenter<T>>,
    train: Labeled<'_, T>,
    heldout: Labeled<'_, T>,
    seed: u64,
    mut on_epoch: impl FnMut(&SupervisedEpoch),
) -> Result<Vec<SupervisedEpoch>> {
    cfg.validate()?;
    let aug = aug.filter(|_| cfg.augment);
    let mask = affine_only.then(|| model.affine_only_mask());
    let scope = if affine_only {
        GradScope::PostPooling
    } else {
        GradScope::All
    };
    let tag = format!("ft-p{phase}");
    let runner = EpochRunner {
        fe,
        aug,
        data: train,
        chunk_frames: fe.cfg.frames_for_seconds(cfg.chunk_len_s).max(1),
        pad: cfg.pad,
        batch_size: cfg.batch_size,
        loss: cfg.loss,
        scope,
        seed,
        tag: &tag,
    };
    let mut adam = AdamState::new(&*model, cfg.adam.clone());
    let mut plateau = Plateau::new(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_min_delta);
    let mut hist = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        // the margin warms up in the first phase; later phases start at full margin
        let margin = if phase <= 1 {
            margin_at(epoch, &cfg.aam)
        } else {
            cfg.aam.margin
        };
        let lr = plateau.lr;
        let (loss, accuracy) = runner.run(model, &mut adam, epoch, &cfg.aam, margin, |_| lr, mask.as_deref())?;
        let (hl, ha) = evaluate(model, fe, heldout, cfg.chunk_len_s, cfg.pad, cfg.loss, &cfg.aam, margin)?;
        plateau.observe(hl);
        let rec = SupervisedEpoch {
            phase,
            epoch,
            loss,
            accuracy,
            margin,
            lr,
            heldout_loss: Some(hl),
            heldout_accuracy: Some(ha),
        };
        on_epoch(&rec);
        hist.push(rec);
    }
    Ok(hist)
}
