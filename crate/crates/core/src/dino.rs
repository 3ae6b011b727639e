//! Self-distillation without labels: a student matches the centered, sharpened
//! output distribution of an EMA teacher across multi-crop views.

use rand::seq::SliceRandom;

use crate::augment::{plan_crops, CropConfig};
use crate::data::{Augmenter, Frontend, PreparedUtt};
use crate::error::{Error, Result};
use crate::nn::{
    AdamConfig, AdamState, Checkpoint, DinoNet, EncoderConfig, GradScope, HeadCache, HeadConfig, HeadParams, Params,
};
use crate::rng;
use crate::scalar::{lit, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct DinoConfig {
    pub tau_s: f64,
    pub tau_t: f64,
    pub center_momentum: f64,
    /// Teacher EMA momentum, cosine-scheduled per step from `.0` to `.1`.
    pub teacher_momentum: (f64, f64),
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate, reached after `warmup_epochs`.
    pub lr: f64,
    pub lr_min: f64,
    pub warmup_epochs: usize,
    /// The weight-normalized output layer receives no updates during these first epochs.
    pub freeze_last_epochs: usize,
    /// Subtract the running center from teacher logits. Off only for ablations.
    pub centering: bool,
    pub crop: CropConfig,
    pub adam: AdamConfig,
}

impl Default for DinoConfig {
    fn default() -> Self {
        Self {
            tau_s: 0.1,
            tau_t: 0.04,
            center_momentum: 0.9,
            teacher_momentum: (0.996, 1.0),
            epochs: 30,
            batch_size: 16,
            lr: 2.5e-3,
            lr_min: 1e-6,
            warmup_epochs: 4,
            freeze_last_epochs: 1,
            centering: true,
            crop: CropConfig::default(),
            adam: AdamConfig {
                weight_decay: 1e-4,
                ..AdamConfig::default()
            },
        }
    }
}

impl DinoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.tau_t > 0.0 && self.tau_t < self.tau_s) {
            return bad("temperatures must satisfy 0 < tau_t < tau_s");
        }
        if !(0.0..1.0).contains(&self.center_momentum) {
            return bad("center_momentum must lie in [0, 1)");
        }
        let (a, b) = self.teacher_momentum;
        if !((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b)) {
            return bad("teacher momentum must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr_min >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        self.crop.validate()?;
        self.adam.validate()
    }
}

/// Schedules evaluated per optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    /// `end + (start − end)(1 + cos πt)/2`, `t = step/total`.
    Cosine,
    /// Linear ramp to `start` over `warmup` steps, then cosine to `end`.
    LinearWarmupCosine { warmup: usize },
}

pub fn schedule_value(kind: ScheduleKind, step: usize, total: usize, start: f64, end: f64) -> f64 {
    if total == 0 {
        return end;
    }
    let step = step.min(total);
    let cosine = |s: usize, span: usize| {
        if span == 0 {
            return end;
        }
        let t = s as f64 / span as f64;
        end + (start - end) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
    };
    match kind {
        ScheduleKind::Cosine => cosine(step, total),
        ScheduleKind::LinearWarmupCosine { warmup } => {
            let warmup = warmup.min(total);
            if step < warmup {
                start * (step + 1) as f64 / warmup as f64
            } else {
                cosine(step - warmup, total - warmup)
            }
        }
    }
}

/// `softmax(l/τ)`, max-subtracted.
pub fn temp_softmax<T: Scalar>(logits: &[T], tau: f64) -> Vec<T> {
    let inv = lit::<T>(1.0 / tau);
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut p: Vec<T> = logits.iter().map(|l| ((*l - max) * inv).exp()).collect();
    let s: T = p.iter().copied().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

fn log_softmax<T: Scalar>(logits: &[T], tau: f64) -> Vec<T> {
    let inv = lit::<T>(1.0 / tau);
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|l| ((*l - max) * inv).exp()).sum::<T>().ln();
    logits.iter().map(|l| (*l - max) * inv - lse).collect()
}

/// Teacher distribution for one long crop: `softmax((l − c)/τ_t)`.
pub fn teacher_probs<T: Scalar>(logits: &[T], center: &[T], tau_t: f64) -> Vec<T> {
    let shifted: Vec<T> = logits.iter().zip(center).map(|(l, c)| *l - *c).collect();
    temp_softmax(&shifted, tau_t)
}

/// Multi-crop cross-entropy.
///
/// `teacher` holds logits of the two long crops; `student` holds logits of
/// every crop with the same two long crops first. Each teacher view `i` is
/// paired with every student view `j ≠ i`; the loss is the mean over those
/// `2(|S| − 1)` pairs. Returns the loss and `∂loss/∂student_logits`.
pub fn dino_loss<T: Scalar>(
    teacher: &[Vec<T>],
    student: &[Vec<T>],
    center: &[T],
    tau_s: f64,
    tau_t: f64,
) -> Result<(T, Vec<Vec<T>>)> {
    if teacher.len() != 2 || student.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need 2 teacher and at least 2 student views, got {} and {}",
            teacher.len(),
            student.len()
        )));
    }
    let k = center.len();
    if teacher.iter().chain(student).any(|l| l.len() != k) {
        return Err(Error::DimensionMismatch(format!("logits must all have length K = {k}")));
    }
    let pt: Vec<Vec<T>> = teacher.iter().map(|l| teacher_probs(l, center, tau_t)).collect();
    let n_pairs = 2 * (student.len() - 1);
    let scale = T::one() / lit::<T>(n_pairs as f64);
    let grad_scale = scale / lit::<T>(tau_s);
    let mut loss = T::zero();
    let mut grads = vec![vec![T::zero(); k]; student.len()];
    for (j, (ls, g)) in student.iter().zip(grads.iter_mut()).enumerate() {
        let log_ps = log_softmax(ls, tau_s);
        let ps: Vec<T> = log_ps.iter().map(|x| x.exp()).collect();
        for (i, p) in pt.iter().enumerate() {
            if i == j {
                continue;
            }
            let h: T = p.iter().zip(&log_ps).map(|(a, b)| -*a * *b).sum();
            loss += h * scale;
            for ((gi, s), t) in g.iter_mut().zip(&ps).zip(p) {
                *gi += (*s - *t) * grad_scale;
            }
        }
    }
    Ok((loss, grads))
}

/// `θ_t ← λθ_t + (1 − λ)θ_s`. `λ = 1` and `λ = 0` are exact no-op and copy.
pub fn ema_update<T: Scalar, P: Params<T>>(teacher: &mut P, student: &P, lambda: f64) {
    if lambda >= 1.0 {
        return;
    }
    let src = student.tensors();
    if lambda <= 0.0 {
        for (t, s) in teacher.tensors_mut().into_iter().zip(src) {
            t.as_mut_slice().copy_from_slice(s.as_slice());
        }
        return;
    }
    let (a, b) = (lit::<T>(lambda), lit::<T>(1.0 - lambda));
    for (t, s) in teacher.tensors_mut().into_iter().zip(src) {
        for (x, y) in t.as_mut_slice().iter_mut().zip(s.as_slice()) {
            *x = a * *x + b * *y;
        }
    }
}

/// `c ← m·c + (1 − m)·mean(batch)` over pre-centering teacher logits.
pub fn center_update<T: Scalar>(center: &mut [T], batch: &[Vec<T>], m: f64) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("center update needs a non-empty batch".into()));
    }
    let inv = T::one() / lit::<T>(batch.len() as f64);
    let (mt, one_m) = (lit::<T>(m), lit::<T>(1.0 - m));
    for (j, c) in center.iter_mut().enumerate() {
        let mean = batch.iter().map(|l| l[j]).sum::<T>() * inv;
        *c = mt * *c + one_m * mean;
    }
    Ok(())
}

/// Mean teacher max-probability and mean teacher entropy (nats) over views.
pub fn collapse_diagnostics<T: Scalar>(probs: &[Vec<T>]) -> (f64, f64) {
    if probs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = probs.len() as f64;
    let mut max_p = 0.0;
    let mut ent = 0.0;
    for p in probs {
        max_p += p.iter().map(|x| x.as_f64()).fold(0.0, f64::max);
        ent -= p
            .iter()
            .map(|x| x.as_f64())
            .filter(|&x| x > 0.0)
            .map(|x| x * x.ln())
            .sum::<f64>();
    }
    (max_p / n, ent / n)
}

#[derive(Clone, Debug)]
pub struct DinoState<T: Scalar> {
    pub student: DinoNet<T>,
    pub teacher: DinoNet<T>,
    pub center: Vec<T>,
    pub adam: AdamState<T>,
    pub step: usize,
    pub epoch: usize,
}

impl<T: Scalar> DinoState<T> {
    pub fn new(enc: &EncoderConfig, head: &HeadConfig, adam: &AdamConfig, seed: u64) -> Result<Self> {
        let student = DinoNet::init(enc, head, &mut rng::derived(seed, &[&"dino-init"]))?;
        let adam = AdamState::new(&student, adam.clone());
        Ok(Self {
            teacher: student.clone(),
            center: vec![T::zero(); head.out_dim],
            student,
            adam,
            step: 0,
            epoch: 0,
        })
    }

    /// Student, teacher and center as one checkpoint (optimizer moments are not kept).
    pub fn to_checkpoint(&self, config_hash: &str) -> Result<Checkpoint<T>> {
        let mut ck = Checkpoint::new(config_hash);
        ck.push_params(&self.student, "student.")?;
        ck.push_params(&self.teacher, "teacher.")?;
        ck.push_vec("center", &self.center)?;
        Ok(ck)
    }

    pub fn last_layer_mask(&self) -> Vec<bool> {
        let name = HeadParams::<T>::last_layer_name("head");
        self.student.mask_where(|n| n != name)
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, PartialEq)]
pub struct DinoEpoch {
    pub epoch: usize,
    pub loss: f64,
    /// Mean teacher entropy in nats (compare against `ln K`).
    pub entropy: f64,
    pub max_prob: f64,
    pub center_norm: f64,
    /// Teacher momentum and learning rate at the epoch's last step.
    pub lambda: f64,
    pub lr: f64,
}

/// Owns the training state and runs epochs over a prepared corpus.
pub struct DinoTrainer<'a, T: Scalar> {
    pub cfg: DinoConfig,
    pub state: DinoState<T>,
    pub seed: u64,
    frontend: &'a Frontend<T>,
    augment: Option<&'a Augmenter<T>>,
    corpus: Vec<&'a PreparedUtt<T>>,
}

struct ViewOut<T> {
    cache: crate::nn::EncoderCache<T>,
    head: HeadCache<T>,
}

impl<'a, T: Scalar> DinoTrainer<'a, T> {
    /// Utterances shorter than one long crop are dropped; errors if none remain.
    pub fn new(
        cfg: DinoConfig,
        enc: &EncoderConfig,
        head: &HeadConfig,
        frontend: &'a Frontend<T>,
        augment: Option<&'a Augmenter<T>>,
        corpus: &'a [PreparedUtt<T>],
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if enc.input_dim != frontend.dim() {
            return Err(Error::DimensionMismatch(format!(
                "encoder input_dim {} but features have {} dims",
                enc.input_dim,
                frontend.dim()
            )));
        }
        let need = cfg.crop.long_frames(frontend.hop_s());
        let corpus: Vec<&PreparedUtt<T>> = corpus.iter().filter(|u| u.n_frames() >= need).collect();
        if corpus.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no utterance has the {need} frames a long crop needs"
            )));
        }
        let state = DinoState::new(enc, head, &cfg.adam, seed)?;
        Ok(Self {
            cfg,
            state,
            seed,
            frontend,
            augment,
            corpus,
        })
    }

    pub fn n_utterances(&self) -> usize {
        self.corpus.len()
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.corpus.len().div_ceil(self.cfg.batch_size)
    }

    fn total_steps(&self) -> usize {
        self.cfg.epochs * self.steps_per_epoch()
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        schedule_value(
            ScheduleKind::LinearWarmupCosine {
                warmup: self.cfg.warmup_epochs * self.steps_per_epoch(),
            },
            step,
            self.total_steps(),
            self.cfg.lr,
            self.cfg.lr_min,
        )
    }

    pub fn lambda_at(&self, step: usize) -> f64 {
        let (a, b) = self.cfg.teacher_momentum;
        schedule_value(ScheduleKind::Cosine, step, self.total_steps(), a, b)
    }

    /// Runs one epoch. On error the state is left at the last completed step.
    pub fn run_epoch(&mut self) -> Result<DinoEpoch> {
        let epoch = self.state.epoch;
        let mut order: Vec<usize> = (0..self.corpus.len()).collect();
        order.shuffle(&mut rng::derived(self.seed, &[&"dino-order", &epoch]));
        let mut loss_sum = 0.0;
        let mut n_utts = 0usize;
        let mut probs_seen: Vec<Vec<T>> = Vec::new();
        let (mut lambda, mut lr) = (f64::NAN, f64::NAN);
        for batch in order.chunks(self.cfg.batch_size) {
            let (loss, probs) = self.train_step(batch)?;
            loss_sum += loss * batch.len() as f64;
            n_utts += batch.len();
            probs_seen.extend(probs);
            lr = self.lr_at(self.state.step - 1);
            lambda = self.lambda_at(self.state.step - 1);
        }
        self.state.epoch += 1;
        let (max_prob, entropy) = collapse_diagnostics(&probs_seen);
        Ok(DinoEpoch {
            epoch,
            loss: loss_sum / n_utts as f64,
            entropy,
            max_prob,
            center_norm: crate::scalar::norm(&self.state.center).as_f64(),
            lambda,
            lr,
        })
    }

    /// Runs the remaining epochs, calling `on_epoch` after each one.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&DinoEpoch)) -> Result<Vec<DinoEpoch>> {
        let mut hist = Vec::new();
        while self.state.epoch < self.cfg.epochs {
            let e = self.run_epoch()?;
            on_epoch(&e);
            hist.push(e);
        }
        Ok(hist)
    }

    /// One optimizer step over the given utterance indices; returns the mean
    /// loss and the teacher distributions of the batch's long crops.
    fn train_step(&mut self, batch: &[usize]) -> Result<(f64, Vec<Vec<T>>)> {
        let step = self.state.step;
        let st = &self.state;
        let hop_s = self.frontend.hop_s();
        let inv_b = T::one() / lit::<T>(batch.len() as f64);
        let mut grads = st.student.zeros_like();
        let mut loss = T::zero();
        let mut teacher_logits_all = Vec::with_capacity(2 * batch.len());
        let mut probs = Vec::with_capacity(2 * batch.len());
        for &ui in batch {
            let u = self.corpus[ui];
            let mut r = rng::derived(self.seed, &[&"dino-crop", &step, &u.utt_id]);
            let plan = plan_crops(u.n_frames(), &self.cfg.crop, hop_s, &mut r)?;
            let mut views = Vec::with_capacity(self.cfg.crop.n_crops());
            for (start, len) in plan.spans() {
                views.push(self.frontend.chunk(u, start, len, self.augment, &mut r)?);
            }
            // Teacher: forward only, long crops.
            let t_logits: Vec<Vec<T>> = views[..2].iter().map(|v| st.teacher.logits(v)).collect::<Result<_>>()?;
            let mut outs = Vec::with_capacity(views.len());
            let mut s_logits = Vec::with_capacity(views.len());
            for v in &views {
                let (e, cache) = st.student.encoder.forward(v)?;
                let (l, head) = st.student.head.forward(&e)?;
                s_logits.push(l);
                outs.push(ViewOut { cache, head });
            }
            let zero_center = vec![T::zero(); st.center.len()];
            let center = if self.cfg.centering { &st.center } else { &zero_center };
            let (l, g) = dino_loss(&t_logits, &s_logits, center, self.cfg.tau_s, self.cfg.tau_t)?;
            if !l.is_finite() {
                return Err(Error::Diverged(format!("non-finite DINO loss at step {step}")));
            }
            loss += l * inv_b;
            for (o, gl) in outs.iter().zip(g) {
                let gl: Vec<T> = gl.into_iter().map(|x| x * inv_b).collect();
                let ge = st.student.head.backward(&o.head, &gl, &mut grads.head);
                st.student
                    .encoder
                    .backward(&o.cache, &ge, &mut grads.encoder, GradScope::All);
            }
            probs.extend(t_logits.iter().map(|l| teacher_probs(l, center, self.cfg.tau_t)));
            teacher_logits_all.extend(t_logits);
        }
        let lr = self.lr_at(step);
        let lambda = self.lambda_at(step);
        let mask = (self.state.epoch < self.cfg.freeze_last_epochs).then(|| self.state.last_layer_mask());
        let st = &mut self.state;
        st.adam.step(&mut st.student, &grads, lr, mask.as_deref())?;
        ema_update(&mut st.teacher, &st.student, lambda);
        if self.cfg.centering {
            center_update(&mut st.center, &teacher_logits_all, self.cfg.center_momentum)?;
        }
        st.step += 1;
        Ok((loss.as_f64(), probs))
    }
}
