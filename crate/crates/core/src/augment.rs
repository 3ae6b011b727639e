//! Multi-crop sampling, waveform augmentation (reverberation, additive noise) and chunk padding.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::features::{mean_power, FeatureMatrix, Waveform};
use crate::linalg::Matrix;
use crate::rng::{self, Rng};
use crate::scalar::{lit, Scalar};

/// Lengths are in seconds; they are turned into frame counts with the feature hop.
#[derive(Clone, Debug, PartialEq)]
pub struct CropConfig {
    pub n_long: usize,
    pub len_long_s: f64,
    pub n_short: usize,
    pub len_short_s: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            n_long: 2,
            len_long_s: 4.0,
            n_short: 4,
            len_short_s: 2.0,
        }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_long != 2 {
            return Err(Error::InvalidArgument(
                "exactly two long crops are required (the teacher inputs)".into(),
            ));
        }
        if !(self.len_long_s >= self.len_short_s && self.len_short_s > 0.0) {
            return Err(Error::InvalidArgument(
                "len_long_s >= len_short_s > 0 is required".into(),
            ));
        }
        Ok(())
    }

    pub fn n_crops(&self) -> usize {
        self.n_long + self.n_short
    }

    pub fn long_frames(&self, hop_s: f64) -> usize {
        (self.len_long_s / hop_s).round() as usize
    }

    pub fn short_frames(&self, hop_s: f64) -> usize {
        (self.len_short_s / hop_s).round() as usize
    }
}

/// Start frames of every crop of one utterance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CropPlan {
    pub long_len: usize,
    pub short_len: usize,
    pub long_starts: Vec<usize>,
    pub short_starts: Vec<usize>,
}

impl CropPlan {
    /// `(start, len)` of every crop, long crops first.
    pub fn spans(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.long_starts
            .iter()
            .map(|&s| (s, self.long_len))
            .chain(self.short_starts.iter().map(|&s| (s, self.short_len)))
    }
}

/// Draws independent, uniformly placed crop starts over `n_frames` frames.
pub fn plan_crops(n_frames: usize, cfg: &CropConfig, hop_s: f64, rng: &mut Rng) -> Result<CropPlan> {
    cfg.validate()?;
    let long_len = cfg.long_frames(hop_s);
    let short_len = cfg.short_frames(hop_s);
    if n_frames < long_len {
        return Err(Error::NeedsPadding {
            have: n_frames,
            need: long_len,
        });
    }
    let long_starts = (0..cfg.n_long)
        .map(|_| rng.random_range(0..=n_frames - long_len))
        .collect();
    let short_starts = (0..cfg.n_short)
        .map(|_| rng.random_range(0..=n_frames - short_len))
        .collect();
    Ok(CropPlan {
        long_len,
        short_len,
        long_starts,
        short_starts,
    })
}

/// The multi-crop view set of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct CropSet<T> {
    pub long_crops: Vec<FeatureMatrix<T>>,
    pub short_crops: Vec<FeatureMatrix<T>>,
    pub source_utt: String,
}

impl<T: Scalar> CropSet<T> {
    pub fn len(&self) -> usize {
        self.long_crops.len() + self.short_crops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All crops, long first, in the order the student sees them.
    pub fn all(&self) -> impl Iterator<Item = &FeatureMatrix<T>> {
        self.long_crops.iter().chain(&self.short_crops)
    }
}

/// Cuts two long and `n_short` short crops at independent uniform positions.
pub fn sample_crops<T: Scalar>(
    f: &FeatureMatrix<T>,
    cfg: &CropConfig,
    source_utt: &str,
    rng: &mut Rng,
) -> Result<CropSet<T>> {
    let plan = plan_crops(f.n_frames(), cfg, f.hop_s, rng)?;
    Ok(CropSet {
        long_crops: plan.long_starts.iter().map(|&s| f.slice(s, plan.long_len)).collect(),
        short_crops: plan.short_starts.iter().map(|&s| f.slice(s, plan.short_len)).collect(),
        source_utt: source_utt.to_string(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NoiseKind {
    Babble,
    Music,
    Generic,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::Babble, NoiseKind::Music, NoiseKind::Generic];

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::Babble => "babble",
            NoiseKind::Music => "music",
            NoiseKind::Generic => "noise",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSource {
    pub kind: NoiseKind,
    pub snr_db: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub reverb_prob: f64,
    pub noise_prob: f64,
    pub sources: Vec<NoiseSource>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            reverb_prob: 0.45,
            noise_prob: 0.7,
            sources: vec![
                NoiseSource {
                    kind: NoiseKind::Babble,
                    snr_db: (3.0, 18.0),
                },
                NoiseSource {
                    kind: NoiseKind::Music,
                    snr_db: (3.0, 18.0),
                },
                NoiseSource {
                    kind: NoiseKind::Generic,
                    snr_db: (0.0, 18.0),
                },
            ],
        }
    }
}

impl AugmentPolicy {
    pub fn disabled() -> Self {
        Self {
            reverb_prob: 0.0,
            noise_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for p in [self.reverb_prob, self.noise_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("probability {p} outside [0,1]")));
            }
        }
        if self.noise_prob > 0.0 && self.sources.is_empty() {
            return Err(Error::InvalidArgument("noise enabled without sources".into()));
        }
        for s in &self.sources {
            if !(s.snr_db.0 <= s.snr_db.1) {
                return Err(Error::InvalidArgument(format!("empty SNR range for {}", s.kind.name())));
            }
        }
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        self.reverb_prob > 0.0 || self.noise_prob > 0.0
    }
}

/// Room impulse responses and noise recordings to draw augmentations from.
#[derive(Clone, Debug)]
pub struct AugmentPools<T> {
    pub rirs: Vec<Waveform<T>>,
    pub noises: Vec<(NoiseKind, Vec<Waveform<T>>)>,
}

impl<T: Scalar> AugmentPools<T> {
    /// Synthetic stand-ins: exponentially decaying random-tap RIRs in three
    /// room sizes, and white / pink-ish / amplitude-modulated babble noise.
    pub fn synthetic(sample_rate: u32, per_kind: usize, noise_len_s: f64, seed: u64) -> Self {
        let mut r = rng::derived(seed, &[&"augment-pools"]);
        let sr = sample_rate as f64;
        let mut rirs = Vec::new();
        for (rt_lo, rt_hi) in [(0.05, 0.15), (0.15, 0.3), (0.3, 0.5)] {
            for _ in 0..per_kind.max(1) {
                let rt60: f64 = r.random_range(rt_lo..rt_hi);
                let len = ((rt60 * sr) as usize).max(2);
                // amplitude falls 60 dB over rt60
                let decay = 6.9078 / (rt60 * sr);
                let delay = r.random_range(0..(0.002 * sr) as usize + 1);
                let mut taps = vec![T::zero(); delay + len];
                taps[delay] = T::one();
                for n in 1..len {
                    let g: f64 = StandardNormal.sample(&mut r);
                    taps[delay + n] = lit(0.3 * g * (-decay * n as f64).exp());
                }
                rirs.push(Waveform {
                    samples: taps,
                    sample_rate,
                });
            }
        }
        let n = (noise_len_s * sr) as usize;
        let mut noises = Vec::new();
        for kind in NoiseKind::ALL {
            let items = (0..per_kind.max(1))
                .map(|_| Waveform {
                    samples: synth_noise(kind, n, sr, &mut r),
                    sample_rate,
                })
                .collect();
            noises.push((kind, items));
        }
        Self { rirs, noises }
    }

    fn noises_of(&self, kind: NoiseKind) -> Option<&[Waveform<T>]> {
        self.noises
            .iter()
            .find(|(k, v)| *k == kind && !v.is_empty())
            .map(|(_, v)| v.as_slice())
    }
}

fn synth_noise<T: Scalar>(kind: NoiseKind, n: usize, sr: f64, r: &mut Rng) -> Vec<T> {
    let white: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut *r)).collect();
    let out: Vec<f64> = match kind {
        NoiseKind::Generic => white,
        NoiseKind::Music => {
            // cascade of leaky integrators tilts the spectrum towards 1/f
            let mut y = white;
            for a in [0.9, 0.6, 0.3] {
                let mut prev = 0.0;
                for v in y.iter_mut() {
                    prev = a * prev + *v;
                    *v = prev;
                }
            }
            y
        }
        NoiseKind::Babble => {
            let rate: f64 = r.random_range(2.0..6.0);
            let phase: f64 = r.random_range(0.0..std::f64::consts::TAU);
            let mut prev = 0.0;
            white
                .into_iter()
                .enumerate()
                .map(|(i, v)| {
                    prev = 0.8 * prev + v;
                    let env = 0.6 + 0.4 * (std::f64::consts::TAU * rate * i as f64 / sr + phase).sin();
                    prev * env
                })
                .collect()
        }
    };
    let p = (out.iter().map(|x| x * x).sum::<f64>() / n.max(1) as f64)
        .sqrt()
        .max(1e-12);
    out.into_iter().map(|x| lit::<T>(0.1 * x / p)).collect()
}

/// `10·log10(P_signal / P_noise)` over the whole span.
pub fn snr_db<T: Scalar>(signal: &[T], noise: &[T]) -> f64 {
    10.0 * (mean_power(signal).as_f64() / mean_power(noise).as_f64()).log10()
}

/// Gain `α` for which `α·noise` sits `snr_db` below `signal`.
pub fn snr_gain<T: Scalar>(signal: &[T], noise: &[T], snr_db: f64) -> Result<T> {
    let ps = mean_power(signal);
    let pn = mean_power(noise);
    if ps == T::zero() {
        return Err(Error::UndefinedSnr("signal"));
    }
    if pn == T::zero() {
        return Err(Error::UndefinedSnr("noise"));
    }
    Ok((ps / (pn * lit::<T>(10f64.powf(snr_db / 10.0)))).sqrt())
}

/// Noise samples aligned to `w`: a random window of `noise`, tiled if it is shorter.
pub fn noise_segment<T: Scalar>(n: usize, noise: &Waveform<T>, rng: &mut Rng) -> Result<Vec<T>> {
    if noise.is_empty() {
        return Err(Error::UndefinedSnr("noise"));
    }
    let len = noise.len();
    let offset = if len > n { rng.random_range(0..=len - n) } else { 0 };
    Ok((0..n).map(|i| noise.samples[(offset + i) % len]).collect())
}

/// Adds `noise` at the requested SNR. `snr_db = +∞` returns `w` untouched.
pub fn add_noise<T: Scalar>(w: &Waveform<T>, noise: &Waveform<T>, snr_db: f64, rng: &mut Rng) -> Result<Waveform<T>> {
    if snr_db == f64::INFINITY {
        return Ok(w.clone());
    }
    let seg = noise_segment(w.len(), noise, rng)?;
    let alpha = snr_gain(&w.samples, &seg, snr_db)?;
    Ok(Waveform {
        samples: w.samples.iter().zip(&seg).map(|(x, n)| *x + alpha * *n).collect(),
        sample_rate: w.sample_rate,
    })
}

/// First `n_out` samples of the full linear convolution `x * h`.
pub fn convolve_truncated<T: Scalar>(x: &[T], h: &[T], n_out: usize) -> Vec<T> {
    if x.is_empty() || h.is_empty() {
        return vec![T::zero(); n_out];
    }
    if x.len().saturating_mul(h.len()) <= 1 << 16 {
        let mut y = vec![T::zero(); n_out];
        for (n, out) in y.iter_mut().enumerate() {
            let kmax = n.min(h.len() - 1);
            let mut s = T::zero();
            for k in 0..=kmax {
                if n - k < x.len() {
                    s += h[k] * x[n - k];
                }
            }
            *out = s;
        }
        return y;
    }
    let full = x.len() + h.len() - 1;
    let size = full.next_power_of_two();
    let mut planner = FftPlanner::<T>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let zero = Complex::new(T::zero(), T::zero());
    let mut a: Vec<Complex<T>> = x.iter().map(|&v| Complex::new(v, T::zero())).collect();
    a.resize(size, zero);
    let mut b: Vec<Complex<T>> = h.iter().map(|&v| Complex::new(v, T::zero())).collect();
    b.resize(size, zero);
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= *q;
    }
    inv.process(&mut a);
    let scale = T::one() / lit::<T>(size as f64);
    (0..n_out)
        .map(|i| if i < full { a[i].re * scale } else { T::zero() })
        .collect()
}

/// Convolves with a room impulse response, truncates to the input length and
/// rescales to the input's peak amplitude.
pub fn reverberate<T: Scalar>(w: &Waveform<T>, rir: &Waveform<T>) -> Result<Waveform<T>> {
    if rir.is_empty() || !crate::scalar::all_finite(&rir.samples) {
        return Err(Error::InvalidArgument(
            "impulse response must be non-empty and finite".into(),
        ));
    }
    let mut y = convolve_truncated(&w.samples, &rir.samples, w.len());
    let peak_in = w.peak();
    let peak_out = y.iter().fold(T::zero(), |m, v| m.max(v.abs()));
    if peak_out > T::zero() && peak_out != peak_in {
        let g = peak_in / peak_out;
        y.iter_mut().for_each(|v| *v *= g);
    }
    Ok(Waveform {
        samples: y,
        sample_rate: w.sample_rate,
    })
}

/// Applies the augmentation policy: reverberation first, then one noise type.
/// Both are drawn independently, so a chunk may receive either, both or neither.
pub fn augment_waveform<T: Scalar>(
    w: &Waveform<T>,
    policy: &AugmentPolicy,
    pools: &AugmentPools<T>,
    rng: &mut Rng,
) -> Result<Waveform<T>> {
    let mut out = w.clone();
    if policy.reverb_prob > 0.0 && !pools.rirs.is_empty() && rng.random_bool(policy.reverb_prob) {
        let rir = &pools.rirs[rng.random_range(0..pools.rirs.len())];
        out = reverberate(&out, rir)?;
    }
    if policy.noise_prob > 0.0 && !policy.sources.is_empty() && rng.random_bool(policy.noise_prob) {
        let src = &policy.sources[rng.random_range(0..policy.sources.len())];
        let snr = if src.snr_db.0 == src.snr_db.1 {
            src.snr_db.0
        } else {
            rng.random_range(src.snr_db.0..src.snr_db.1)
        };
        if let Some(pool) = pools.noises_of(src.kind) {
            let noise = &pool[rng.random_range(0..pool.len())];
            if out.power() > T::zero() {
                out = add_noise(&out, noise, snr, rng)?;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Repeat,
}

impl std::str::FromStr for PadMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(PadMode::Zero),
            "repeat" => Ok(PadMode::Repeat),
            other => Err(Error::InvalidArgument(format!("unknown pad mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for PadMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PadMode::Zero => "zero",
            PadMode::Repeat => "repeat",
        })
    }
}

/// Pads a chunk to `target` frames by zero rows or by cyclic repetition.
/// Inputs already at least `target` long are returned unchanged.
pub fn pad_chunk<T: Scalar>(f: &FeatureMatrix<T>, target: usize, mode: PadMode) -> Result<FeatureMatrix<T>> {
    if target == 0 {
        return Err(Error::InvalidArgument("pad target must be at least 1".into()));
    }
    let n = f.n_frames();
    if n >= target {
        return Ok(f.clone());
    }
    let d = f.dim();
    let mut out = Matrix::zeros(target, d);
    match mode {
        PadMode::Zero => {
            out.as_mut_slice()[..n * d].copy_from_slice(f.matrix().as_slice());
        }
        PadMode::Repeat => {
            if n == 0 {
                return Err(Error::InvalidArgument("cannot repeat-pad an empty chunk".into()));
            }
            for t in 0..target {
                out.row_mut(t).copy_from_slice(f.frame(t % n));
            }
        }
    }
    Ok(FeatureMatrix::new(out, f.hop_s))
}
