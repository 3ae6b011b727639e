//! Waveform front-end: energy VAD, log-mel filterbanks and sliding mean/variance normalization.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{lit, Scalar};

/// Added inside the log of every filterbank energy.
pub const LOGMEL_EPS: f64 = 1e-10;
/// Lower bound on the normalizing standard deviation in [`sliding_mvn`].
pub const MVN_STD_FLOOR: f64 = 1e-8;
const VAD_ENERGY_EPS: f64 = 1e-10;
/// Frame log energy (dB) treated as digital silence when an utterance has no
/// frame above its relative threshold.
pub const VAD_SILENCE_DB: f64 = -80.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform<T> {
    pub samples: Vec<T>,
    pub sample_rate: u32,
}

impl<T: Scalar> Waveform<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if !crate::scalar::all_finite(&samples) {
            return Err(Error::InvalidArgument("waveform has non-finite samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean square amplitude.
    pub fn power(&self) -> T {
        mean_power(&self.samples)
    }

    pub fn peak(&self) -> T {
        self.samples
            .iter()
            .fold(T::zero(), |m, x| if x.abs() > m { x.abs() } else { m })
    }

    pub fn slice(&self, start: usize, len: usize) -> Self {
        Self {
            samples: self.samples[start..start + len].to_vec(),
            sample_rate: self.sample_rate,
        }
    }
}

pub(crate) fn mean_power<T: Scalar>(x: &[T]) -> T {
    if x.is_empty() {
        return T::zero();
    }
    crate::scalar::dot(x, x) / lit::<T>(x.len() as f64)
}

/// Reads a mono 16-bit PCM RIFF file.
pub fn read_wav<T: Scalar>(path: &Path) -> Result<Waveform<T>> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::parse(path, "expected mono 16-bit PCM"));
    }
    let scale = lit::<T>(1.0 / 32768.0);
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| lit::<T>(v as f64) * scale))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav_err)?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes a mono 16-bit PCM RIFF file; samples are clipped to [-1, 1).
pub fn write_wav<T: Scalar>(path: &Path, w: &Waveform<T>) -> Result<()> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for s in &w.samples {
        let v = (s.as_f64() * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}

/// A `T × D` frame sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix<T> {
    frames: Matrix<T>,
    pub hop_s: f64,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn new(frames: Matrix<T>, hop_s: f64) -> Self {
        Self { frames, hop_s }
    }

    pub fn empty(dim: usize, hop_s: f64) -> Self {
        Self::new(Matrix::zeros(0, dim), hop_s)
    }

    pub fn from_rows(rows: &[Vec<T>], hop_s: f64) -> Result<Self> {
        Ok(Self::new(Matrix::from_rows(rows)?, hop_s))
    }

    #[inline]
    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    #[inline]
    pub fn frame(&self, t: usize) -> &[T] {
        self.frames.row(t)
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.frames
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.frames
    }

    /// Contiguous frames `[start, start + len)`.
    pub fn slice(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.n_frames(), "slice out of range");
        let d = self.dim();
        let data = self.frames.as_slice()[start * d..(start + len) * d].to_vec();
        Self::new(Matrix::from_vec(len, d, data).expect("slice shape"), self.hop_s)
    }

    /// Frames in the order given by `idx` (repeats allowed).
    pub fn gather(&self, idx: &[usize]) -> Self {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.frames.row(i));
        }
        Self {
            frames: Matrix::from_vec(idx.len(), d, data).expect("shape"),
            hop_s: self.hop_s,
        }
    }

    pub fn select(&self, keep: &[bool]) -> Self {
        let rows: Vec<Vec<T>> = (0..self.n_frames())
            .filter(|&t| keep[t])
            .map(|t| self.frame(t).to_vec())
            .collect();
        if rows.is_empty() {
            return Self::empty(self.dim(), self.hop_s);
        }
        Self::from_rows(&rows, self.hop_s).expect("uniform rows")
    }

    pub fn is_finite(&self) -> bool {
        self.frames.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    pub n_mels: usize,
    pub frame_len_s: f64,
    pub hop_s: f64,
    pub mvn_window: usize,
    /// Margin above the utterance's noise floor, in dB.
    pub vad_offset_db: f64,
    /// Quantile of frame log energies taken as the noise floor.
    pub vad_floor_quantile: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            n_mels: 24,
            frame_len_s: 0.025,
            hop_s: 0.010,
            mvn_window: 150,
            vad_offset_db: 6.0,
            vad_floor_quantile: 0.1,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.frame_len_s > self.hop_s && self.hop_s > 0.0) {
            return Err(Error::InvalidArgument("frame_len_s > hop_s > 0 is required".into()));
        }
        if self.n_mels == 0 {
            return Err(Error::InvalidArgument("n_mels must be at least 1".into()));
        }
        if self.mvn_window < 3 {
            return Err(Error::InvalidArgument("mvn_window must be at least 3".into()));
        }
        if !(0.0..=1.0).contains(&self.vad_floor_quantile) {
            return Err(Error::InvalidArgument("vad_floor_quantile outside [0,1]".into()));
        }
        Ok(())
    }

    pub fn frame_len(&self, sample_rate: u32) -> usize {
        (self.frame_len_s * sample_rate as f64).round() as usize
    }

    pub fn hop(&self, sample_rate: u32) -> usize {
        (self.hop_s * sample_rate as f64).round() as usize
    }

    /// `1 + floor((len − frame_len)/hop)`, or 0 when shorter than a frame.
    pub fn n_frames(&self, n_samples: usize, sample_rate: u32) -> usize {
        let fl = self.frame_len(sample_rate);
        if n_samples < fl {
            0
        } else {
            1 + (n_samples - fl) / self.hop(sample_rate)
        }
    }

    /// Number of samples spanned by `n` consecutive frames.
    pub fn samples_for_frames(&self, n: usize, sample_rate: u32) -> usize {
        if n == 0 {
            0
        } else {
            self.frame_len(sample_rate) + (n - 1) * self.hop(sample_rate)
        }
    }

    pub fn frames_for_seconds(&self, s: f64) -> usize {
        (s / self.hop_s).round() as usize
    }
}

/// Per-frame log energy in dB, `10·log10(Σx² + ε)`.
pub fn frame_log_energies<T: Scalar>(w: &Waveform<T>, cfg: &FeatureConfig) -> Vec<f64> {
    let fl = cfg.frame_len(w.sample_rate);
    let hop = cfg.hop(w.sample_rate);
    let n = cfg.n_frames(w.len(), w.sample_rate);
    (0..n)
        .map(|t| {
            let e: f64 = w.samples[t * hop..t * hop + fl]
                .iter()
                .map(|x| x.as_f64() * x.as_f64())
                .sum();
            10.0 * (e + VAD_ENERGY_EPS).log10()
        })
        .collect()
}

/// Energy voice-activity mask: a frame is kept iff its log energy exceeds the
/// utterance's noise floor (the `vad_floor_quantile` quantile of frame log
/// energies) by more than `vad_offset_db`.
///
/// An utterance whose loudest frame does not clear that threshold has no
/// silence/speech contrast at all; its frames are then kept iff they are
/// above [`VAD_SILENCE_DB`].
pub fn energy_vad<T: Scalar>(w: &Waveform<T>, cfg: &FeatureConfig) -> Vec<bool> {
    let energies = frame_log_energies(w, cfg);
    if energies.is_empty() {
        return Vec::new();
    }
    let mut sorted = energies.clone();
    sorted.sort_by(f64::total_cmp);
    let idx = (cfg.vad_floor_quantile * (sorted.len() - 1) as f64).floor() as usize;
    let mut threshold = sorted[idx] + cfg.vad_offset_db;
    if sorted[sorted.len() - 1] <= threshold {
        threshold = VAD_SILENCE_DB;
    }
    energies.iter().map(|&e| e > threshold).collect()
}

/// Concatenates the hop-length sample blocks of the frames kept by the VAD.
///
/// The final kept frame contributes its full frame length so the retained
/// waveform yields as many frames as were kept when frames are contiguous.
pub fn apply_vad<T: Scalar>(w: &Waveform<T>, cfg: &FeatureConfig) -> Waveform<T> {
    let mask = energy_vad(w, cfg);
    let hop = cfg.hop(w.sample_rate);
    let fl = cfg.frame_len(w.sample_rate);
    let mut out = Vec::new();
    let kept: Vec<usize> = mask.iter().enumerate().filter_map(|(t, &k)| k.then_some(t)).collect();
    for (i, &t) in kept.iter().enumerate() {
        let end = if i + 1 == kept.len() {
            t * hop + fl
        } else {
            t * hop + hop
        };
        out.extend_from_slice(&w.samples[t * hop..end]);
    }
    Waveform {
        samples: out,
        sample_rate: w.sample_rate,
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Centre frequencies (Hz) of the `n_mels` triangular filters spanning 0..Nyquist.
pub fn mel_centers_hz(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    mel_edges_hz(n_mels, sample_rate)[1..=n_mels].to_vec()
}

fn mel_edges_hz(n_mels: usize, sample_rate: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

#[derive(Clone)]
struct MelFilter<T> {
    first_bin: usize,
    weights: Vec<T>,
}

/// Reusable log-mel extractor for one (config, sample rate) pair.
#[derive(Clone)]
pub struct LogMel<T: Scalar> {
    frame_len: usize,
    hop: usize,
    hop_s: f64,
    n_fft: usize,
    window: Vec<T>,
    filters: Vec<MelFilter<T>>,
    fft: Arc<dyn Fft<T>>,
}

impl<T: Scalar> std::fmt::Debug for LogMel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LogMel")
            .field("frame_len", &self.frame_len)
            .field("hop", &self.hop)
            .field("n_fft", &self.n_fft)
            .field("n_mels", &self.filters.len())
            .finish()
    }
}

impl<T: Scalar> LogMel<T> {
    pub fn new(cfg: &FeatureConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate()?;
        let frame_len = cfg.frame_len(sample_rate);
        let hop = cfg.hop(sample_rate);
        let n_fft = frame_len.next_power_of_two();
        let window = (0..frame_len)
            .map(|n| lit::<T>(0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (frame_len - 1) as f64).cos()))
            .collect();
        let edges = mel_edges_hz(cfg.n_mels, sample_rate);
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let filters = (0..cfg.n_mels)
            .map(|m| {
                let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let mut first_bin = None;
                let mut weights = Vec::new();
                for k in 0..=n_fft / 2 {
                    let f = k as f64 * bin_hz;
                    let w = if f > lo && f <= c {
                        (f - lo) / (c - lo)
                    } else if f > c && f < hi {
                        (hi - f) / (hi - c)
                    } else {
                        0.0
                    };
                    if w > 0.0 {
                        first_bin.get_or_insert(k);
                        weights.push(lit::<T>(w));
                    } else if first_bin.is_some() {
                        break;
                    }
                }
                MelFilter {
                    first_bin: first_bin.unwrap_or(0),
                    weights,
                }
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(Self {
            frame_len,
            hop,
            hop_s: cfg.hop_s,
            n_fft,
            window,
            filters,
            fft,
        })
    }

    pub fn n_mels(&self) -> usize {
        self.filters.len()
    }

    /// Dense `n_mels × (n_fft/2 + 1)` filterbank weights.
    pub fn filterbank(&self) -> Matrix<T> {
        let mut fb = Matrix::zeros(self.filters.len(), self.n_fft / 2 + 1);
        for (m, f) in self.filters.iter().enumerate() {
            for (i, w) in f.weights.iter().enumerate() {
                fb[(m, f.first_bin + i)] = *w;
            }
        }
        fb
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn compute(&self, w: &Waveform<T>) -> Result<FeatureMatrix<T>> {
        if w.len() < self.frame_len {
            return Err(Error::TooShort(format!(
                "{} samples, one frame needs {}",
                w.len(),
                self.frame_len
            )));
        }
        let n_frames = 1 + (w.len() - self.frame_len) / self.hop;
        let n_mels = self.filters.len();
        let mut out = Matrix::zeros(n_frames, n_mels);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.n_fft];
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); self.fft.get_inplace_scratch_len()];
        let mut power = vec![T::zero(); self.n_fft / 2 + 1];
        let eps = lit::<T>(LOGMEL_EPS);
        for t in 0..n_frames {
            let frame = &w.samples[t * self.hop..t * self.hop + self.frame_len];
            for (b, (x, win)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                *b = Complex::new(*x * *win, T::zero());
            }
            for b in buf[self.frame_len..].iter_mut() {
                *b = Complex::new(T::zero(), T::zero());
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            let row = out.row_mut(t);
            for (r, f) in row.iter_mut().zip(&self.filters) {
                let mut e = T::zero();
                for (i, wgt) in f.weights.iter().enumerate() {
                    e += *wgt * power[f.first_bin + i];
                }
                *r = (e + eps).ln();
            }
        }
        Ok(FeatureMatrix::new(out, self.hop_s))
    }
}

/// Log-mel filterbank features with a Hamming-windowed power spectrum.
pub fn logmel<T: Scalar>(w: &Waveform<T>, cfg: &FeatureConfig) -> Result<FeatureMatrix<T>> {
    LogMel::new(cfg, w.sample_rate)?.compute(w)
}

/// Per-frame mean and standard deviation over the centred window (truncated at the edges).
///
/// A window of `w` frames covers `w/2` frames on either side; even widths are
/// therefore widened by one to stay symmetric.
pub fn sliding_stats<T: Scalar>(f: &FeatureMatrix<T>, window: usize) -> (Matrix<T>, Matrix<T>) {
    let n = f.n_frames();
    let d = f.dim();
    let half = window / 2;
    let mut means = Matrix::zeros(n, d);
    let mut stds = Matrix::zeros(n, d);
    if n == 0 {
        return (means, stds);
    }
    // Shift by the column mean so prefix sums stay well conditioned.
    let mut shift = vec![T::zero(); d];
    for t in 0..n {
        for (s, x) in shift.iter_mut().zip(f.frame(t)) {
            *s += *x;
        }
    }
    let inv_n = T::one() / lit::<T>(n as f64);
    for (j, s) in shift.iter_mut().enumerate() {
        let first = f.frame(0)[j];
        // constant columns shift to exactly zero
        *s = if (1..n).all(|t| f.frame(t)[j] == first) {
            first
        } else {
            *s * inv_n
        };
    }
    let mut s1: Matrix<T> = Matrix::zeros(n + 1, d);
    let mut s2: Matrix<T> = Matrix::zeros(n + 1, d);
    for t in 0..n {
        for j in 0..d {
            let x = f.frame(t)[j] - shift[j];
            s1[(t + 1, j)] = s1[(t, j)] + x;
            s2[(t + 1, j)] = s2[(t, j)] + x * x;
        }
    }
    let floor = lit::<T>(MVN_STD_FLOOR);
    for t in 0..n {
        let lo = t.saturating_sub(half);
        let hi = (t + half + 1).min(n);
        let cnt = lit::<T>((hi - lo) as f64);
        for j in 0..d {
            let m = (s1[(hi, j)] - s1[(lo, j)]) / cnt;
            let var = ((s2[(hi, j)] - s2[(lo, j)]) / cnt - m * m).max(T::zero());
            means[(t, j)] = m + shift[j];
            stds[(t, j)] = var.sqrt().max(floor);
        }
    }
    (means, stds)
}

/// Sliding-window mean and variance normalization.
pub fn sliding_mvn<T: Scalar>(f: &FeatureMatrix<T>, window: usize) -> FeatureMatrix<T> {
    let (means, stds) = sliding_stats(f, window);
    let mut out = Matrix::zeros(f.n_frames(), f.dim());
    for t in 0..f.n_frames() {
        for j in 0..f.dim() {
            out[(t, j)] = (f.frame(t)[j] - means[(t, j)]) / stds[(t, j)];
        }
    }
    FeatureMatrix::new(out, f.hop_s)
}

/// Writes a feature archive: per utterance a `<utt_id> <T> <D>` header then `T` rows.
pub fn write_feature_archive<T: Scalar>(path: &Path, entries: &[(String, FeatureMatrix<T>)]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for (id, f) in entries {
        writeln!(out, "{} {} {}", id, f.n_frames(), f.dim()).map_err(io)?;
        for row in f.matrix().iter_rows() {
            let line: Vec<String> = row.iter().map(|x| format!("{:.16e}", x.as_f64())).collect();
            writeln!(out, "{}", line.join(" ")).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

pub fn read_feature_archive<T: Scalar>(path: &Path, hop_s: f64) -> Result<Vec<(String, FeatureMatrix<T>)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let mut out = Vec::new();
    let mut lineno = 0usize;
    while let Some(header) = lines.next() {
        lineno += 1;
        let header = header.map_err(|e| Error::io(path, e))?;
        if header.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = header.split_whitespace().collect();
        let bad = |m: &str, at: usize| Error::parse(path, format!("line {at}: {m}"));
        if parts.len() != 3 {
            return Err(bad("expected `<utt_id> <T> <D>`", lineno));
        }
        let t: usize = parts[1].parse().map_err(|_| bad("bad frame count", lineno))?;
        let d: usize = parts[2].parse().map_err(|_| bad("bad dimension", lineno))?;
        let mut data = Vec::with_capacity(t * d);
        for _ in 0..t {
            lineno += 1;
            let row = lines
                .next()
                .ok_or_else(|| bad("truncated archive", lineno))?
                .map_err(|e| Error::io(path, e))?;
            let vals: Vec<f64> = row
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad("bad value", lineno))?;
            if vals.len() != d {
                return Err(bad("row width differs from header", lineno));
            }
            data.extend(vals.into_iter().map(lit::<T>));
        }
        out.push((
            parts[0].to_string(),
            FeatureMatrix::new(Matrix::from_vec(t, d, data)?, hop_s),
        ));
    }
    Ok(out)
}
