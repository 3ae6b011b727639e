//! Utterance preparation (VAD, cached log-mel) and chunk extraction for training and scoring.

use crate::augment::{augment_waveform, AugmentPolicy, AugmentPools};
use crate::error::{Error, Result};
use crate::features::{apply_vad, sliding_mvn, FeatureConfig, FeatureMatrix, LogMel, Waveform};
use crate::nn::EncoderParams;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::synth::Utterance;

/// A voice-active utterance with its un-normalized log-mel frames.
#[derive(Clone, Debug)]
pub struct PreparedUtt<T> {
    pub utt_id: String,
    pub speaker_id: String,
    pub attr_class: usize,
    pub wave: Waveform<T>,
    pub logmel: FeatureMatrix<T>,
}

impl<T: Scalar> PreparedUtt<T> {
    pub fn n_frames(&self) -> usize {
        self.logmel.n_frames()
    }
}

/// Feature front end shared by every trainer and by embedding extraction.
#[derive(Clone, Debug)]
pub struct Frontend<T: Scalar> {
    pub cfg: FeatureConfig,
    pub sample_rate: u32,
    logmel: LogMel<T>,
}

impl<T: Scalar> Frontend<T> {
    pub fn new(cfg: &FeatureConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            sample_rate,
            logmel: LogMel::new(cfg, sample_rate)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.cfg.n_mels
    }

    pub fn hop_s(&self) -> f64 {
        self.cfg.hop(self.sample_rate) as f64 / self.sample_rate as f64
    }

    /// VAD, then log-mel of the kept speech.
    pub fn prepare(&self, u: &Utterance<T>) -> Result<PreparedUtt<T>> {
        if u.wave.sample_rate != self.sample_rate {
            return Err(Error::InvalidArgument(format!(
                "{}: sample rate {} but the front end expects {}",
                u.utt_id, u.wave.sample_rate, self.sample_rate
            )));
        }
        let wave = apply_vad(&u.wave, &self.cfg);
        let logmel = self.logmel.compute(&wave)?;
        Ok(PreparedUtt {
            utt_id: u.utt_id.clone(),
            speaker_id: u.speaker_id.clone(),
            attr_class: u.attr_class,
            wave,
            logmel,
        })
    }

    /// Prepares every utterance; those without a single frame after VAD are dropped.
    pub fn prepare_all(&self, corpus: &[Utterance<T>]) -> Result<Vec<PreparedUtt<T>>> {
        let mut out = Vec::with_capacity(corpus.len());
        for u in corpus {
            match self.prepare(u) {
                Ok(p) => out.push(p),
                Err(Error::TooShort(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    /// Mean/variance normalized features of a whole utterance.
    pub fn normalized(&self, u: &PreparedUtt<T>) -> FeatureMatrix<T> {
        sliding_mvn(&u.logmel, self.cfg.mvn_window)
    }

    /// `len` frames starting at frame `start`, normalized. When `aug` is given
    /// the matching waveform span is augmented and re-analysed; otherwise the
    /// cached frames are reused.
    pub fn chunk(
        &self,
        u: &PreparedUtt<T>,
        start: usize,
        len: usize,
        aug: Option<&Augmenter<T>>,
        rng: &mut Rng,
    ) -> Result<FeatureMatrix<T>> {
        if start + len > u.n_frames() || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "{}: chunk [{start}, {}) outside {} frames",
                u.utt_id,
                start + len,
                u.n_frames()
            )));
        }
        let raw = match aug.filter(|a| a.policy.is_active()) {
            None => u.logmel.slice(start, len),
            Some(a) => {
                let hop = self.cfg.hop(self.sample_rate);
                let n = self.cfg.samples_for_frames(len, self.sample_rate);
                let seg = u.wave.slice(start * hop, n);
                let w = augment_waveform(&seg, &a.policy, &a.pools, rng)?;
                self.logmel.compute(&w)?
            }
        };
        Ok(sliding_mvn(&raw, self.cfg.mvn_window))
    }
}

/// Embedding of each whole (normalized) utterance.
pub fn extract_embeddings<T: Scalar>(
    encoder: &EncoderParams<T>,
    frontend: &Frontend<T>,
    utts: &[PreparedUtt<T>],
) -> Result<Vec<Vec<T>>> {
    utts.iter().map(|u| encoder.embed(&frontend.normalized(u))).collect()
}

/// Augmentation policy together with the recordings it draws from.
#[derive(Clone, Debug)]
pub struct Augmenter<T> {
    pub policy: AugmentPolicy,
    pub pools: AugmentPools<T>,
}

impl<T: Scalar> Augmenter<T> {
    /// Synthetic impulse responses and noises at the given rate.
    pub fn synthetic(policy: AugmentPolicy, sample_rate: u32, seed: u64) -> Self {
        Self {
            policy,
            pools: AugmentPools::synthetic(sample_rate, 4, 3.0, seed),
        }
    }
}

/// Dense label indices for string labels, in order of first appearance.
pub fn index_labels<'a>(labels: impl IntoIterator<Item = &'a str>) -> (Vec<usize>, Vec<String>) {
    let mut names: Vec<String> = Vec::new();
    let mut map = std::collections::HashMap::new();
    let idx = labels
        .into_iter()
        .map(|l| {
            *map.entry(l.to_string()).or_insert_with(|| {
                names.push(l.to_string());
                names.len() - 1
            })
        })
        .collect();
    (idx, names)
}
