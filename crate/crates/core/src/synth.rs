//! Deterministic synthetic-speaker corpus and the corpus manifest format.
//!
//! Each speaker owns a pitch range, a vocal-tract scale and a small set of
//! formant configurations ("vowels"). An utterance is a random walk over that
//! speaker's vowels driven by a glottal pulse train, so every utterance of a
//! speaker shares its spectral shapes while no two utterances are identical.
//! The attribute class sets the depth of a slow energy modulation and is drawn
//! independently of the speaker.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::features::{read_wav, write_wav, Waveform};
use crate::rng::{self, Rng};
use crate::scalar::{lit, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpusSpec {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub dur_range_s: (f64, f64),
    pub n_attr_classes: usize,
    pub seed: u64,
    pub sample_rate: u32,
    pub vowels_per_speaker: usize,
    /// Per-utterance background noise, dB below the speech.
    pub channel_snr_db: (f64, f64),
    /// First speaker index; disjoint offsets give disjoint speaker sets.
    pub speaker_offset: usize,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        Self {
            n_speakers: 20,
            utts_per_speaker: 10,
            dur_range_s: (4.0, 6.0),
            n_attr_classes: 3,
            seed: 0,
            sample_rate: 16000,
            vowels_per_speaker: 4,
            channel_snr_db: (10.0, 30.0),
            speaker_offset: 0,
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers == 0 || self.utts_per_speaker == 0 || self.n_attr_classes == 0 {
            return Err(Error::InvalidArgument("corpus counts must be at least 1".into()));
        }
        if self.vowels_per_speaker == 0 {
            return Err(Error::InvalidArgument("vowels_per_speaker must be at least 1".into()));
        }
        let (lo, hi) = self.dur_range_s;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::InvalidArgument(
                "duration range must satisfy 0 < lo <= hi".into(),
            ));
        }
        if self.sample_rate < 4000 {
            return Err(Error::InvalidArgument("sample rate below 4 kHz".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance<T> {
    pub utt_id: String,
    pub speaker_id: String,
    pub attr_class: usize,
    pub wave: Waveform<T>,
}

struct Formant {
    freq: f64,
    bw: f64,
}

struct Speaker {
    f0: f64,
    vowels: Vec<Vec<Formant>>,
    tilt: f64,
}

fn gauss(r: &mut Rng) -> f64 {
    StandardNormal.sample(r)
}

fn make_speaker(spec: &SyntheticCorpusSpec, idx: usize) -> Speaker {
    let mut r = rng::derived(spec.seed, &[&"speaker", &idx]);
    let nyq = spec.sample_rate as f64 / 2.0;
    let f0 = r.random_range(90.0..240.0);
    let scale: f64 = r.random_range(0.85..1.2);
    let bands = [(300.0, 850.0), (900.0, 2300.0), (2300.0, 3300.0)];
    let vowels = (0..spec.vowels_per_speaker)
        .map(|_| {
            bands
                .iter()
                .map(|&(lo, hi)| Formant {
                    freq: (scale * r.random_range(lo..hi)).min(0.9 * nyq),
                    bw: r.random_range(60.0..140.0),
                })
                .collect()
        })
        .collect();
    Speaker {
        f0,
        vowels,
        tilt: r.random_range(0.2..0.9),
    }
}

/// Two-pole resonator `y[n] = x[n] + a1·y[n−1] − a2·y[n−2]`.
#[derive(Clone, Copy, Default)]
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn retune(&mut self, f: &Formant, sr: f64) {
        let r = (-std::f64::consts::PI * f.bw / sr).exp();
        let theta = std::f64::consts::TAU * f.freq / sr;
        self.a1 = 2.0 * r * theta.cos();
        self.a2 = r * r;
        // unit gain at the centre frequency, roughly
        self.gain = (1.0 - r) * (1.0 + r * r - 2.0 * r * (2.0 * theta).cos()).sqrt();
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 - self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn make_utterance<T: Scalar>(spec: &SyntheticCorpusSpec, spk_idx: usize, spk: &Speaker, k: usize) -> Utterance<T> {
    let mut r: Rng = rng::derived(spec.seed, &[&"utt", &spk_idx, &k]);
    let sr = spec.sample_rate as f64;
    let (dlo, dhi) = spec.dur_range_s;
    let dur = if dlo == dhi { dlo } else { r.random_range(dlo..dhi) };
    let n = (dur * sr).round() as usize;
    let attr_class = r.random_range(0..spec.n_attr_classes);
    let depth = if spec.n_attr_classes > 1 {
        0.85 * attr_class as f64 / (spec.n_attr_classes - 1) as f64
    } else {
        0.0
    };
    let env_rate: f64 = r.random_range(2.0..5.0);
    let env_phase: f64 = r.random_range(0.0..std::f64::consts::TAU);
    let f0 = spk.f0 * r.random_range(0.92..1.08);
    let vib_phase: f64 = r.random_range(0.0..std::f64::consts::TAU);

    let mut out = vec![0.0f64; n];
    let mut res = [Resonator::default(); 3];
    let mut phase = 0.0f64;
    let mut pos = 0usize;
    let mut tilt_state = 0.0;
    while pos < n {
        let pause = r.random_bool(0.08);
        let seg_s = if pause {
            r.random_range(0.05..0.15)
        } else {
            r.random_range(0.06..0.2)
        };
        let seg_end = (pos + (seg_s * sr) as usize).min(n).max(pos + 1);
        let v = &spk.vowels[r.random_range(0..spk.vowels.len())];
        for (rz, f) in res.iter_mut().zip(v) {
            rz.retune(f, sr);
        }
        for (i, o) in out.iter_mut().enumerate().take(seg_end).skip(pos) {
            let t = i as f64 / sr;
            let inst_f0 = f0 * (1.0 + 0.04 * (std::f64::consts::TAU * 0.7 * t + vib_phase).sin());
            phase += inst_f0 / sr;
            let mut x = if phase >= 1.0 {
                phase -= 1.0;
                1.0
            } else {
                0.0
            };
            x += 0.03 * gauss(&mut r);
            if pause {
                x *= 0.01;
            }
            let mut y = x;
            for rz in res.iter_mut() {
                y = rz.step(y);
            }
            // spectral tilt: one-pole low-pass blended with the dry signal
            tilt_state = spk.tilt * tilt_state + (1.0 - spk.tilt) * y;
            let shaped = 0.5 * y + tilt_state;
            let env = 1.0 + depth * (std::f64::consts::TAU * env_rate * t + env_phase).sin();
            *o = shaped * env;
        }
        pos = seg_end;
    }
    let p_speech = out.iter().map(|x| x * x).sum::<f64>() / n.max(1) as f64;
    let (slo, shi) = spec.channel_snr_db;
    let snr = if slo == shi { slo } else { r.random_range(slo..shi) };
    let noise_amp = (p_speech / 10f64.powf(snr / 10.0)).sqrt();
    for o in out.iter_mut() {
        *o += noise_amp * gauss(&mut r);
    }
    let gain_db: f64 = r.random_range(-3.0..3.0);
    let peak = out.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
    let g = 0.5 * 10f64.powf(gain_db / 20.0) / peak;
    let spk_no = spk_idx;
    Utterance {
        utt_id: format!("spk{spk_no:04}-utt{k:03}"),
        speaker_id: format!("spk{spk_no:04}"),
        attr_class,
        wave: Waveform {
            samples: out.into_iter().map(|x| lit::<T>(x * g)).collect(),
            sample_rate: spec.sample_rate,
        },
    }
}

/// Generates the corpus; bit-identical for identical specs.
pub fn synth_corpus<T: Scalar>(spec: &SyntheticCorpusSpec) -> Result<Vec<Utterance<T>>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.n_speakers * spec.utts_per_speaker);
    for s in 0..spec.n_speakers {
        let spk = make_speaker(spec, spec.speaker_offset + s);
        for k in 0..spec.utts_per_speaker {
            out.push(make_utterance(spec, spec.speaker_offset + s, &spk, k));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utt_id: String,
    pub speaker_id: String,
    pub attr_class: usize,
    pub path: PathBuf,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for e in entries {
        writeln!(
            out,
            "{} {} {} {}",
            e.utt_id,
            e.speaker_id,
            e.attr_class,
            e.path.display()
        )
        .map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 {
            return Err(Error::parse(
                path,
                format!("line {}: expected `<utt_id> <speaker_id> <attr_class> <path>`", i + 1),
            ));
        }
        let attr_class = parts[2]
            .parse()
            .map_err(|_| Error::parse(path, format!("line {}: bad attr class", i + 1)))?;
        out.push(ManifestEntry {
            utt_id: parts[0].into(),
            speaker_id: parts[1].into(),
            attr_class,
            path: parts[3].into(),
        });
    }
    Ok(out)
}

/// Writes `wav/<utt_id>.wav` files plus `manifest.txt` (with relative paths) under `dir`.
pub fn write_corpus<T: Scalar>(dir: &Path, corpus: &[Utterance<T>]) -> Result<PathBuf> {
    let wav_dir = dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let mut entries = Vec::with_capacity(corpus.len());
    for u in corpus {
        let rel = PathBuf::from("wav").join(format!("{}.wav", u.utt_id));
        write_wav(&dir.join(&rel), &u.wave)?;
        entries.push(ManifestEntry {
            utt_id: u.utt_id.clone(),
            speaker_id: u.speaker_id.clone(),
            attr_class: u.attr_class,
            path: rel,
        });
    }
    let manifest = dir.join("manifest.txt");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Loads every manifest entry; relative paths resolve against the manifest's directory.
pub fn load_corpus<T: Scalar>(manifest: &Path) -> Result<Vec<Utterance<T>>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .into_iter()
        .map(|e| {
            let p = if e.path.is_absolute() {
                e.path.clone()
            } else {
                base.join(&e.path)
            };
            Ok(Utterance {
                utt_id: e.utt_id,
                speaker_id: e.speaker_id,
                attr_class: e.attr_class,
                wave: read_wav(&p)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticCorpusSpec {
        SyntheticCorpusSpec {
            n_speakers: 2,
            utts_per_speaker: 3,
            dur_range_s: (0.5, 0.8),
            sample_rate: 8000,
            ..Default::default()
        }
    }

    #[test]
    fn same_spec_same_corpus() {
        let a = synth_corpus::<f64>(&small()).unwrap();
        let b = synth_corpus::<f64>(&small()).unwrap();
        assert_eq!(a, b);
        let c = synth_corpus::<f64>(&SyntheticCorpusSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn fixed_duration_gives_fixed_length() {
        let spec = SyntheticCorpusSpec {
            n_speakers: 2,
            utts_per_speaker: 2,
            dur_range_s: (4.0, 4.0),
            ..Default::default()
        };
        for u in synth_corpus::<f64>(&spec).unwrap() {
            assert_eq!(u.wave.len(), 64000);
            assert!(u.wave.peak() <= 0.75);
        }
    }

    #[test]
    fn offsets_give_disjoint_speakers() {
        let a = synth_corpus::<f64>(&small()).unwrap();
        let b = synth_corpus::<f64>(&SyntheticCorpusSpec {
            speaker_offset: 2,
            ..small()
        })
        .unwrap();
        assert!(a.iter().all(|u| b.iter().all(|v| v.speaker_id != u.speaker_id)));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(SyntheticCorpusSpec {
            n_speakers: 0,
            ..small()
        }
        .validate()
        .is_err());
        assert!(SyntheticCorpusSpec {
            dur_range_s: (2.0, 1.0),
            ..small()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = synth_corpus::<f64>(&small()).unwrap();
        let m = write_corpus(dir.path(), &corpus).unwrap();
        let back = load_corpus::<f64>(&m).unwrap();
        assert_eq!(back.len(), corpus.len());
        for (a, b) in back.iter().zip(&corpus) {
            assert_eq!(
                (&a.utt_id, &a.speaker_id, a.attr_class),
                (&b.utt_id, &b.speaker_id, b.attr_class)
            );
            assert_eq!(a.wave.len(), b.wave.len());
        }
    }
}
