//! `RunConfig`: flat INI sections of `key = value` lines.
//!
//! One visitor walks every field, so parsing, defaults and the resolved dump
//! can never disagree about which keys exist.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use spkdino::augment::{AugmentPolicy, CropConfig, NoiseKind, PadMode};
use spkdino::dino::DinoConfig;
use spkdino::eval::{fmt_f64, DcfParams};
use spkdino::features::FeatureConfig;
use spkdino::nn::{AdamConfig, EncoderConfig, HeadConfig};
use spkdino::supervised::{FinetuneConfig, LossKind, Strategy, SupervisedConfig};
use spkdino::synth::SyntheticCorpusSpec;

/// Rejected configuration; `key` is `section.name` (or just `name` at top level).
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: String,
    pub line: Option<usize>,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: `{}`: {}", self.key, self.msg),
            None => write!(f, "`{}`: {}", self.key, self.msg),
        }
    }
}

impl std::error::Error for ConfigError {}

fn qualified(section: &str, key: &str) -> String {
    if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    }
}

/// A value that can appear on the right of `=`.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(u32, u64, usize, PadMode, Strategy, LossKind);

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> Result<Self, String> {
        let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
        if v.is_nan() {
            return Err("NaN is not a value".into());
        }
        Ok(v)
    }
    fn render(&self) -> String {
        fmt_f64(*self)
    }
}

impl ConfigValue for bool {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s {
            "true" | "on" | "yes" | "1" => Ok(true),
            "false" | "off" | "no" | "0" => Ok(false),
            _ => Err(format!("expected true/false, got `{s}`")),
        }
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for String {
    fn parse_value(s: &str) -> Result<Self, String> {
        Ok(s.to_string())
    }
    fn render(&self) -> String {
        self.clone()
    }
}

/// Comma-separated list, e.g. `64, 64`.
impl ConfigValue for Vec<usize> {
    fn parse_value(s: &str) -> Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(Vec::new());
        }
        s.split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{}`: {e}", p.trim())))
            .collect()
    }
    fn render(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", ")
    }
}

/// `lo, hi`.
impl ConfigValue for (f64, f64) {
    fn parse_value(s: &str) -> Result<Self, String> {
        match s.split(',').map(str::trim).collect::<Vec<_>>().as_slice() {
            [a, b] => Ok((f64::parse_value(a)?, f64::parse_value(b)?)),
            _ => Err(format!("expected `lo, hi`, got `{s}`")),
        }
    }
    fn render(&self) -> String {
        format!("{}, {}", fmt_f64(self.0), fmt_f64(self.1))
    }
}

/// `none` or a count.
impl ConfigValue for Option<usize> {
    fn parse_value(s: &str) -> Result<Self, String> {
        if s == "none" {
            Ok(None)
        } else {
            usize::parse_value(s).map(Some)
        }
    }
    fn render(&self) -> String {
        self.map_or("none".into(), |v| v.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackendKind {
    Cosine,
    Plda,
}

impl std::str::FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "plda" => Ok(Self::Plda),
            _ => Err(format!("unknown backend `{s}` (cosine|plda)")),
        }
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cosine => "cosine",
            Self::Plda => "plda",
        })
    }
}

from_str_value!(BackendKind);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PldaInitName(pub spkdino::backend::PldaInit);

impl ConfigValue for PldaInitName {
    fn parse_value(s: &str) -> Result<Self, String> {
        use spkdino::backend::PldaInit;
        match s {
            "pca" => Ok(Self(PldaInit::Pca)),
            "zero" => Ok(Self(PldaInit::Zero)),
            _ => Err(format!("unknown PLDA init `{s}` (pca|zero)")),
        }
    }
    fn render(&self) -> String {
        match self.0 {
            spkdino::backend::PldaInit::Pca => "pca".into(),
            spkdino::backend::PldaInit::Zero => "zero".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSection {
    pub enabled: bool,
    pub policy: AugmentPolicy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackendSection {
    pub kind: BackendKind,
    /// Length-normalize embeddings before PLDA.
    pub length_norm: bool,
    pub plda_rank: usize,
    pub plda_iters: usize,
    pub plda_init: PldaInitName,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterSection {
    pub cycles: usize,
    pub kmeans_k: usize,
    pub n_clusters: usize,
    pub widen: bool,
    pub robust: bool,
    pub robust_epochs: usize,
    pub robust_lr: f64,
    pub robust_margin: f64,
    pub robust_margin_warmup_epochs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub dcf: DcfParams,
    /// Cap on non-target trials drawn by `synth`; `none` keeps every pair.
    pub max_nontarget: Option<usize>,
}

/// Everything a run can be configured with. `encoder.input_dim` follows
/// `features.n_mels`; `dino.crop` follows `[crop]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: String,
    pub corpus: SyntheticCorpusSpec,
    pub features: FeatureConfig,
    pub crop: CropConfig,
    pub augment: AugmentSection,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub dino: DinoConfig,
    pub supervised: SupervisedConfig,
    pub finetune: FinetuneConfig,
    pub backend: BackendSection,
    pub cluster: ClusterSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let dino = DinoConfig::default();
        Self {
            seed: 0,
            out: String::new(),
            corpus: SyntheticCorpusSpec::default(),
            features: FeatureConfig::default(),
            crop: dino.crop.clone(),
            augment: AugmentSection {
                enabled: true,
                policy: AugmentPolicy::default(),
            },
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            dino,
            supervised: SupervisedConfig::default(),
            finetune: FinetuneConfig::default(),
            backend: BackendSection {
                kind: BackendKind::Cosine,
                length_norm: true,
                plda_rank: 16,
                plda_iters: 10,
                plda_init: PldaInitName(spkdino::backend::PldaInit::Pca),
            },
            cluster: ClusterSection {
                cycles: 2,
                kmeans_k: 80,
                n_clusters: 20,
                widen: false,
                robust: true,
                robust_epochs: 10,
                robust_lr: 5e-4,
                robust_margin: 0.5,
                robust_margin_warmup_epochs: 5,
            },
            eval: EvalSection {
                dcf: DcfParams::default(),
                max_nontarget: None,
            },
        }
    }
}

trait Visitor {
    fn field<V: ConfigValue>(&mut self, section: &str, key: &str, v: &mut V) -> Result<(), ConfigError>;
}

fn visit_adam(v: &mut impl Visitor, s: &str, a: &mut AdamConfig) -> Result<(), ConfigError> {
    v.field(s, "beta1", &mut a.beta1)?;
    v.field(s, "beta2", &mut a.beta2)?;
    v.field(s, "eps", &mut a.eps)?;
    v.field(s, "weight_decay", &mut a.weight_decay)?;
    v.field(s, "amsgrad", &mut a.amsgrad)
}

fn visit(c: &mut RunConfig, v: &mut impl Visitor) -> Result<(), ConfigError> {
    v.field("", "seed", &mut c.seed)?;
    v.field("", "out", &mut c.out)?;

    let s = "corpus";
    let k = &mut c.corpus;
    v.field(s, "n_speakers", &mut k.n_speakers)?;
    v.field(s, "utts_per_speaker", &mut k.utts_per_speaker)?;
    v.field(s, "duration_s", &mut k.dur_range_s)?;
    v.field(s, "n_attr_classes", &mut k.n_attr_classes)?;
    v.field(s, "sample_rate", &mut k.sample_rate)?;
    v.field(s, "vowels_per_speaker", &mut k.vowels_per_speaker)?;
    v.field(s, "channel_snr_db", &mut k.channel_snr_db)?;
    v.field(s, "speaker_offset", &mut k.speaker_offset)?;

    let s = "features";
    let f = &mut c.features;
    v.field(s, "n_mels", &mut f.n_mels)?;
    v.field(s, "frame_len_s", &mut f.frame_len_s)?;
    v.field(s, "hop_s", &mut f.hop_s)?;
    v.field(s, "mvn_window", &mut f.mvn_window)?;
    v.field(s, "vad_offset_db", &mut f.vad_offset_db)?;
    v.field(s, "vad_floor_quantile", &mut f.vad_floor_quantile)?;

    let s = "crop";
    v.field(s, "n_long", &mut c.crop.n_long)?;
    v.field(s, "len_long_s", &mut c.crop.len_long_s)?;
    v.field(s, "n_short", &mut c.crop.n_short)?;
    v.field(s, "len_short_s", &mut c.crop.len_short_s)?;

    let s = "augment";
    v.field(s, "enabled", &mut c.augment.enabled)?;
    let p = &mut c.augment.policy;
    v.field(s, "reverb_prob", &mut p.reverb_prob)?;
    v.field(s, "noise_prob", &mut p.noise_prob)?;
    // One SNR range per noise kind; a missing kind gets a key too so it can be re-enabled.
    for kind in NoiseKind::ALL {
        let default = AugmentPolicy::default()
            .sources
            .into_iter()
            .find(|s| s.kind == kind)
            .map_or((0.0, 18.0), |s| s.snr_db);
        let mut range = p.sources.iter().find(|s| s.kind == kind).map_or(default, |s| s.snr_db);
        let mut on = p.sources.iter().any(|s| s.kind == kind);
        v.field(s, kind.name(), &mut on)?;
        v.field(s, &format!("snr_{}_db", kind.name()), &mut range)?;
        p.sources.retain(|s| s.kind != kind);
        if on {
            p.sources.push(spkdino::augment::NoiseSource { kind, snr_db: range });
        }
    }
    p.sources
        .sort_by_key(|s| NoiseKind::ALL.iter().position(|k| *k == s.kind));

    let s = "encoder";
    v.field(s, "hidden", &mut c.encoder.hidden)?;
    v.field(s, "embed_dim", &mut c.encoder.embed_dim)?;

    let s = "head";
    v.field(s, "hidden", &mut c.head.hidden)?;
    v.field(s, "bottleneck", &mut c.head.bottleneck)?;
    v.field(s, "out_dim", &mut c.head.out_dim)?;

    let s = "dino";
    let d = &mut c.dino;
    v.field(s, "epochs", &mut d.epochs)?;
    v.field(s, "batch_size", &mut d.batch_size)?;
    v.field(s, "lr", &mut d.lr)?;
    v.field(s, "lr_min", &mut d.lr_min)?;
    v.field(s, "warmup_epochs", &mut d.warmup_epochs)?;
    v.field(s, "freeze_last_epochs", &mut d.freeze_last_epochs)?;
    v.field(s, "tau_s", &mut d.tau_s)?;
    v.field(s, "tau_t", &mut d.tau_t)?;
    v.field(s, "center_momentum", &mut d.center_momentum)?;
    v.field(s, "teacher_momentum", &mut d.teacher_momentum)?;
    v.field(s, "centering", &mut d.centering)?;
    visit_adam(v, s, &mut d.adam)?;

    let s = "supervised";
    let t = &mut c.supervised;
    v.field(s, "epochs", &mut t.epochs)?;
    v.field(s, "batch_size", &mut t.batch_size)?;
    v.field(s, "lr", &mut t.lr)?;
    v.field(s, "lr_min", &mut t.lr_min)?;
    v.field(s, "warmup_epochs", &mut t.warmup_epochs)?;
    v.field(s, "chunk_len_s", &mut t.chunk_len_s)?;
    v.field(s, "pad", &mut t.pad)?;
    v.field(s, "aam_scale", &mut t.aam.scale)?;
    v.field(s, "aam_margin", &mut t.aam.margin)?;
    v.field(s, "aam_margin_warmup_epochs", &mut t.aam.margin_warmup_epochs)?;
    visit_adam(v, s, &mut t.adam)?;

    let s = "finetune";
    let t = &mut c.finetune;
    v.field(s, "strategy", &mut t.strategy)?;
    v.field(s, "loss", &mut t.loss)?;
    v.field(s, "chunk_len_s", &mut t.chunk_len_s)?;
    v.field(s, "pad", &mut t.pad)?;
    v.field(s, "augment", &mut t.augment)?;
    v.field(s, "epochs", &mut t.epochs)?;
    v.field(s, "batch_size", &mut t.batch_size)?;
    v.field(s, "lr", &mut t.lr)?;
    v.field(s, "plateau_factor", &mut t.plateau_factor)?;
    v.field(s, "plateau_patience", &mut t.plateau_patience)?;
    v.field(s, "plateau_min_delta", &mut t.plateau_min_delta)?;
    v.field(s, "aam_scale", &mut t.aam.scale)?;
    v.field(s, "aam_margin", &mut t.aam.margin)?;
    v.field(s, "aam_margin_warmup_epochs", &mut t.aam.margin_warmup_epochs)?;
    visit_adam(v, s, &mut t.adam)?;

    let s = "backend";
    let b = &mut c.backend;
    v.field(s, "kind", &mut b.kind)?;
    v.field(s, "length_norm", &mut b.length_norm)?;
    v.field(s, "plda_rank", &mut b.plda_rank)?;
    v.field(s, "plda_iters", &mut b.plda_iters)?;
    v.field(s, "plda_init", &mut b.plda_init)?;

    let s = "cluster";
    let k = &mut c.cluster;
    v.field(s, "cycles", &mut k.cycles)?;
    v.field(s, "kmeans_k", &mut k.kmeans_k)?;
    v.field(s, "n_clusters", &mut k.n_clusters)?;
    v.field(s, "widen", &mut k.widen)?;
    v.field(s, "robust", &mut k.robust)?;
    v.field(s, "robust_epochs", &mut k.robust_epochs)?;
    v.field(s, "robust_lr", &mut k.robust_lr)?;
    v.field(s, "robust_margin", &mut k.robust_margin)?;
    v.field(s, "robust_margin_warmup_epochs", &mut k.robust_margin_warmup_epochs)?;

    let s = "eval";
    v.field(s, "p_target", &mut c.eval.dcf.p_target)?;
    v.field(s, "c_miss", &mut c.eval.dcf.c_miss)?;
    v.field(s, "c_fa", &mut c.eval.dcf.c_fa)?;
    v.field(s, "max_nontarget", &mut c.eval.max_nontarget)?;

    c.encoder.input_dim = c.features.n_mels;
    c.dino.crop = c.crop.clone();
    Ok(())
}

struct Entry {
    value: String,
    line: usize,
}

struct Reader {
    entries: BTreeMap<(String, String), Entry>,
}

impl Visitor for Reader {
    fn field<V: ConfigValue>(&mut self, section: &str, key: &str, v: &mut V) -> Result<(), ConfigError> {
        if let Some(e) = self.entries.remove(&(section.to_string(), key.to_string())) {
            *v = V::parse_value(&e.value).map_err(|msg| ConfigError {
                key: qualified(section, key),
                line: Some(e.line),
                msg: format!("bad value `{}`: {msg}", e.value),
            })?;
        }
        Ok(())
    }
}

struct Writer {
    text: String,
    section: String,
}

impl Visitor for Writer {
    fn field<V: ConfigValue>(&mut self, section: &str, key: &str, v: &mut V) -> Result<(), ConfigError> {
        if section != self.section {
            self.text.push_str(&format!("\n[{section}]\n"));
            self.section = section.to_string();
        }
        self.text.push_str(&format!("{key} = {}\n", v.render()));
        Ok(())
    }
}

impl RunConfig {
    /// Parses overrides on top of the defaults. Unknown sections and keys are errors.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| ConfigError {
                    key: line.to_string(),
                    line: Some(line_no),
                    msg: "unterminated section header".into(),
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (k, val) = line.split_once('=').ok_or_else(|| ConfigError {
                key: line.to_string(),
                line: Some(line_no),
                msg: "expected `key = value`".into(),
            })?;
            let key = (section.clone(), k.trim().to_string());
            if entries.contains_key(&key) {
                return Err(ConfigError {
                    key: qualified(&key.0, &key.1),
                    line: Some(line_no),
                    msg: "duplicate key".into(),
                });
            }
            entries.insert(
                key,
                Entry {
                    value: val.trim().to_string(),
                    line: line_no,
                },
            );
        }
        let mut reader = Reader { entries };
        let mut cfg = RunConfig::default();
        visit(&mut cfg, &mut reader)?;
        if let Some(((s, k), e)) = reader.entries.into_iter().min_by_key(|(_, e)| e.line) {
            return Err(ConfigError {
                key: qualified(&s, &k),
                line: Some(e.line),
                msg: "unknown key".into(),
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            key: path.display().to_string(),
            line: None,
            msg: format!("cannot read: {e}"),
        })?;
        Self::parse(&text)
    }

    /// Every key with its resolved value; parsing it back gives the same config.
    pub fn to_ini(&self) -> String {
        let mut w = Writer {
            text: String::new(),
            section: String::new(),
        };
        let mut c = self.clone();
        visit(&mut c, &mut w).expect("writing never fails");
        w.text
    }

    pub fn robust(&self) -> Option<SupervisedConfig> {
        let k = &self.cluster;
        k.robust.then(|| {
            let mut r = self.supervised.clone();
            r.epochs = k.robust_epochs;
            r.lr = k.robust_lr;
            r.warmup_epochs = 0;
            r.aam.margin = k.robust_margin;
            r.aam.margin_warmup_epochs = k.robust_margin_warmup_epochs;
            r
        })
    }

    /// Runs each module's own checks, naming the section on failure.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let at = |section: &str| {
            let section = section.to_string();
            move |e: spkdino::Error| ConfigError {
                key: section.clone(),
                line: None,
                msg: e.to_string(),
            }
        };
        self.corpus.validate().map_err(at("corpus"))?;
        self.features.validate().map_err(at("features"))?;
        self.crop.validate().map_err(at("crop"))?;
        self.augment.policy.validate().map_err(at("augment"))?;
        self.dino.validate().map_err(at("dino"))?;
        self.supervised.validate().map_err(at("supervised"))?;
        self.finetune.validate().map_err(at("finetune"))?;
        if let Some(r) = self.robust() {
            r.validate().map_err(at("cluster"))?;
        }
        let bad = |key: &str, msg: &str| ConfigError {
            key: key.into(),
            line: None,
            msg: msg.into(),
        };
        if self.encoder.embed_dim == 0 || self.encoder.hidden.contains(&0) {
            return Err(bad("encoder", "layer widths must be at least 1"));
        }
        if self.head.hidden == 0 || self.head.bottleneck == 0 || self.head.out_dim < 2 {
            return Err(bad("head", "widths must be at least 1 and out_dim at least 2"));
        }
        if self.backend.plda_rank == 0 || self.backend.plda_rank > self.encoder.embed_dim {
            return Err(bad("backend.plda_rank", "must be in 1..=encoder.embed_dim"));
        }
        if self.cluster.n_clusters < 2 || self.cluster.kmeans_k < self.cluster.n_clusters {
            return Err(bad("cluster.kmeans_k", "need kmeans_k >= n_clusters >= 2"));
        }
        let d = &self.eval.dcf;
        if !(d.p_target > 0.0 && d.p_target < 1.0) {
            return Err(bad("eval.p_target", "must lie in (0, 1)"));
        }
        if !(d.c_miss > 0.0 && d.c_fa > 0.0) {
            return Err(bad("eval", "costs must be positive"));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        spkdino::nn::Checkpoint::<f64>::hash_config(&self.to_ini())
    }
}

/// Writes the resolved config as `config.ini` in `dir`.
pub fn write_resolved(dir: &Path, cfg: &RunConfig) -> std::io::Result<PathBuf> {
    let p = dir.join("config.ini");
    std::fs::write(&p, cfg.to_ini())?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let back = RunConfig::parse(&c.to_ini()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_ini(), c.to_ini());
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::parse("seed = 7\n[dino]\nepochs = 3 # short\n[encoder]\nhidden = 8, 4\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.dino.epochs, 3);
        assert_eq!(c.encoder.hidden, vec![8, 4]);
    }

    #[test]
    fn unknown_key_is_named() {
        let e = RunConfig::parse("[dino]\nepochs = 3\nepoch = 4\n").unwrap_err();
        assert_eq!(e.key, "dino.epoch");
        assert_eq!(e.line, Some(3));
        let e = RunConfig::parse("[nope]\nx = 1\n").unwrap_err();
        assert_eq!(e.key, "nope.x");
    }

    #[test]
    fn bad_values_are_named() {
        let e = RunConfig::parse("[finetune]\npad = mirror\n").unwrap_err();
        assert_eq!(e.key, "finetune.pad");
        let e = RunConfig::parse("[dino]\ntau_s = -1\n").unwrap_err();
        assert_eq!(e.key, "dino");
    }

    #[test]
    fn noise_kinds_can_be_dropped() {
        let c = RunConfig::parse("[augment]\nmusic = false\nsnr_babble_db = 5, 10\n").unwrap();
        let kinds: Vec<_> = c.augment.policy.sources.iter().map(|s| s.kind).collect();
        assert_eq!(kinds, vec![NoiseKind::Babble, NoiseKind::Generic]);
        assert_eq!(c.augment.policy.sources[0].snr_db, (5.0, 10.0));
        assert_eq!(RunConfig::parse(&c.to_ini()).unwrap(), c);
    }
}
