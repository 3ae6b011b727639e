use std::collections::HashMap;
use std::path::{Path, PathBuf};

use spkdino::backend::{cosine_score, embedding_index, read_embeddings, write_embeddings, PldaBackend};
use spkdino::clustering::{iterate_pipeline, write_pseudo_labels, IterateConfig, METRICS_HEADER};
use spkdino::data::{extract_embeddings, index_labels, Augmenter, Frontend, PreparedUtt};
use spkdino::dino::{DinoEpoch, DinoTrainer};
use spkdino::eval::{
    det_sweep, eer, fmt_f64, join_scores, kfold, make_trials, min_dcf, read_scores, read_trials, score_label_pairs,
    write_det_csv, write_scores, write_trials, Stratify, Trial,
};
use spkdino::features::write_feature_archive;
use spkdino::nn::{read_checkpoint, write_checkpoint, Checkpoint, EncoderParams, GradScope};
use spkdino::supervised::{finetune, train_supervised, Labeled, SupervisedEpoch, SupervisedInit, HISTORY_HEADER};
use spkdino::synth::{load_corpus, read_manifest, synth_corpus, write_corpus};
use spkdino::{Real, Utt};

use crate::config::{write_resolved, BackendKind, ConfigValue, RunConfig};
use crate::output::{write_json, CsvLog, Json};
use crate::{report, Chunking, CliError, CliResult, Command, Common};

pub const DINO_HISTORY_HEADER: &str = "epoch,loss,entropy,max_prob,center_norm,lambda,lr";

pub fn dino_csv_row(e: &DinoEpoch) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        e.epoch,
        fmt_f64(e.loss),
        fmt_f64(e.entropy),
        fmt_f64(e.max_prob),
        fmt_f64(e.center_norm),
        fmt_f64(e.lambda),
        fmt_f64(e.lr)
    )
}

/// A resolved run: config with flag overrides applied and the output directory created.
struct Run {
    cfg: RunConfig,
    out: PathBuf,
}

impl Run {
    fn start(common: &Common, tweak: impl FnOnce(&mut RunConfig) -> CliResult) -> CliResult<Self> {
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        if let Some(o) = &common.out {
            cfg.out = o.display().to_string();
        }
        if cfg.out.is_empty() {
            return Err(CliError::config("no output directory: pass --out or set `out`"));
        }
        tweak(&mut cfg)?;
        cfg.validate()?;
        let out = PathBuf::from(&cfg.out);
        std::fs::create_dir_all(&out).map_err(|e| CliError::other(format!("{}: {e}", out.display())))?;
        write_resolved(&out, &cfg)?;
        Ok(Self { cfg, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Hash stored in checkpoints; independent of where outputs go.
    fn hash(&self) -> String {
        let mut c = self.cfg.clone();
        c.out.clear();
        Checkpoint::<Real>::hash_config(&c.to_ini())
    }

    fn augmenter(&self, sample_rate: u32) -> Option<Augmenter<Real>> {
        self.cfg
            .augment
            .enabled
            .then(|| Augmenter::synthetic(self.cfg.augment.policy.clone(), sample_rate, self.cfg.seed))
    }
}

fn apply_chunking(
    ch: &Chunking,
    chunk: &mut f64,
    pad: &mut spkdino::augment::PadMode,
    augment: &mut bool,
) -> CliResult {
    if let Some(c) = ch.chunk_len {
        *chunk = c;
    }
    if let Some(p) = &ch.pad {
        *pad = ConfigValue::parse_value(p).map_err(CliError::config)?;
    }
    if let Some(a) = &ch.augment {
        *augment = a == "on";
    }
    Ok(())
}

fn load_utts(manifest: &Path) -> CliResult<Vec<Utt>> {
    let corpus: Vec<Utt> = load_corpus(manifest)?;
    if corpus.is_empty() {
        return Err(CliError::other(format!("{}: empty manifest", manifest.display())));
    }
    Ok(corpus)
}

/// Loads and prepares a manifest; every recording must share one sample rate.
fn prepare(cfg: &RunConfig, manifest: &Path) -> CliResult<(Frontend<Real>, Vec<PreparedUtt<Real>>)> {
    let corpus = load_utts(manifest)?;
    let sr = corpus[0].wave.sample_rate;
    if let Some(u) = corpus.iter().find(|u| u.wave.sample_rate != sr) {
        return Err(CliError::other(format!(
            "{}: {} is at {} Hz, expected {sr} Hz",
            manifest.display(),
            u.utt_id,
            u.wave.sample_rate
        )));
    }
    let fe = Frontend::new(&cfg.features, sr)?;
    let utts = fe.prepare_all(&corpus)?;
    if utts.is_empty() {
        return Err(CliError::other(format!("{}: no speech after VAD", manifest.display())));
    }
    Ok((fe, utts))
}

/// Encoder stored in a DINO (`teacher.` / `student.` prefixed) or classifier checkpoint.
fn load_encoder(path: &Path, which: &str) -> CliResult<EncoderParams<Real>> {
    let ck = read_checkpoint::<Real>(path)?;
    let dino = format!("{which}.enc");
    let prefix = if ck.names().any(|n| n.starts_with(&format!("{dino}."))) {
        dino
    } else {
        "enc".to_string()
    };
    EncoderParams::from_checkpoint(&ck, &prefix).map_err(|e| CliError::other(format!("{}: {e}", path.display())))
}

fn check_dims(enc: &EncoderParams<Real>, fe: &Frontend<Real>) -> CliResult {
    if enc.input_dim() != fe.dim() {
        return Err(CliError::config(format!(
            "features.n_mels = {} but the encoder expects {} inputs",
            fe.dim(),
            enc.input_dim()
        )));
    }
    Ok(())
}

pub fn dispatch(cmd: &Command) -> CliResult {
    match cmd {
        Command::Synth { common } => synth(common),
        Command::TrainDino { common, corpus } => train_dino(common, corpus),
        Command::TrainXvector {
            common,
            corpus,
            chunking,
        } => train_xvector(common, corpus, chunking),
        Command::Finetune {
            common,
            corpus,
            init,
            heldout,
            target,
            strategy,
            loss,
            chunking,
        } => {
            let args = FinetuneArgs {
                corpus,
                init: init.as_deref(),
                heldout: heldout.as_deref(),
                by_speaker: target == "speaker",
            };
            run_finetune(common, &args, strategy.as_deref(), loss.as_deref(), chunking)
        }
        Command::Extract {
            common,
            corpus,
            model,
            which,
            features,
        } => extract(common, corpus, model, which, *features),
        Command::Score {
            common,
            embeddings,
            trials,
            backend,
            model,
            train_embeddings,
            train_manifest,
        } => score(
            common,
            embeddings,
            trials,
            backend.as_deref(),
            model.as_deref(),
            train_embeddings.as_deref().zip(train_manifest.as_deref()),
        ),
        Command::ClusterIterate {
            common,
            corpus,
            init,
            heldout,
            trials,
        } => cluster_iterate(common, corpus, init, heldout, trials.as_deref()),
        Command::Eval { common, scores, trials } => evaluate(common, scores, trials),
        Command::Report {
            common,
            runs,
            by,
            metric,
        } => {
            let run = Run::start(common, |_| Ok(()))?;
            report::report(runs, by, metric, &run.out)
        }
    }
}

fn synth(common: &Common) -> CliResult {
    let run = Run::start(common, |_| Ok(()))?;
    let mut spec = run.cfg.corpus.clone();
    spec.seed = run.cfg.seed;
    let corpus: Vec<Utt> = synth_corpus(&spec)?;
    let manifest = write_corpus(&run.out, &corpus)?;
    let pairs: Vec<(String, String)> = corpus
        .iter()
        .map(|u| (u.utt_id.clone(), u.speaker_id.clone()))
        .collect();
    let trials = make_trials(&pairs, run.cfg.eval.max_nontarget, run.cfg.seed);
    write_trials(&run.path("trials.txt"), &trials)?;
    println!("{}", manifest.display());
    Ok(())
}

fn train_dino(common: &Common, corpus: &Path) -> CliResult {
    let run = Run::start(common, |_| Ok(()))?;
    let cfg = &run.cfg;
    let (fe, utts) = prepare(cfg, corpus)?;
    let aug = run.augmenter(fe.sample_rate);
    let mut trainer = DinoTrainer::new(
        cfg.dino.clone(),
        &cfg.encoder,
        &cfg.head,
        &fe,
        aug.as_ref(),
        &utts,
        cfg.seed,
    )?;
    let mut log = CsvLog::create(&run.path("history.csv"), DINO_HISTORY_HEADER)?;
    let mut io_err = None;
    let result = trainer.run(|e| {
        if let Err(err) = log.row(&dino_csv_row(e)) {
            io_err.get_or_insert(err);
        }
    });
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let hist = match result {
        Ok(h) => h,
        Err(e) => {
            // Keep the last finite state for inspection.
            if e.is_divergence() {
                write_checkpoint(
                    &run.path("last_finite.ckpt"),
                    &trainer.state.to_checkpoint(&run.hash())?,
                )?;
            }
            return Err(e.into());
        }
    };
    write_checkpoint(&run.path("dino.ckpt"), &trainer.state.to_checkpoint(&run.hash())?)?;
    let last = hist.last();
    write_json(
        &run.path("summary.json"),
        &[
            ("command", Json::Str("train-dino".into())),
            ("seed", Json::Int(cfg.seed as usize)),
            ("n_utterances", Json::Int(trainer.n_utterances())),
            ("epochs", Json::Int(hist.len())),
            ("loss", Json::Num(last.map_or(f64::NAN, |e| e.loss))),
            ("entropy", Json::Num(last.map_or(f64::NAN, |e| e.entropy))),
            ("max_prob", Json::Num(last.map_or(f64::NAN, |e| e.max_prob))),
            ("log_k", Json::Num((cfg.head.out_dim as f64).ln())),
        ],
    )?;
    Ok(())
}

fn train_xvector(common: &Common, corpus: &Path, chunking: &Chunking) -> CliResult {
    let run = Run::start(common, |c| {
        let s = &mut c.supervised;
        apply_chunking(chunking, &mut s.chunk_len_s, &mut s.pad, &mut c.augment.enabled)
    })?;
    let cfg = &run.cfg;
    let (fe, utts) = prepare(cfg, corpus)?;
    let aug = run.augmenter(fe.sample_rate);
    let (labels, names) = index_labels(utts.iter().map(|u| u.speaker_id.as_str()));
    let mut log = CsvLog::create(&run.path("history.csv"), HISTORY_HEADER)?;
    let mut io_err = None;
    let (model, hist) = train_supervised(
        &cfg.supervised,
        SupervisedInit::Fresh(&cfg.encoder),
        &fe,
        aug.as_ref(),
        Labeled::new(&utts, &labels)?,
        names.len(),
        GradScope::All,
        cfg.seed,
        |e| {
            if let Err(err) = log.row(&e.csv_row()) {
                io_err.get_or_insert(err);
            }
        },
    )?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    write_checkpoint(&run.path("model.ckpt"), &model.to_checkpoint(&run.hash())?)?;
    write_classes(&run.path("classes.txt"), &names)?;
    write_json(
        &run.path("summary.json"),
        &[
            ("command", Json::Str("train-xvector".into())),
            ("seed", Json::Int(cfg.seed as usize)),
            ("chunk_len_s", Json::Num(cfg.supervised.chunk_len_s)),
            ("pad", Json::Str(cfg.supervised.pad.to_string())),
            ("augment", Json::Bool(cfg.augment.enabled)),
            ("n_classes", Json::Int(names.len())),
            (
                "train_accuracy",
                Json::Num(hist.last().map_or(f64::NAN, |h| h.accuracy)),
            ),
        ],
    )?;
    Ok(())
}

fn write_classes(path: &Path, names: &[String]) -> CliResult {
    let text: String = names.iter().enumerate().map(|(i, n)| format!("{i} {n}\n")).collect();
    std::fs::write(path, text)?;
    Ok(())
}

struct FinetuneArgs<'a> {
    corpus: &'a Path,
    init: Option<&'a Path>,
    heldout: Option<&'a Path>,
    by_speaker: bool,
}

fn run_finetune(
    common: &Common,
    args: &FinetuneArgs<'_>,
    strategy: Option<&str>,
    loss: Option<&str>,
    chunking: &Chunking,
) -> CliResult {
    let run = Run::start(common, |c| {
        let f = &mut c.finetune;
        if let Some(s) = strategy {
            f.strategy = ConfigValue::parse_value(s).map_err(CliError::config)?;
        }
        if let Some(l) = loss {
            f.loss = ConfigValue::parse_value(l).map_err(CliError::config)?;
        }
        apply_chunking(chunking, &mut f.chunk_len_s, &mut f.pad, &mut f.augment)
    })?;
    let cfg = &run.cfg;
    let (fe, utts) = prepare(cfg, args.corpus)?;
    let (train, heldout) = match args.heldout {
        Some(h) => (utts, prepare(cfg, h)?.1),
        None => split_heldout(utts, args.by_speaker, cfg.seed)?,
    };
    let all = train.iter().chain(&heldout);
    let (labels, names): (Vec<usize>, Vec<String>) = if args.by_speaker {
        index_labels(all.map(|u| u.speaker_id.as_str()))
    } else {
        let l: Vec<usize> = all.map(|u| u.attr_class).collect();
        let n = l.iter().max().map_or(0, |m| m + 1);
        (l, (0..n).map(|i| i.to_string()).collect())
    };
    let (train_labels, heldout_labels) = labels.split_at(train.len());
    let encoder = match args.init {
        Some(p) => load_encoder(p, "teacher")?,
        None => EncoderParams::init(&cfg.encoder, &mut spkdino::rng::derived(cfg.seed, &[&"ft-random-init"]))?,
    };
    check_dims(&encoder, &fe)?;
    let aug = cfg
        .finetune
        .augment
        .then(|| Augmenter::synthetic(cfg.augment.policy.clone(), fe.sample_rate, cfg.seed));
    let mut log = CsvLog::create(&run.path("history.csv"), HISTORY_HEADER)?;
    let mut io_err = None;
    let (model, hist) = finetune(
        &cfg.finetune,
        &encoder,
        &fe,
        aug.as_ref(),
        Labeled::new(&train, train_labels)?,
        Labeled::new(&heldout, heldout_labels)?,
        names.len(),
        cfg.seed,
        |e: &SupervisedEpoch| {
            if let Err(err) = log.row(&e.csv_row()) {
                io_err.get_or_insert(err);
            }
        },
    )?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    write_checkpoint(&run.path("model.ckpt"), &model.to_checkpoint(&run.hash())?)?;
    write_classes(&run.path("classes.txt"), &names)?;
    let need = cfg.features.frames_for_seconds(cfg.finetune.chunk_len_s);
    let padded = train.iter().chain(&heldout).filter(|u| u.n_frames() < need).count();
    let last = hist.last();
    let f = &cfg.finetune;
    write_json(
        &run.path("summary.json"),
        &[
            ("command", Json::Str("finetune".into())),
            ("seed", Json::Int(cfg.seed as usize)),
            ("strategy", Json::Str(f.strategy.to_string())),
            ("loss", Json::Str(f.loss.to_string())),
            ("pad", Json::Str(f.pad.to_string())),
            ("augment", Json::Bool(f.augment)),
            ("pretrained", Json::Bool(args.init.is_some())),
            ("chunk_len_s", Json::Num(f.chunk_len_s)),
            (
                "padded_fraction",
                Json::Num(padded as f64 / (train.len() + heldout.len()) as f64),
            ),
            ("n_train", Json::Int(train.len())),
            ("n_heldout", Json::Int(heldout.len())),
            ("train_accuracy", Json::Num(last.map_or(f64::NAN, |h| h.accuracy))),
            (
                "heldout_accuracy",
                Json::Num(last.and_then(|h| h.heldout_accuracy).unwrap_or(f64::NAN)),
            ),
        ],
    )?;
    Ok(())
}

type Utts = Vec<PreparedUtt<Real>>;

/// One fold held out: whole speakers for attribute targets, a class-stratified
/// share of each speaker for speaker targets.
fn split_heldout(utts: Vec<PreparedUtt<Real>>, by_speaker: bool, seed: u64) -> CliResult<(Utts, Utts)> {
    let (spk, names) = index_labels(utts.iter().map(|u| u.speaker_id.as_str()));
    let k = if by_speaker { 5 } else { names.len().min(5) };
    if k < 2 {
        return Err(CliError::other(
            "need at least two speakers to hold some out; pass --heldout",
        ));
    }
    let mode = if by_speaker {
        Stratify::Class(&spk)
    } else {
        Stratify::Group(&spk)
    };
    let folds = kfold(utts.len(), k, mode, seed)?;
    let mut held = vec![false; utts.len()];
    for &i in &folds[0] {
        held[i] = true;
    }
    let (h, t): (Vec<_>, Vec<_>) = utts.into_iter().zip(held).partition(|(_, h)| *h);
    Ok((
        t.into_iter().map(|p| p.0).collect(),
        h.into_iter().map(|p| p.0).collect(),
    ))
}

fn extract(common: &Common, corpus: &Path, model: &Path, which: &str, features: bool) -> CliResult {
    let run = Run::start(common, |_| Ok(()))?;
    let (fe, utts) = prepare(&run.cfg, corpus)?;
    let enc = load_encoder(model, which)?;
    check_dims(&enc, &fe)?;
    let embs = extract_embeddings(&enc, &fe, &utts)?;
    let ids: Vec<String> = utts.iter().map(|u| u.utt_id.clone()).collect();
    write_embeddings(&run.path("embeddings.txt"), &ids, &embs)?;
    if features {
        let entries: Vec<_> = utts.iter().map(|u| (u.utt_id.clone(), fe.normalized(u))).collect();
        write_feature_archive(&run.path("features.ark"), &entries)?;
    }
    Ok(())
}

fn score(
    common: &Common,
    embeddings: &Path,
    trials: &Path,
    backend: Option<&str>,
    model: Option<&Path>,
    train: Option<(&Path, &Path)>,
) -> CliResult {
    let run = Run::start(common, |c| {
        if let Some(b) = backend {
            c.backend.kind = ConfigValue::parse_value(b).map_err(CliError::config)?;
        }
        Ok(())
    })?;
    let (ids, vs) = read_embeddings::<Real>(embeddings)?;
    let trials = read_trials(trials)?;
    let scores = match run.cfg.backend.kind {
        BackendKind::Cosine => score_with(&trials, &ids, &vs, cosine_score)?,
        BackendKind::Plda => {
            let plda = match (model, train) {
                (Some(m), _) => PldaBackend::read(m)?,
                (None, Some((emb, manifest))) => {
                    let plda = fit_plda(&run, emb, manifest)?;
                    plda.write(&run.path("plda.txt"))?;
                    plda
                }
                (None, None) => {
                    return Err(CliError::config(
                        "backend.kind = plda needs --model or --train-embeddings with --train-manifest",
                    ))
                }
            };
            let llr = plda.scorer()?;
            score_with(&trials, &ids, &vs, llr)?
        }
    };
    write_scores(&run.path("scores.txt"), &scores)?;
    Ok(())
}

fn score_with(
    trials: &[Trial],
    ids: &[String],
    vs: &[Vec<Real>],
    f: impl Fn(&[Real], &[Real]) -> Real,
) -> CliResult<Vec<(String, String, f64)>> {
    let index = embedding_index(ids, vs);
    trials
        .iter()
        .map(|t| {
            let get = |id: &str| {
                index
                    .get(id)
                    .copied()
                    .ok_or_else(|| CliError::other(format!("no embedding for `{id}`")))
            };
            Ok((t.enroll.clone(), t.test.clone(), f(get(&t.enroll)?, get(&t.test)?)))
        })
        .collect()
}

/// EM fit on embeddings labelled by the speaker column of a manifest; the
/// log-likelihood trace goes to `plda_ll.csv`.
fn fit_plda(run: &Run, emb: &Path, manifest: &Path) -> CliResult<PldaBackend<Real>> {
    let speakers: HashMap<String, String> = read_manifest(manifest)?
        .into_iter()
        .map(|e| (e.utt_id, e.speaker_id))
        .collect();
    let (ids, vs) = read_embeddings::<Real>(emb)?;
    let mut spk = Vec::with_capacity(ids.len());
    for id in &ids {
        spk.push(
            speakers
                .get(id)
                .ok_or_else(|| CliError::other(format!("{}: `{id}` not in {}", emb.display(), manifest.display())))?
                .as_str(),
        );
    }
    let (labels, _) = index_labels(spk);
    let b = &run.cfg.backend;
    let (model, trace) = PldaBackend::fit(&vs, &labels, b.plda_rank, b.plda_iters, b.plda_init.0, b.length_norm)?;
    let mut log = CsvLog::create(&run.path("plda_ll.csv"), "iteration,log_likelihood")?;
    for (i, ll) in trace.iter().enumerate() {
        log.row(&format!("{i},{}", fmt_f64(*ll)))?;
    }
    Ok(model)
}

fn cluster_iterate(common: &Common, corpus: &Path, init: &Path, heldout: &Path, trials: Option<&Path>) -> CliResult {
    let run = Run::start(common, |_| Ok(()))?;
    let cfg = &run.cfg;
    let (fe, train) = prepare(cfg, corpus)?;
    let (_, held) = prepare(cfg, heldout)?;
    let trials = match trials {
        Some(p) => read_trials(p)?,
        None => {
            let pairs: Vec<(String, String)> = held.iter().map(|u| (u.utt_id.clone(), u.speaker_id.clone())).collect();
            make_trials(&pairs, cfg.eval.max_nontarget, cfg.seed)
        }
    };
    write_trials(&run.path("trials.txt"), &trials)?;
    let encoder = load_encoder(init, "teacher")?;
    check_dims(&encoder, &fe)?;
    let aug = run.augmenter(fe.sample_rate);
    let icfg = IterateConfig {
        cycles: cfg.cluster.cycles,
        kmeans_k: cfg.cluster.kmeans_k,
        n_clusters: cfg.cluster.n_clusters,
        train: cfg.supervised.clone(),
        widen: cfg.cluster.widen,
        robust: cfg.robust(),
    };
    let mut history = CsvLog::create(&run.path("history.csv"), &format!("cycle,stage,{HISTORY_HEADER}"))?;
    let mut metrics = CsvLog::create(&run.path("metrics.csv"), METRICS_HEADER)?;
    let (mut io_err, mut io_err_m) = (None, None);
    let out = iterate_pipeline(
        &icfg,
        &encoder,
        &fe,
        aug.as_ref(),
        &train,
        &held,
        &trials,
        cfg.seed,
        |cycle, stage, e| {
            if let Err(err) = history.row(&format!("{cycle},{},{}", stage.name(), e.csv_row())) {
                io_err.get_or_insert(err);
            }
        },
        |m| {
            if let Err(err) = metrics.row(&m.csv_row()) {
                io_err_m.get_or_insert(err);
            }
        },
    )?;
    if let Some(e) = io_err.or(io_err_m) {
        return Err(e.into());
    }
    if let (Some(model), Some(labels)) = (&out.classifier, &out.labels) {
        write_checkpoint(&run.path("model.ckpt"), &model.to_checkpoint(&run.hash())?)?;
        let ids: Vec<String> = train.iter().map(|u| u.utt_id.clone()).collect();
        write_pseudo_labels(&run.path("pseudo_labels.txt"), &ids, labels)?;
    }
    Ok(())
}

fn evaluate(common: &Common, scores: &Path, trials: &Path) -> CliResult {
    let run = Run::start(common, |_| Ok(()))?;
    let joined = join_scores(&read_scores(scores)?, &read_trials(trials)?)?;
    let pairs = score_label_pairs(&joined);
    let n_target = pairs.iter().filter(|p| p.1).count();
    let text = write_json(
        &run.path("eval.json"),
        &[
            ("eer", Json::Num(eer(&pairs)?)),
            ("min_dcf", Json::Num(min_dcf(&pairs, run.cfg.eval.dcf)?)),
            ("n_target", Json::Int(n_target)),
            ("n_nontarget", Json::Int(pairs.len() - n_target)),
        ],
    )?;
    write_det_csv(&run.path("det.csv"), &det_sweep(&pairs)?)?;
    print!("{text}");
    Ok(())
}
