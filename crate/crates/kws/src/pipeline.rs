//! End-to-end operations behind the command-line tool: dataset loading,
//! two-stage training with checkpoints and logs, evaluation, embedding
//! export and single-file inference.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use kws_core::anchors::AnchorStore;
use kws_core::data::{DatasetSplit, FeatureSet, LabelMap, Split};
use kws_core::eval::{self, EvalReport, SCORE_CHUNK};
use kws_core::frontend::{MfccConfig, Waveform};
use kws_core::model::{argmax, LgNet};
use kws_core::rng;
use kws_core::train::{self, EpochLog, LossMode, Outcome, TrainState, TrainingConfig};

use crate::anchor_file::load_anchors;
use crate::checkpoint::Checkpoint;
use crate::config::{AnchorsSection, DataSection, ExperimentConfig};
use crate::error::{Error, Result};
use crate::features::Featurizer;
use crate::gscd::{load_noise, scan_dataset};
use crate::wav::read_wav;

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const TRAIN_LOG: &str = "train_log.jsonl";
/// Rewritten after every stage-1 epoch and at the start and end of stage 2.
pub const LATEST_CKPT: &str = "latest.ckpt";
pub const STAGE1_CKPT: &str = "stage1.ckpt";
pub const FINAL_CKPT: &str = "final.ckpt";

/// Scans the dataset, appends generated silence (seeded by `seed`) and
/// featurises the requested splits. Other splits are left empty.
pub fn load_dataset(
    data: &DataSection,
    labels: &LabelMap,
    mfcc: &MfccConfig,
    seed: u64,
    splits: &[Split],
    workers: usize,
) -> Result<FeatureSet> {
    let mut split = scan_dataset(&data.root, data.version, labels)?;
    let mut generated: BTreeMap<String, Waveform> = BTreeMap::new();
    if data.silence {
        let noise: Vec<Waveform> = load_noise(&data.root)?.into_iter().map(|(_, w)| w).collect();
        generated = split.add_silence(&noise, mfcc.clip_samples, rng::derive_seed(seed, "silence", 0))?;
    }
    for s in Split::ALL {
        if !splits.contains(&s) {
            split.part_mut(s).clear();
        }
    }
    featurise(&split, &data.root, &generated, mfcc, data.feature_cache.as_deref(), workers)
}

fn featurise(
    split: &DatasetSplit,
    root: &Path,
    generated: &BTreeMap<String, Waveform>,
    mfcc: &MfccConfig,
    cache: Option<&Path>,
    workers: usize,
) -> Result<FeatureSet> {
    let f = Featurizer::new(mfcc, cache)?;
    let all: Vec<&str> = Split::ALL.iter().flat_map(|&s| split.part(s)).map(|u| u.id.as_str()).collect();
    let mats = f.features_all(all.len(), workers, |i| match generated.get(all[i]) {
        Some(w) => Ok(w.clone()),
        None => read_wav(&root.join(all[i])),
    })?;
    let mut by_id: BTreeMap<&str, _> = all.iter().copied().zip(mats).collect();
    Ok(FeatureSet::build(split, |u| Ok(by_id.remove(u.id.as_str()).expect("featurised above")))?)
}

/// The configured anchor store, or `None` when none is configured.
/// Generated anchors cover `words`.
pub fn load_anchor_store(section: Option<&AnchorsSection>, words: &[String]) -> Result<Option<AnchorStore>> {
    let Some(a) = section else { return Ok(None) };
    let store = match (&a.path, a.fallback_seed) {
        (Some(p), _) => load_anchors(p)?,
        (None, Some(seed)) => AnchorStore::fallback(words, a.dim, seed)?,
        (None, None) => return Err(Error::Config(vec!["anchors: one of path or fallback_seed is required".into()])),
    };
    Ok(Some(store))
}

fn uses_text_anchors(t: &TrainingConfig) -> bool {
    t.loss_mode == LossMode::CeTt && t.beta > 0.0
}

/// Appends one JSON line per epoch.
pub struct TrainLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl TrainLog {
    pub fn open(path: &Path, append: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self { out: BufWriter::new(file), path: path.to_path_buf() })
    }

    pub fn write(&mut self, log: &EpochLog) -> Result<()> {
        let line = serde_json::to_string(log).expect("log lines always serialise");
        writeln!(self.out, "{line}").and_then(|_| self.out.flush()).map_err(|e| Error::io(&self.path, e))
    }
}

/// Everything `run_training` produced.
#[derive(Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub data: FeatureSet,
    pub final_path: PathBuf,
}

/// Runs (or resumes) both training stages, writing the resolved config,
/// the epoch log and checkpoints under `cfg.output_dir`. `on_epoch` sees
/// every log line as it is written.
pub fn run_training(
    cfg: &ExperimentConfig,
    resume: Option<&Path>,
    workers: usize,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutput> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let resolved = out.join(RESOLVED_CONFIG);
    fs::write(&resolved, cfg.to_toml()?).map_err(|e| Error::io(&resolved, e))?;

    let labels = cfg.labels()?;
    let model_cfg = cfg.model_config()?;
    let tcfg = &cfg.training;
    let data = load_dataset(&cfg.data, &labels, &model_cfg.mfcc, tcfg.seed, &Split::ALL, workers)?;
    let anchors = load_anchor_store(cfg.anchors.as_ref(), &data.words)?;
    if uses_text_anchors(tcfg) {
        let store = anchors.as_ref().ok_or_else(|| Error::Config(vec!["training.loss_mode = \"ce_tt\" requires an [anchors] section".into()]))?;
        store.require(&data.words)?;
    }

    let (mut model, mut state) = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.training != *tcfg || ck.labels != labels || *ck.model.config() != model_cfg {
                return Err(Error::Config(vec![format!(
                    "{} was written with a different model, label set or training section",
                    p.display()
                )]));
            }
            let state = ck.state.ok_or_else(|| Error::format(p, "checkpoint has no trainer state to resume"))?;
            (ck.model, state)
        }
        None => {
            let text_dim = if uses_text_anchors(tcfg) { anchors.as_ref().map(AnchorStore::dim) } else { None };
            let model = LgNet::new(model_cfg, text_dim, tcfg.seed)?;
            let state = TrainState::new(1, &model, tcfg);
            (model, state)
        }
    };

    let mut log = TrainLog::open(&out.join(TRAIN_LOG), resume.is_some())?;
    let mut log_err: Option<Error> = None;
    let mut sink = |l: &EpochLog| {
        if let Err(e) = log.write(l) {
            log_err.get_or_insert(e);
        }
        on_epoch(l);
    };
    let save = |model: &LgNet<f32>, state: &TrainState, name: &str| -> Result<PathBuf> {
        let path = out.join(name);
        Checkpoint { model: model.clone(), labels: labels.clone(), training: tcfg.clone(), state: Some(state.clone()) }.save(&path)?;
        Ok(path)
    };

    if state.stage == 1 {
        loop {
            let next = Some(state.epoch + 1);
            let outcome = train::train_stage1(&mut model, &mut state, &data, anchors.as_ref(), tcfg, next, &mut sink)?;
            save(&model, &state, LATEST_CKPT)?;
            if outcome == Outcome::Finished {
                break;
            }
        }
        save(&model, &state, STAGE1_CKPT)?;
        state = train::begin_stage2(&mut model, tcfg);
        save(&model, &state, LATEST_CKPT)?;
    }
    train::finetune_stage2(&mut model, &mut state, &data, tcfg, None, &mut sink)?;
    if let Some(e) = log_err {
        return Err(e);
    }
    save(&model, &state, LATEST_CKPT)?;
    let final_path = save(&model, &state, FINAL_CKPT)?;
    let checkpoint = Checkpoint { model, labels, training: tcfg.clone(), state: Some(state) };
    Ok(TrainOutput { checkpoint, data, final_path })
}

fn check_labels(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<()> {
    if cfg.labels()? != ck.labels {
        return Err(Error::Config(vec!["the checkpoint was trained on a different label set than data".into()]));
    }
    Ok(())
}

/// Featurises one split the way the checkpoint was trained.
pub fn load_split(cfg: &ExperimentConfig, ck: &Checkpoint, split: Split, workers: usize) -> Result<FeatureSet> {
    check_labels(cfg, ck)?;
    load_dataset(&cfg.data, &ck.labels, &ck.model.config().mfcc, ck.training.seed, &[split], workers)
}

pub fn evaluate_split(ck: &Checkpoint, data: &FeatureSet, split: Split, far: f64) -> Result<EvalReport> {
    let refs: Vec<_> = data.part(split).iter().collect();
    Ok(eval::evaluate(&ck.model, &refs, &ck.labels, far)?)
}

/// CSV of eval-mode embeddings: `label,word,e000,…`, one row per utterance
/// in split order.
pub fn write_embeddings<W: Write>(model: &LgNet<f32>, data: &FeatureSet, split: Split, out: W) -> Result<usize> {
    let dim = model.config().embedding_dim;
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Dataset(format!("writing embeddings: {e}"));
    let mut header = vec!["label".to_string(), "word".to_string()];
    header.extend((0..dim).map(|i| format!("e{i:03}")));
    w.write_record(&header).map_err(csv_err)?;
    let part = data.part(split);
    for chunk in part.chunks(SCORE_CHUNK) {
        let feats: Vec<_> = chunk.iter().map(|e| &e.features).collect();
        let emb = model.infer(&feats)?.embeddings;
        for (e, row) in chunk.iter().zip(emb.data().chunks(dim)) {
            let mut rec = vec![data.labels.name(e.class).to_string(), data.words[e.word].clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::Dataset(format!("writing embeddings: {e}")))?;
    Ok(part.len())
}

/// Per-class scores for one clip and the index of the best class.
pub fn infer_wav(ck: &Checkpoint, path: &Path) -> Result<(Vec<f32>, usize)> {
    let wave = read_wav(path)?;
    let f = Featurizer::new(&ck.model.config().mfcc, None)?;
    let feats = f.features(&wave)?;
    let scores = ck.model.infer(&[&feats])?.scores.into_data();
    let best = argmax(&scores);
    Ok((scores, best))
}
