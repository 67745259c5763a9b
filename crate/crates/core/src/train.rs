//! Two-stage training: metric learning plus cross-entropy without silence,
//! then cross-entropy finetuning of the two FC layers on all classes with
//! the extractor frozen.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorStore;
use crate::autograd::Tape;
use crate::data::{epoch_batches, Example, FeatureSet, Split};
use crate::error::{Error, Result};
use crate::eval::{self, ScoredSample};
use crate::metric::{self, AnchorMode, AnchorRef, LossWeights, TripletItem};
use crate::model::{LgNet, Mode, Param, ParamGroup};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which objective stage 1 optimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Cross-entropy only.
    Ce,
    /// Cross-entropy plus triplets anchored on other utterances.
    CeSt,
    /// Cross-entropy plus triplets anchored on text vectors.
    CeTt,
}

impl LossMode {
    pub fn anchor_mode(self) -> Option<AnchorMode> {
        match self {
            LossMode::Ce => None,
            LossMode::CeSt => Some(AnchorMode::Speech),
            LossMode::CeTt => Some(AnchorMode::Text),
        }
    }
}

/// How words are grouped into triplet anchors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorKeys {
    /// Every word has its own anchor, including non-target words.
    PerWord,
    /// One anchor per class; non-target words share `unknown`.
    PerClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub lr_init: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    /// Stage-1 epoch cap.
    pub max_epochs: usize,
    /// Stage-2 epoch cap; 0 skips finetuning.
    pub stage2_max_epochs: usize,
    pub beta: f64,
    pub margin: f64,
    pub norm_p: f64,
    pub loss_mode: LossMode,
    pub anchor_keys: AnchorKeys,
    /// L2-normalise embeddings and anchors before triplet distances.
    pub normalize_embeddings: bool,
    /// Weight each sample's CE term by inverse class frequency.
    pub class_weighting: bool,
    /// Include silence in stage-1 validation accuracy.
    pub stage1_valid_silence: bool,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            lr_init: 0.01,
            momentum: 0.9,
            weight_decay: 0.001,
            lr_decay_factor: 3.0,
            plateau_patience: 3,
            early_stop_patience: 10,
            max_epochs: 10_000,
            stage2_max_epochs: 10_000,
            beta: 0.5,
            margin: 1.0,
            norm_p: 2.0,
            loss_mode: LossMode::CeTt,
            anchor_keys: AnchorKeys::PerWord,
            normalize_embeddings: false,
            class_weighting: false,
            stage1_valid_silence: false,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { beta: self.beta, margin: self.margin, p: self.norm_p }
    }

    /// Every problem found, each prefixed with its field path.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut positive = |name: &str, ok: bool| {
            if !ok {
                out.push(format!("training.{name} must be positive"));
            }
        };
        positive("batch_size", self.batch_size > 0);
        positive("lr_init", self.lr_init > 0.0 && self.lr_init.is_finite());
        positive("lr_decay_factor", self.lr_decay_factor >= 1.0);
        positive("plateau_patience", self.plateau_patience > 0);
        positive("early_stop_patience", self.early_stop_patience > 0);
        positive("margin", self.margin > 0.0 && self.margin.is_finite());
        if !(0.0..1.0).contains(&self.momentum) {
            out.push("training.momentum out of [0,1)".into());
        }
        if !(self.weight_decay >= 0.0) {
            out.push("training.weight_decay must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.beta) {
            out.push("training.beta out of [0,1]".into());
        }
        if !(self.norm_p >= 1.0) {
            out.push("training.norm_p must be at least 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

/// Classic momentum SGD with L2 folded into the gradient:
/// `g = grad + wd·p`, `v = m·v + g`, `p = p − lr·v`. Parameters without a
/// gradient are left alone. Any non-finite gradient aborts the whole step.
pub fn sgd_step<S: Scalar>(
    params: &mut [Param<S>],
    grads: &[Option<&[S]>],
    velocity: &mut [Vec<S>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    for (p, g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
    }
    let (lr, m, wd) = (S::of(lr), S::of(momentum), S::of(weight_decay));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let Some(g) = g else { continue };
        for ((x, &gi), vi) in p.value.data_mut().iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            *vi = m * *vi + gi + wd * *x;
            *x -= lr * *vi;
        }
    }
    Ok(())
}

/// What to do after an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Continue,
    DecayLr,
    Stop,
}

/// Plateau learning-rate decay and early stopping on validation accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr: f64,
    pub decays: u32,
    pub best: Option<f64>,
    pub since_improvement: usize,
    pub since_decay: usize,
}

impl Schedule {
    pub fn new(lr_init: f64) -> Self {
        Self { lr: lr_init, decays: 0, best: None, since_improvement: 0, since_decay: 0 }
    }

    /// Only a strict improvement on the best accuracy so far counts.
    pub fn step(&mut self, valid_acc: f64, cfg: &TrainingConfig) -> Action {
        if self.best.is_none_or(|b| valid_acc > b) {
            self.best = Some(valid_acc);
            self.since_improvement = 0;
            self.since_decay = 0;
            return Action::Continue;
        }
        self.since_improvement += 1;
        self.since_decay += 1;
        if self.since_improvement >= cfg.early_stop_patience {
            return Action::Stop;
        }
        if self.since_decay >= cfg.plateau_patience {
            self.since_decay = 0;
            self.decays += 1;
            self.lr = cfg.lr_init / libm::pow(cfg.lr_decay_factor, self.decays as f64);
            return Action::DecayLr;
        }
        Action::Continue
    }

}

/// Copy of every parameter and buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub params: Vec<Tensor<f32>>,
    pub buffers: Vec<Tensor<f32>>,
}

impl Snapshot {
    pub fn of(model: &LgNet<f32>) -> Self {
        Self {
            params: model.params().iter().map(|p| p.value.clone()).collect(),
            buffers: model.buffers().iter().map(|b| b.value.clone()).collect(),
        }
    }

    pub fn restore(&self, model: &mut LgNet<f32>) -> Result<()> {
        if self.params.len() != model.params().len() || self.buffers.len() != model.buffers().len() {
            return Err(Error::State("snapshot does not match the model".into()));
        }
        let params = model.params().iter().zip(&self.params).map(|(p, v)| Param { value: v.clone(), ..p.clone() }).collect();
        let buffers = model
            .buffers()
            .iter()
            .zip(&self.buffers)
            .map(|(b, v)| crate::model::Buffer { name: b.name.clone(), value: v.clone() })
            .collect();
        *model = LgNet::from_parts(model.config().clone(), model.text_dim(), params, buffers)?;
        Ok(())
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// 1 or 2.
    pub stage: u8,
    /// Epochs completed in this stage.
    pub epoch: usize,
    pub finished: bool,
    pub schedule: Schedule,
    /// One buffer per model parameter, zero-initialised.
    pub velocity: Vec<Vec<f32>>,
    /// Parameters at the latest epoch that matched the best validation
    /// accuracy of this stage.
    pub best: Option<Snapshot>,
}

impl TrainState {
    pub fn new(stage: u8, model: &LgNet<f32>, cfg: &TrainingConfig) -> Self {
        Self {
            stage,
            epoch: 0,
            finished: false,
            schedule: Schedule::new(cfg.lr_init),
            velocity: model.params().iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            best: None,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub loss: f64,
    pub loss_tri: Option<f64>,
    pub loss_ce: f64,
    pub lr: f64,
    pub valid_acc: f64,
    pub skipped_batches: usize,
}

/// Per-word text vectors, indexed by anchor key.
fn anchor_table(data: &FeatureSet, anchors: &AnchorStore, keys: AnchorKeys) -> Result<Vec<Vec<f32>>> {
    let names: Vec<&str> = match keys {
        AnchorKeys::PerWord => data.words.iter().map(String::as_str).collect(),
        AnchorKeys::PerClass => data.labels.classes().iter().map(String::as_str).collect(),
    };
    anchors.require(&names)?;
    Ok(names
        .iter()
        .map(|w| match anchors.get(w) {
            Ok(a) => a.vector.iter().map(|&v| v as f32).collect(),
            Err(_) => Vec::new(),
        })
        .collect())
}

fn anchor_key(e: &Example, keys: AnchorKeys) -> usize {
    match keys {
        AnchorKeys::PerWord => e.word,
        AnchorKeys::PerClass => e.class,
    }
}

fn class_weights(examples: &[Example], indices: &[usize], classes: usize) -> Vec<f32> {
    let mut count = vec![0usize; classes];
    for &i in indices {
        count[examples[i].class] += 1;
    }
    let present = count.iter().filter(|&&c| c > 0).count().max(1);
    count.iter().map(|&c| if c == 0 { 0.0 } else { indices.len() as f32 / (present * c) as f32 }).collect()
}

fn scored(model: &LgNet<f32>, data: &[Example], indices: &[usize]) -> Result<Vec<ScoredSample>> {
    let refs: Vec<&Example> = indices.iter().map(|&i| &data[i]).collect();
    eval::score(model, &refs)
}

/// Accuracy over `indices` of `part`, eval mode.
pub fn split_accuracy(model: &LgNet<f32>, data: &FeatureSet, split: Split, drop_silence: bool) -> Result<f64> {
    let idx = data.indices(split, drop_silence);
    eval::accuracy(&scored(model, data.part(split), &idx)?)
}

/// Why a stage returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Finished,
    /// Hit the caller's epoch limit; the state can be resumed.
    Paused,
}

/// Stage 1: trains every group on silence-free batches with the configured
/// loss, keeping the parameters of the best validation epoch. Runs until
/// early stopping, the epoch cap, or `pause_at` completed epochs.
pub fn train_stage1(
    model: &mut LgNet<f32>,
    state: &mut TrainState,
    data: &FeatureSet,
    anchors: Option<&AnchorStore>,
    cfg: &TrainingConfig,
    pause_at: Option<usize>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Outcome> {
    cfg.validate()?;
    if state.stage != 1 {
        return Err(Error::State(format!("expected a stage-1 state, got stage {}", state.stage)));
    }
    let mode = cfg.loss_mode.anchor_mode().filter(|_| cfg.beta > 0.0);
    let table = match mode {
        Some(AnchorMode::Text) => {
            let store = anchors.ok_or_else(|| Error::Config("text-anchor training needs an anchor store".into()))?;
            if model.text_dim() != Some(store.dim()) {
                return Err(Error::Config(format!(
                    "model text projection takes {:?} inputs, anchors have {}",
                    model.text_dim(),
                    store.dim()
                )));
            }
            anchor_table(data, store, cfg.anchor_keys)?
        }
        _ => Vec::new(),
    };
    let train_idx = data.indices(Split::Train, true);
    let valid_idx = data.indices(Split::Valid, !cfg.stage1_valid_silence);
    if train_idx.is_empty() || valid_idx.is_empty() {
        return Err(Error::Dataset("stage 1 needs non-silence training and validation samples".into()));
    }
    let mut pool: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &train_idx {
        pool.entry(anchor_key(&data.train[i], cfg.anchor_keys)).or_default().push(i);
    }
    let weights = cfg.class_weighting.then(|| class_weights(&data.train, &train_idx, data.labels.len()));
    let stage_seed = rng::derive_seed(cfg.seed, "stage", 1);

    while !state.finished {
        if state.epoch >= cfg.max_epochs {
            finish(model, state)?;
            break;
        }
        if pause_at.is_some_and(|p| state.epoch >= p) {
            return Ok(Outcome::Paused);
        }
        let epoch = state.epoch as u64;
        let mut trng = rng::stream(stage_seed, "triplets", epoch);
        let (mut sum, mut sum_tri, mut sum_ce, mut n_batches, mut skipped) = (0.0, 0.0, 0.0, 0usize, 0usize);
        for batch in epoch_batches(&train_idx, cfg.batch_size, stage_seed, epoch) {
            let triplets = match mode {
                Some(m) => {
                    let items: Vec<TripletItem> = batch
                        .iter()
                        .map(|&i| TripletItem { key: anchor_key(&data.train[i], cfg.anchor_keys), silence: false, dataset_index: i })
                        .collect();
                    match metric::sample_triplets(&items, m, &pool, &mut trng) {
                        Ok(t) => Some(t),
                        Err(Error::Sampling(_)) => {
                            skipped += 1;
                            continue;
                        }
                        Err(e) => return Err(e),
                    }
                }
                None => None,
            };
            let mut rows: Vec<&Example> = batch.iter().map(|&i| &data.train[i]).collect();
            if let Some(ts) = &triplets {
                for t in ts {
                    if let AnchorRef::Speech(d) = t.anchor {
                        rows.push(&data.train[d]);
                    }
                }
            }
            let feats: Vec<_> = rows.iter().map(|e| &e.features).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, |_| true);
            let x = tape.constant(model.input_tensor(&feats)?);
            let (emb, pending) = model.forward_embed(&mut tape, &bound, x, Mode::Train)?;
            let b = batch.len();
            let own = if rows.len() > b {
                let keep: Vec<usize> = (0..b).collect();
                tape.select_rows(emb, &keep)?
            } else {
                emb
            };
            let logits = model.logits(&mut tape, &bound, own)?;
            let labels: Vec<usize> = batch.iter().map(|&i| data.train[i].class).collect();
            let targets = metric::one_hot(&labels, data.labels.len())?;
            let row_w: Option<Vec<f32>> = weights.as_ref().map(|w| labels.iter().map(|&c| w[c]).collect());
            let l_ce = metric::ce_loss_logits(&mut tape, logits, &targets, row_w.as_deref())?;
            let (loss, l_tri) = match &triplets {
                Some(ts) => {
                    let pos: Vec<usize> = ts.iter().map(|t| t.positive).collect();
                    let neg: Vec<usize> = ts.iter().map(|t| t.negative).collect();
                    let mut e_pos = tape.select_rows(emb, &pos)?;
                    let mut e_neg = tape.select_rows(emb, &neg)?;
                    let mut e_anchor = match mode {
                        Some(AnchorMode::Text) => {
                            let dim = model.text_dim().unwrap_or(0);
                            let mut v = Vec::with_capacity(ts.len() * dim);
                            for t in ts {
                                if let AnchorRef::Text(k) = t.anchor {
                                    v.extend_from_slice(&table[k]);
                                }
                            }
                            let v = tape.constant(Tensor::from_vec(&[ts.len(), dim], v));
                            model.project_text(&mut tape, &bound, v)?
                        }
                        _ => {
                            let idx: Vec<usize> = (b..b + ts.len()).collect();
                            tape.select_rows(emb, &idx)?
                        }
                    };
                    if cfg.normalize_embeddings {
                        e_pos = tape.l2_normalize_rows(e_pos)?;
                        e_neg = tape.l2_normalize_rows(e_neg)?;
                        e_anchor = tape.l2_normalize_rows(e_anchor)?;
                    }
                    let l_tri = metric::triplet_loss(&mut tape, e_anchor, e_pos, e_neg, cfg.margin, cfg.norm_p)?;
                    (metric::combined_loss(&mut tape, l_tri, l_ce, cfg.beta)?, Some(l_tri))
                }
                None => (l_ce, None),
            };
            let loss_value = tape.value(loss).item() as f64;
            if !loss_value.is_finite() {
                return Err(Error::Diverged { stage: 1, epoch: state.epoch + 1, detail: format!("loss {loss_value}") });
            }
            tape.backward(loss)?;
            let grads = model.gradients(&tape, &bound);
            let grads: Vec<Option<Vec<f32>>> = grads.into_iter().map(|g| g.map(<[f32]>::to_vec)).collect();
            let grad_refs: Vec<Option<&[f32]>> = grads.iter().map(|g| g.as_deref()).collect();
            sgd_step(model.params_mut(), &grad_refs, &mut state.velocity, state.schedule.lr, cfg.momentum, cfg.weight_decay)
                .map_err(|e| Error::Diverged { stage: 1, epoch: state.epoch + 1, detail: format!("{e}") })?;
            model.commit_stats(pending);
            sum += loss_value;
            sum_ce += tape.value(l_ce).item() as f64;
            if let Some(t) = l_tri {
                sum_tri += tape.value(t).item() as f64;
            }
            n_batches += 1;
        }
        if n_batches == 0 {
            return Err(Error::Sampling(format!("every batch of stage-1 epoch {} was skipped", state.epoch + 1)));
        }
        let valid_acc = eval::accuracy(&scored(model, &data.valid, &valid_idx)?)?;
        let n = n_batches as f64;
        let log = EpochLog {
            stage: 1,
            epoch: state.epoch + 1,
            loss: sum / n,
            loss_tri: mode.map(|_| sum_tri / n),
            loss_ce: sum_ce / n,
            lr: state.schedule.lr,
            valid_acc,
            skipped_batches: skipped,
        };
        end_epoch(model, state, cfg, valid_acc)?;
        on_epoch(&log);
    }
    Ok(Outcome::Finished)
}

fn end_epoch(model: &mut LgNet<f32>, state: &mut TrainState, cfg: &TrainingConfig, valid_acc: f64) -> Result<()> {
    state.epoch += 1;
    let action = state.schedule.step(valid_acc, cfg);
    if state.schedule.best == Some(valid_acc) {
        state.best = Some(Snapshot::of(model));
    }
    if action == Action::Stop {
        finish(model, state)?;
    }
    Ok(())
}

fn finish(model: &mut LgNet<f32>, state: &mut TrainState) -> Result<()> {
    if let Some(best) = state.best.take() {
        best.restore(model)?;
    }
    state.finished = true;
    Ok(())
}

/// Drops the text projection and returns a fresh stage-2 state.
pub fn begin_stage2(model: &mut LgNet<f32>, cfg: &TrainingConfig) -> TrainState {
    model.drop_text_projection();
    TrainState::new(2, model, cfg)
}

/// Pooled extractor outputs (eval mode) for every example, `[N, C]`.
pub fn pooled_features(model: &LgNet<f32>, examples: &[Example]) -> Result<Tensor<f32>> {
    let c = model.config().last_channels();
    let mut data = Vec::with_capacity(examples.len() * c);
    for chunk in examples.chunks(eval::SCORE_CHUNK) {
        let feats: Vec<_> = chunk.iter().map(|e| &e.features).collect();
        data.extend_from_slice(model.infer_pooled(&feats)?.data());
    }
    Ok(Tensor::from_vec(&[examples.len(), c], data))
}

fn head_accuracy(model: &LgNet<f32>, pooled: &Tensor<f32>, examples: &[Example]) -> Result<f64> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape, |_| false);
    let x = tape.constant(pooled.clone());
    let e = model.embed_pooled(&mut tape, &b, x)?;
    let z = model.logits(&mut tape, &b, e)?;
    let c = model.config().num_classes;
    let samples: Vec<ScoredSample> = tape
        .value(z)
        .data()
        .chunks(c)
        .zip(examples)
        .map(|(row, ex)| ScoredSample { true_class: ex.class, scores: row.iter().map(|&v| v as f64).collect() })
        .collect();
    eval::accuracy(&samples)
}

/// Stage 2: cross-entropy on all classes, updating only the embedding and
/// classifier layers. The extractor and its running statistics are frozen,
/// so its pooled outputs are computed once up front.
pub fn finetune_stage2(
    model: &mut LgNet<f32>,
    state: &mut TrainState,
    data: &FeatureSet,
    cfg: &TrainingConfig,
    pause_at: Option<usize>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<Outcome> {
    cfg.validate()?;
    if state.stage != 2 {
        return Err(Error::State(format!("expected a stage-2 state, got stage {}", state.stage)));
    }
    if state.finished {
        return Ok(Outcome::Finished);
    }
    if cfg.stage2_max_epochs == 0 {
        state.finished = true;
        return Ok(Outcome::Finished);
    }
    if data.train.is_empty() || data.valid.is_empty() {
        return Err(Error::Dataset("stage 2 needs training and validation samples".into()));
    }
    let train_pooled = pooled_features(model, &data.train)?;
    let valid_pooled = pooled_features(model, &data.valid)?;
    let c = train_pooled.shape()[1];
    let all: Vec<usize> = (0..data.train.len()).collect();
    let weights = cfg.class_weighting.then(|| class_weights(&data.train, &all, data.labels.len()));
    let stage_seed = rng::derive_seed(cfg.seed, "stage", 2);

    while !state.finished {
        if state.epoch >= cfg.stage2_max_epochs {
            finish(model, state)?;
            break;
        }
        if pause_at.is_some_and(|p| state.epoch >= p) {
            return Ok(Outcome::Paused);
        }
        let (mut sum, mut n_batches) = (0.0, 0usize);
        for batch in epoch_batches(&all, cfg.batch_size, stage_seed, state.epoch as u64) {
            let mut rows = Vec::with_capacity(batch.len() * c);
            for &i in &batch {
                rows.extend_from_slice(&train_pooled.data()[i * c..(i + 1) * c]);
            }
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, |g| g == ParamGroup::Head);
            let x = tape.constant(Tensor::from_vec(&[batch.len(), c], rows));
            let e = model.embed_pooled(&mut tape, &bound, x)?;
            let z = model.logits(&mut tape, &bound, e)?;
            let labels: Vec<usize> = batch.iter().map(|&i| data.train[i].class).collect();
            let targets = metric::one_hot(&labels, data.labels.len())?;
            let row_w: Option<Vec<f32>> = weights.as_ref().map(|w| labels.iter().map(|&c| w[c]).collect());
            let loss = metric::ce_loss_logits(&mut tape, z, &targets, row_w.as_deref())?;
            let loss_value = tape.value(loss).item() as f64;
            if !loss_value.is_finite() {
                return Err(Error::Diverged { stage: 2, epoch: state.epoch + 1, detail: format!("loss {loss_value}") });
            }
            tape.backward(loss)?;
            let grads: Vec<Option<Vec<f32>>> =
                model.gradients(&tape, &bound).into_iter().map(|g| g.map(<[f32]>::to_vec)).collect();
            let grad_refs: Vec<Option<&[f32]>> = grads.iter().map(|g| g.as_deref()).collect();
            sgd_step(model.params_mut(), &grad_refs, &mut state.velocity, state.schedule.lr, cfg.momentum, cfg.weight_decay)
                .map_err(|e| Error::Diverged { stage: 2, epoch: state.epoch + 1, detail: format!("{e}") })?;
            sum += loss_value;
            n_batches += 1;
        }
        let valid_acc = head_accuracy(model, &valid_pooled, &data.valid)?;
        let log = EpochLog {
            stage: 2,
            epoch: state.epoch + 1,
            loss: sum / n_batches as f64,
            loss_tri: None,
            loss_ce: sum / n_batches as f64,
            lr: state.schedule.lr,
            valid_acc,
            skipped_batches: 0,
        };
        end_epoch(model, state, cfg, valid_acc)?;
        on_epoch(&log);
    }
    Ok(Outcome::Finished)
}

/// Both stages back to back.
pub fn train(
    model: &mut LgNet<f32>,
    data: &FeatureSet,
    anchors: Option<&AnchorStore>,
    cfg: &TrainingConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<()> {
    let mut s1 = TrainState::new(1, model, cfg);
    train_stage1(model, &mut s1, data, anchors, cfg, None, on_epoch)?;
    let mut s2 = begin_stage2(model, cfg);
    finetune_stage2(model, &mut s2, data, cfg, None, on_epoch)?;
    Ok(())
}

#[cfg(test)]
mod tests;
