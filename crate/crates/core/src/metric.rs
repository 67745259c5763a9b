//! Triplet metric learning with speech or text anchors, plus the
//! cross-entropy term it is combined with.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Weights of the combined objective `β·L_tri + (1 − β)·L_CE`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub beta: f64,
    /// Triplet margin α.
    pub margin: f64,
    /// Norm order of the triplet distance.
    pub p: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { beta: 0.5, margin: 1.0, p: 2.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} must lie in [0, 1]", self.beta)));
        }
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return Err(Error::Config(format!("margin {} must be positive", self.margin)));
        }
        if !(self.p >= 1.0) || !self.p.is_finite() {
            return Err(Error::Config(format!("norm order {} must be at least 1", self.p)));
        }
        Ok(())
    }
}

/// Where the triplet anchor comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    /// Another training utterance of the positive's word.
    Speech,
    /// The projected text vector of the positive's word.
    Text,
}

/// Mean hinge `max(d(a, p) − d(a, n) + α, 0)` over rows of `[N, D]`
/// embeddings (or a single rank-1 triplet).
pub fn triplet_loss<S: Scalar>(tape: &mut Tape<S>, anchor: Var, positive: Var, negative: Var, margin: f64, p: f64) -> Result<Var> {
    let d_pos = tape.pairwise_distance(anchor, positive, S::of(p))?;
    let d_neg = tape.pairwise_distance(anchor, negative, S::of(p))?;
    let gap = tape.sub(d_pos, d_neg)?;
    let shifted = tape.add_scalar(gap, S::of(margin));
    let hinge = tape.relu(shifted);
    Ok(tape.mean(hinge))
}

/// One-hot targets `[B, C]` from class indices.
pub fn one_hot<S: Scalar>(labels: &[usize], classes: usize) -> Result<Tensor<S>> {
    let mut data = alloc::vec![S::zero(); labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Input(format!("label {l} out of {classes} classes")));
        }
        data[i * classes + l] = S::one();
    }
    Ok(Tensor::from_vec(&[labels.len(), classes], data))
}

fn check_one_hot<S: Scalar>(y: &Tensor<S>) -> Result<()> {
    let c = *y.shape().last().unwrap_or(&0);
    if y.rank() != 2 || c == 0 {
        return Err(Error::Input(format!("targets must be [B, C], got {:?}", y.shape())));
    }
    for (r, row) in y.data().chunks(c).enumerate() {
        let ones = row.iter().filter(|&&v| v == S::one()).count();
        let zeros = row.iter().filter(|&&v| v == S::zero()).count();
        if ones != 1 || ones + zeros != c {
            return Err(Error::Input(format!("target row {r} is not one-hot")));
        }
    }
    Ok(())
}

/// Binary cross-entropy of classifier logits against one-hot targets,
/// summed over classes and averaged over the batch. Optional per-row
/// weights scale each sample's term.
pub fn ce_loss_logits<S: Scalar>(tape: &mut Tape<S>, logits: Var, targets: &Tensor<S>, weights: Option<&[S]>) -> Result<Var> {
    check_one_hot(targets)?;
    tape.bce_with_logits(logits, targets, weights)
}

/// Binary cross-entropy of sigmoid scores in `(0, 1)`. The scores are
/// mapped back to logits so the loss is evaluated in the stable form.
pub fn ce_loss<S: Scalar>(scores: &Tensor<S>, targets: &Tensor<S>) -> Result<S> {
    check_one_hot(targets)?;
    if scores.shape() != targets.shape() {
        return Err(Error::Input(format!("scores {:?} vs targets {:?}", scores.shape(), targets.shape())));
    }
    if let Some(bad) = scores.data().iter().find(|&&s| !(s > S::zero() && s < S::one())) {
        return Err(Error::Input(format!("score {bad} outside (0, 1)")));
    }
    let logits = scores.data().iter().map(|&s| (s / (S::one() - s)).ln()).collect();
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::from_vec(scores.shape(), logits));
    let l = tape.bce_with_logits(z, targets, None)?;
    Ok(tape.value(l).item())
}

/// `β·L_tri + (1 − β)·L_CE`; the end points return the single term
/// unchanged.
pub fn combined_loss<S: Scalar>(tape: &mut Tape<S>, l_tri: Var, l_ce: Var, beta: f64) -> Result<Var> {
    if beta == 0.0 {
        return Ok(l_ce);
    }
    if beta == 1.0 {
        return Ok(l_tri);
    }
    let a = tape.scale(l_tri, S::of(beta));
    let b = tape.scale(l_ce, S::of(1.0 - beta));
    tape.add(a, b)
}

/// What the sampler needs to know about one batch member.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletItem {
    /// Anchor key: word id in per-word mode, class id in per-class mode.
    pub key: usize,
    pub silence: bool,
    /// Position in the training set, used to avoid self-anchoring.
    pub dataset_index: usize,
}

/// Source of a triplet's anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorRef {
    /// Text vector for this key.
    Text(usize),
    /// Training-set utterance.
    Speech(usize),
}

/// Batch positions of the positive and negative, plus the anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub positive: usize,
    pub negative: usize,
    pub anchor: AnchorRef,
}

/// One triplet per non-silence batch member. The negative is a uniformly
/// random batch member with a different key. In speech mode the anchor is
/// a random training utterance from `pool[key]`, avoiding the positive
/// itself when the pool allows.
pub fn sample_triplets<R: Rng>(
    batch: &[TripletItem],
    mode: AnchorMode,
    pool: &BTreeMap<usize, Vec<usize>>,
    rng: &mut R,
) -> Result<Vec<Triplet>> {
    let live: Vec<usize> = (0..batch.len()).filter(|&i| !batch[i].silence).collect();
    let first = live.first().map(|&i| batch[i].key);
    if !live.iter().any(|&i| Some(batch[i].key) != first) {
        return Err(Error::Sampling(format!("batch of {} non-silence samples has fewer than two words", live.len())));
    }
    let mut out = Vec::with_capacity(live.len());
    let mut others = Vec::with_capacity(live.len());
    for &i in &live {
        let item = batch[i];
        others.clear();
        others.extend(live.iter().copied().filter(|&j| batch[j].key != item.key));
        let negative = others[rng.gen_range(0..others.len())];
        let anchor = match mode {
            AnchorMode::Text => AnchorRef::Text(item.key),
            AnchorMode::Speech => {
                let same = pool
                    .get(&item.key)
                    .filter(|v| !v.is_empty())
                    .ok_or_else(|| Error::Sampling(format!("no training utterances for key {}", item.key)))?;
                let candidates = same.iter().filter(|&&d| d != item.dataset_index).count();
                if candidates == 0 {
                    AnchorRef::Speech(same[rng.gen_range(0..same.len())])
                } else {
                    let pick = rng.gen_range(0..candidates);
                    AnchorRef::Speech(*same.iter().filter(|&&d| d != item.dataset_index).nth(pick).unwrap())
                }
            }
        };
        out.push(Triplet { positive: i, negative, anchor });
    }
    Ok(out)
}
