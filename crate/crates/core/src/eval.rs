//! Accuracy, confusion matrices and false-reject rate at a target
//! false-alarm rate.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{Example, LabelMap};
use crate::error::{Error, Result};
use crate::model::{argmax, LgNet};

/// Utterances scored per forward pass.
pub const SCORE_CHUNK: usize = 64;

/// Per-class scores of one utterance and its true class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub true_class: usize,
    pub scores: Vec<f64>,
}

impl ScoredSample {
    pub fn predicted(&self) -> usize {
        argmax(&self.scores)
    }
}

/// Eval-mode class scores, one row per example, in input order.
pub fn score(model: &LgNet<f32>, examples: &[&Example]) -> Result<Vec<ScoredSample>> {
    let c = model.config().num_classes;
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(SCORE_CHUNK) {
        let feats: Vec<_> = chunk.iter().map(|e| &e.features).collect();
        let inf = model.infer(&feats)?;
        for (e, row) in chunk.iter().zip(inf.scores.data().chunks(c)) {
            out.push(ScoredSample { true_class: e.class, scores: row.iter().map(|&v| v as f64).collect() });
        }
    }
    Ok(out)
}

/// Fraction of samples whose argmax equals the true class.
pub fn accuracy(samples: &[ScoredSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("cannot score an empty split".into()));
    }
    let hits = samples.iter().filter(|s| s.predicted() == s.true_class).count();
    Ok(hits as f64 / samples.len() as f64)
}

/// Operating point chosen by [`frr_at_far`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrrAtFar {
    pub frr: f64,
    pub far: f64,
    pub threshold: f64,
    pub far_target: f64,
}

struct Detections {
    /// Sorted detection scores of negatives.
    negatives: Vec<f64>,
    /// Sorted detection scores of positives whose best keyword is right.
    hits: Vec<f64>,
    /// Positives whose best keyword is wrong.
    wrong: usize,
    positives: usize,
}

impl Detections {
    fn new(samples: &[ScoredSample], keywords: usize) -> Result<Self> {
        let mut d = Detections { negatives: Vec::new(), hits: Vec::new(), wrong: 0, positives: 0 };
        for s in samples {
            if s.scores.len() < keywords || keywords == 0 {
                return Err(Error::Input(format!("{} scores for {keywords} keywords", s.scores.len())));
            }
            let kw = &s.scores[..keywords];
            let det = kw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !det.is_finite() {
                return Err(Error::Input("non-finite score".into()));
            }
            if s.true_class < keywords {
                d.positives += 1;
                if argmax(kw) == s.true_class {
                    d.hits.push(det);
                } else {
                    d.wrong += 1;
                }
            } else {
                d.negatives.push(det);
            }
        }
        if d.negatives.is_empty() {
            return Err(Error::Input("false-alarm rate is undefined without negative samples".into()));
        }
        if d.positives == 0 {
            return Err(Error::Input("false-reject rate is undefined without keyword samples".into()));
        }
        d.negatives.sort_by(f64::total_cmp);
        d.hits.sort_by(f64::total_cmp);
        Ok(d)
    }

    fn far(&self, theta: f64) -> f64 {
        let above = self.negatives.len() - self.negatives.partition_point(|&s| s <= theta);
        above as f64 / self.negatives.len() as f64
    }

    fn frr(&self, theta: f64) -> f64 {
        let below = self.hits.partition_point(|&s| s <= theta);
        (below + self.wrong) as f64 / self.positives as f64
    }
}

/// False-reject rate at the smallest candidate threshold whose false-alarm
/// rate is within `far_target`.
///
/// The detection score is the best keyword score. Keyword utterances are
/// positives; `unknown` and `silence` are negatives. A negative is a false
/// alarm when its score exceeds the threshold; a positive is rejected when
/// its score does not, or when its best keyword is the wrong one.
/// Candidates are every observed detection score plus 1.
pub fn frr_at_far(samples: &[ScoredSample], keywords: usize, far_target: f64) -> Result<FrrAtFar> {
    if !(0.0..=1.0).contains(&far_target) {
        return Err(Error::Input(format!("FAR target {far_target} outside [0, 1]")));
    }
    let d = Detections::new(samples, keywords)?;
    let mut candidates: Vec<f64> = d.negatives.iter().chain(&d.hits).copied().collect();
    for s in samples.iter().filter(|s| s.true_class < keywords) {
        let kw = &s.scores[..keywords];
        if argmax(kw) != s.true_class {
            candidates.push(kw.iter().copied().fold(f64::NEG_INFINITY, f64::max));
        }
    }
    candidates.push(1.0);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let i = candidates.partition_point(|&t| d.far(t) > far_target);
    let threshold = *candidates.get(i).ok_or_else(|| Error::Input("no threshold meets the FAR target".into()))?;
    Ok(FrrAtFar { frr: d.frr(threshold), far: d.far(threshold), threshold, far_target })
}

/// Summary of one evaluated split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub accuracy: f64,
    pub classes: Vec<String>,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `None` when the split has no negatives or no keyword samples.
    pub frr_at_far: Option<FrrAtFar>,
}

pub fn report(samples: &[ScoredSample], labels: &LabelMap, far_target: f64) -> Result<EvalReport> {
    let acc = accuracy(samples)?;
    let c = labels.len();
    let mut confusion = vec![vec![0usize; c]; c];
    for s in samples {
        if s.scores.len() != c || s.true_class >= c {
            return Err(Error::Input(format!("sample has {} scores / class {} for {c} classes", s.scores.len(), s.true_class)));
        }
        confusion[s.true_class][s.predicted()] += 1;
    }
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let n: usize = row.iter().sum();
            (n > 0).then(|| row[i] as f64 / n as f64)
        })
        .collect();
    let frr = match frr_at_far(samples, labels.num_keywords(), far_target) {
        Ok(r) => Some(r),
        Err(Error::Input(m)) if m.contains("undefined") => None,
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        samples: samples.len(),
        accuracy: acc,
        classes: labels.classes().to_vec(),
        confusion,
        per_class_accuracy,
        frr_at_far: frr,
    })
}

/// Scores `examples` and summarises them.
pub fn evaluate(model: &LgNet<f32>, examples: &[&Example], labels: &LabelMap, far_target: f64) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(Error::Input("cannot evaluate an empty split".into()));
    }
    report(&score(model, examples)?, labels, far_target)
}
