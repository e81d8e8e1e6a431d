//! Evaluation metrics: accuracy, support-weighted F1, and set-based
//! precision/recall/F1 for cause extraction and emotion-cause pairs.
//!
//! Conventions: a zero denominator yields 0 rather than NaN; classes with
//! no gold occurrences carry zero weight in the weighted F1; argmax ties
//! resolve to the lowest index.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerClass {
    pub label: String,
    pub p: f64,
    pub r: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub p: f64,
    pub r: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: f64,
    pub wf1: f64,
    pub per_class: Vec<PerClass>,
    pub cause: Prf,
    pub pair: Prf,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn accuracy(gold: &[usize], pred: &[usize]) -> f64 {
    assert_eq!(gold.len(), pred.len());
    let hits = gold.iter().zip(pred).filter(|(g, p)| g == p).count();
    ratio(hits, gold.len())
}

pub fn per_class_prf(gold: &[usize], pred: &[usize], labels: &[String]) -> Vec<PerClass> {
    assert_eq!(gold.len(), pred.len());
    let k = labels.len();
    let mut tp = vec![0usize; k];
    let mut fp = vec![0usize; k];
    let mut fn_ = vec![0usize; k];
    let mut support = vec![0usize; k];
    for (&g, &p) in gold.iter().zip(pred) {
        support[g] += 1;
        if g == p {
            tp[g] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    (0..k)
        .map(|c| {
            let p = ratio(tp[c], tp[c] + fp[c]);
            let r = ratio(tp[c], tp[c] + fn_[c]);
            PerClass {
                label: labels[c].clone(),
                p,
                r,
                f1: f1_of(p, r),
                support: support[c],
            }
        })
        .collect()
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(per_class: &[PerClass]) -> f64 {
    let total: usize = per_class.iter().map(|c| c.support).sum();
    if total == 0 {
        return 0.0;
    }
    per_class
        .iter()
        .map(|c| c.support as f64 * c.f1)
        .sum::<f64>()
        / total as f64
}

/// Per-utterance outcomes feeding the set metrics. Cause predictions are
/// always present (the head always produces an argmax); whether they
/// enter the prediction set depends on the predicted emotion.
#[derive(Clone, Copy, Debug)]
pub struct UttOutcome {
    pub gold_emotion: usize,
    pub pred_emotion: usize,
    pub gold_cause: Option<usize>,
    pub pred_cause: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PairMode {
    /// A predicted pair must match the gold cause position and the gold
    /// emotion category.
    Strict,
    /// Position match only.
    Position,
}

fn set_prf(pred: usize, gold: usize, hits: usize) -> Prf {
    let p = ratio(hits, pred);
    let r = ratio(hits, gold);
    Prf {
        p,
        r,
        f1: f1_of(p, r),
    }
}

/// Cause extraction over prediction/gold pair sets. Predicted set: every
/// utterance whose predicted emotion is non-neutral contributes its
/// predicted cause. Gold set: every utterance with an annotated cause.
pub fn cause_prf(conversations: &[Vec<UttOutcome>], neutral: usize) -> Prf {
    let mut pred = 0usize;
    let mut gold = 0usize;
    let mut hits = 0usize;
    for conv in conversations {
        for u in conv {
            let predicted = u.pred_emotion != neutral;
            if predicted {
                pred += 1;
            }
            if let Some(c) = u.gold_cause {
                gold += 1;
                if predicted && u.pred_cause == c {
                    hits += 1;
                }
            }
        }
    }
    set_prf(pred, gold, hits)
}

/// Emotion-cause pairs: like [`cause_prf`] but a hit additionally
/// requires the emotion category to match in strict mode.
pub fn pair_prf(conversations: &[Vec<UttOutcome>], neutral: usize, mode: PairMode) -> Prf {
    let mut pred = 0usize;
    let mut gold = 0usize;
    let mut hits = 0usize;
    for conv in conversations {
        for u in conv {
            let predicted = u.pred_emotion != neutral;
            if predicted {
                pred += 1;
            }
            if let Some(c) = u.gold_cause {
                gold += 1;
                let position_ok = predicted && u.pred_cause == c;
                let emotion_ok = u.pred_emotion == u.gold_emotion;
                let hit = match mode {
                    PairMode::Strict => position_ok && emotion_ok,
                    PairMode::Position => position_ok,
                };
                if hit {
                    hits += 1;
                }
            }
        }
    }
    set_prf(pred, gold, hits)
}

/// Full report over per-conversation outcomes.
pub fn evaluate(
    conversations: &[Vec<UttOutcome>],
    labels: &[String],
    neutral: usize,
    mode: PairMode,
) -> MetricReport {
    let gold: Vec<usize> = conversations
        .iter()
        .flatten()
        .map(|u| u.gold_emotion)
        .collect();
    let pred: Vec<usize> = conversations
        .iter()
        .flatten()
        .map(|u| u.pred_emotion)
        .collect();
    let per_class = per_class_prf(&gold, &pred, labels);
    MetricReport {
        acc: accuracy(&gold, &pred),
        wf1: weighted_f1(&per_class),
        per_class,
        cause: cause_prf(conversations, neutral),
        pair: pair_prf(conversations, neutral, mode),
    }
}
