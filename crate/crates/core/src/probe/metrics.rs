use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::ridge::{balanced_targets, empirical_distribution};
use super::{Hard, Task};
use crate::error::{Error, Result};
use crate::store::Labels;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub loss: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    ratio(2 * tp, 2 * tp + fp + fn_)
}

/// Loss, micro/macro F1, accuracy and per-class counts.
///
/// Scores are probabilities for the multiclass and multilabel tasks and raw
/// outputs for the quadratic task. For multilabel, accuracy is exact-match
/// over label sets. `prior` sets the balanced targets of the quadratic loss
/// and defaults to the empirical distribution of `labels`.
pub fn metrics(
    scores: &DMatrix<f64>,
    hard: &Hard,
    labels: &Labels,
    task: Task,
    prior: Option<&[f64]>,
) -> Result<EvalReport> {
    task.check_labels(labels)?;
    let (n, classes) = scores.shape();
    if hard.len() != n || labels.len() != n {
        return Err(Error::Shape(format!(
            "{n} score rows, {} hard rows, {} labels",
            hard.len(),
            labels.len()
        )));
    }
    if labels.max_index().is_some_and(|m| m >= classes) {
        return Err(Error::Shape("label index exceeds score columns".into()));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    let mut support = vec![0usize; classes];
    let mut correct = 0usize;
    let mut loss = 0.0;

    match (hard, labels) {
        (Hard::Classes(pred), Labels::Single(truth)) => {
            for i in 0..n {
                let (p, t) = (pred[i], truth[i]);
                support[t] += 1;
                if p == t {
                    tp[t] += 1;
                    correct += 1;
                } else {
                    fp[p] += 1;
                    fn_[t] += 1;
                }
            }
            loss = match task {
                Task::Multiclass => {
                    truth
                        .iter()
                        .enumerate()
                        .map(|(i, &t)| -scores[(i, t)].max(f64::MIN_POSITIVE).ln())
                        .sum::<f64>()
                        / n.max(1) as f64
                }
                _ => {
                    let owned;
                    let prior = match prior {
                        Some(p) => p,
                        None => {
                            owned = empirical_distribution(truth, classes);
                            &owned
                        }
                    };
                    let t = balanced_targets(truth, prior)?;
                    (scores - t).norm_squared() / n.max(1) as f64
                }
            };
        }
        (Hard::Labels(pred), Labels::Multi(truth)) => {
            for i in 0..n {
                let mut exact = true;
                for c in 0..classes {
                    let t = truth[i].binary_search(&c).is_ok();
                    let p = pred[i].get(c).copied().unwrap_or(false);
                    match (p, t) {
                        (true, true) => tp[c] += 1,
                        (true, false) => fp[c] += 1,
                        (false, true) => fn_[c] += 1,
                        (false, false) => {}
                    }
                    if t {
                        support[c] += 1;
                    }
                    exact &= p == t;
                    let s = scores[(i, c)].clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
                    loss -= if t { s.ln() } else { (1.0 - s).ln() };
                }
                correct += usize::from(exact);
            }
            loss /= (n * classes).max(1) as f64;
        }
        _ => {
            return Err(Error::Shape(
                "hard predictions do not match label shape".into(),
            ))
        }
    }

    let per_class: Vec<ClassMetrics> = (0..classes)
        .map(|c| ClassMetrics {
            precision: ratio(tp[c], tp[c] + fp[c]),
            recall: ratio(tp[c], tp[c] + fn_[c]),
            f1: f1(tp[c], fp[c], fn_[c]),
            support: support[c],
        })
        .collect();
    let micro_f1 = f1(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    let macro_f1 = if classes == 0 {
        0.0
    } else {
        per_class.iter().map(|m| m.f1).sum::<f64>() / classes as f64
    };
    Ok(EvalReport {
        loss,
        micro_f1,
        macro_f1,
        accuracy: ratio(correct, n),
        per_class,
    })
}

/// Fraction of agreeing hard decisions: per example for class predictions,
/// per (example, label) cell for multilabel predictions.
pub fn consistency(a: &Hard, b: &Hard) -> Result<f64> {
    match (a, b) {
        (Hard::Classes(x), Hard::Classes(y)) if x.len() == y.len() => Ok(ratio(
            x.iter().zip(y).filter(|(p, q)| p == q).count(),
            x.len(),
        )),
        (Hard::Labels(x), Hard::Labels(y)) if x.len() == y.len() => {
            let mut agree = 0;
            let mut cells = 0;
            for (rx, ry) in x.iter().zip(y) {
                if rx.len() != ry.len() {
                    return Err(Error::Shape("label rows differ in width".into()));
                }
                agree += rx.iter().zip(ry).filter(|(p, q)| p == q).count();
                cells += rx.len();
            }
            Ok(ratio(agree, cells))
        }
        _ => Err(Error::Shape("predictions differ in shape or task".into())),
    }
}
