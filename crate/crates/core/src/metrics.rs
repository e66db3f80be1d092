//! Classification metrics for ordinal severity levels.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

/// `K x K` counts, rows are truth and columns predictions.
pub type Confusion = Vec<Vec<u64>>;

pub fn confusion_matrix(truth: &[usize], pred: &[usize], k: usize) -> Result<Confusion> {
    contract!(truth.len() == pred.len(), "truth has {} entries, predictions {}", truth.len(), pred.len());
    contract!(k >= 1, "need at least one class");
    let mut cm = vec![vec![0u64; k]; k];
    for (&t, &p) in truth.iter().zip(pred) {
        contract!(t < k && p < k, "class index out of range [0, {k}): truth {t}, prediction {p}");
        cm[t][p] += 1;
    }
    Ok(cm)
}

fn total(cm: &Confusion) -> u64 {
    cm.iter().flatten().sum()
}

fn check(cm: &Confusion) -> Result<usize> {
    let k = cm.len();
    contract!(k >= 1 && cm.iter().all(|r| r.len() == k), "confusion matrix must be square");
    contract!(total(cm) > 0, "empty confusion matrix");
    Ok(k)
}

pub fn accuracy(cm: &Confusion) -> Result<f64> {
    let k = check(cm)?;
    let diag: u64 = (0..k).map(|i| cm[i][i]).sum();
    Ok(diag as f64 / total(cm) as f64)
}

/// Per-class recall; `None` for classes without support.
pub fn per_class_recall(cm: &Confusion) -> Result<Vec<Option<f64>>> {
    let k = check(cm)?;
    Ok((0..k)
        .map(|i| {
            let row: u64 = cm[i].iter().sum();
            (row > 0).then(|| cm[i][i] as f64 / row as f64)
        })
        .collect())
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(cm: &Confusion) -> Result<f64> {
    let k = check(cm)?;
    let n = total(cm) as f64;
    let mut acc = 0.0;
    for i in 0..k {
        let support: u64 = cm[i].iter().sum();
        if support == 0 {
            continue;
        }
        let col: u64 = (0..k).map(|r| cm[r][i]).sum();
        let tp = cm[i][i] as f64;
        let p = if col > 0 { tp / col as f64 } else { 0.0 };
        let r = tp / support as f64;
        let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        acc += support as f64 / n * f1;
    }
    Ok(acc)
}

/// Cohen's kappa with linear disagreement weights `|i - j| / (K - 1)`.
pub fn linear_kappa(cm: &Confusion) -> Result<f64> {
    let k = check(cm)?;
    if k == 1 {
        return Ok(1.0);
    }
    let n = total(cm) as f64;
    let rows: Vec<f64> = cm.iter().map(|r| r.iter().sum::<u64>() as f64 / n).collect();
    let cols: Vec<f64> = (0..k).map(|j| (0..k).map(|i| cm[i][j]).sum::<u64>() as f64 / n).collect();
    let (mut obs, mut exp) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let w = i.abs_diff(j) as f64 / (k - 1) as f64;
            obs += w * cm[i][j] as f64 / n;
            exp += w * rows[i] * cols[j];
        }
    }
    if exp == 0.0 {
        contract!(obs == 0.0, "kappa undefined: no expected disagreement but observed {obs}");
        return Ok(1.0);
    }
    Ok(1.0 - obs / exp)
}

/// Average ranks (1-based) with ties sharing their mean rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            ranks[p] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Area under the ROC curve of `scores` for binary `positive` labels via
/// the rank-sum statistic (ties count one half). `None` without both
/// positives and negatives.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let p = positive.iter().filter(|&&b| b).count();
    let n = positive.len() - p;
    if p == 0 || n == 0 {
        return None;
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &b)| b).map(|(r, _)| r).sum();
    Some((rank_sum - (p * (p + 1)) as f64 / 2.0) / (p * n) as f64)
}

fn check_probs(scores: &[Vec<f64>], truth: &[usize]) -> Result<usize> {
    contract!(scores.len() == truth.len(), "one score row per sample");
    contract!(!scores.is_empty(), "no samples");
    let k = scores[0].len();
    for row in scores {
        contract!(row.len() == k, "ragged score rows");
        let s: f64 = row.iter().sum();
        contract!((s - 1.0).abs() <= 1e-6, "score rows must sum to 1, got {s}");
    }
    contract!(truth.iter().all(|&t| t < k), "truth class out of range");
    Ok(k)
}

/// One-vs-rest AUC per class.
pub fn roc_auc_ovr(scores: &[Vec<f64>], truth: &[usize]) -> Result<Vec<Option<f64>>> {
    let k = check_probs(scores, truth)?;
    Ok((0..k)
        .map(|c| {
            let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
            let pos: Vec<bool> = truth.iter().map(|&t| t == c).collect();
            binary_auc(&s, &pos)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

/// ROC points for class `c` at every distinct score, by decreasing
/// threshold, starting from `(+inf, 0, 0)`.
pub fn roc_curve(scores: &[Vec<f64>], truth: &[usize], c: usize) -> Result<Vec<RocPoint>> {
    let k = check_probs(scores, truth)?;
    contract!(c < k, "class {c} out of range");
    let p = truth.iter().filter(|&&t| t == c).count() as f64;
    let n = truth.len() as f64 - p;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b][c].total_cmp(&scores[a][c]));
    let rate = |x: f64, d: f64| if d > 0.0 { x / d } else { 0.0 };
    let mut pts = vec![RocPoint {
        threshold: f64::INFINITY,
        tpr: 0.0,
        fpr: 0.0,
    }];
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let th = scores[idx[i]][c];
        while i < idx.len() && scores[idx[i]][c] == th {
            if truth[idx[i]] == c {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        pts.push(RocPoint {
            threshold: th,
            tpr: rate(tp, p),
            fpr: rate(fp, n),
        });
    }
    Ok(pts)
}

/// Everything reported for one evaluated split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_samples: usize,
    pub confusion: Confusion,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub kappa_linear: f64,
    /// `None` where a class has no support.
    pub recall: Vec<Option<f64>>,
    /// `None` where a class has no positives or no negatives.
    pub auc: Vec<Option<f64>>,
    pub counts: Vec<u64>,
    /// Accuracy after majority vote over each patient's clips.
    pub patient_accuracy: Option<f64>,
}

impl EvalReport {
    /// `probs` are per-sample class probabilities; predictions are their
    /// argmax. `patients` enables the patient-level vote.
    pub fn compute(truth: &[usize], probs: &[Vec<f64>], patients: Option<&[String]>) -> Result<Self> {
        let k = check_probs(probs, truth)?;
        let pred: Vec<usize> = probs.iter().map(|p| crate::model::argmax(p)).collect();
        let cm = confusion_matrix(truth, &pred, k)?;
        let patient_accuracy = match patients {
            Some(ids) => Some(patient_vote_accuracy(truth, &pred, ids, k)?),
            None => None,
        };
        Ok(EvalReport {
            num_samples: truth.len(),
            accuracy: accuracy(&cm)?,
            weighted_f1: weighted_f1(&cm)?,
            kappa_linear: linear_kappa(&cm)?,
            recall: per_class_recall(&cm)?,
            auc: roc_auc_ovr(probs, truth)?,
            counts: cm.iter().map(|r| r.iter().sum()).collect(),
            confusion: cm,
            patient_accuracy,
        })
    }
}

/// Majority vote of clip predictions per patient (lowest class wins ties)
/// compared with the patient's majority truth label.
pub fn patient_vote_accuracy(truth: &[usize], pred: &[usize], patients: &[String], k: usize) -> Result<f64> {
    contract!(patients.len() == truth.len(), "one patient id per sample");
    let mut votes: std::collections::BTreeMap<&str, (Vec<u64>, Vec<u64>)> = Default::default();
    for ((&t, &p), id) in truth.iter().zip(pred).zip(patients) {
        let e = votes.entry(id).or_insert_with(|| (vec![0; k], vec![0; k]));
        e.0[t] += 1;
        e.1[p] += 1;
    }
    let top = |v: &[u64]| {
        let mut best = 0;
        for (i, &c) in v.iter().enumerate() {
            if c > v[best] {
                best = i;
            }
        }
        best
    };
    let hits = votes.values().filter(|(t, p)| top(t) == top(p)).count();
    Ok(hits as f64 / votes.len() as f64)
}
