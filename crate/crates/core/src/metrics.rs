//! Classification metrics and the per-split report.

use serde::{Deserialize, Serialize};

use crate::error::MetricError;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn check_len(scores: usize, labels: usize) -> Result<(), MetricError> {
    if scores != labels {
        return Err(MetricError::LengthMismatch { scores, labels });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// No positive labels: F1 is reported as 0.
    pub no_positives: bool,
}

/// Precision, recall and F1 of `score ≥ threshold` predictions.
pub fn binary_scores(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ClassScores, MetricError> {
    check_len(scores.len(), labels.len())?;
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            (false, false) => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fnn);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(ClassScores {
        precision,
        recall,
        f1,
        no_positives: tp + fnn == 0,
    })
}

pub fn f1_binary(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64, MetricError> {
    Ok(binary_scores(scores, labels, threshold)?.f1)
}

/// Column `c` of a row-major `n × l` matrix.
fn column<T: Copy>(m: &[Vec<T>], c: usize) -> Vec<T> {
    m.iter().map(|r| r[c]).collect()
}

fn check_matrix(scores: &[Vec<f64>], labels: &[Vec<u8>]) -> Result<usize, MetricError> {
    check_len(scores.len(), labels.len())?;
    let l = scores.first().map_or(0, Vec::len);
    for (s, y) in scores.iter().zip(labels) {
        check_len(s.len(), l)?;
        check_len(y.len(), l)?;
    }
    Ok(l)
}

/// Per-class scores of an `n × L` problem.
pub fn per_class(scores: &[Vec<f64>], labels: &[Vec<u8>], threshold: f64) -> Result<Vec<ClassScores>, MetricError> {
    let l = check_matrix(scores, labels)?;
    (0..l)
        .map(|c| binary_scores(&column(scores, c), &column(labels, c), threshold))
        .collect()
}

/// Unweighted mean of per-class F1.
pub fn macro_f1(scores: &[Vec<f64>], labels: &[Vec<u8>], threshold: f64) -> Result<f64, MetricError> {
    let pc = per_class(scores, labels, threshold)?;
    if pc.is_empty() {
        return Err(MetricError::Undefined("macro-F1 needs at least one class"));
    }
    Ok(pc.iter().map(|c| c.f1).sum::<f64>() / pc.len() as f64)
}

/// Indices sorted by descending score; ties keep input order.
fn by_score_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    check_len(scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::Undefined("AUROC needs both classes"));
    }
    // Walk tie groups from the top, counting negatives ranked below each
    // positive.
    let idx = by_score_desc(scores);
    let mut negatives_above = 0usize;
    let mut concordant = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut p, mut n) = (0usize, 0usize);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] == 1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        let below = n_neg - negatives_above - n;
        concordant += p as f64 * (below as f64 + 0.5 * n as f64);
        negatives_above += n;
        i = j;
    }
    Ok(concordant / (n_pos as f64 * n_neg as f64))
}

/// Average precision: `Σ ΔRecall · Precision` over descending score
/// thresholds, equal scores forming one step.
pub fn aupr(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    check_len(scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    if n_pos == 0 {
        return Err(MetricError::Undefined("AUPR needs at least one positive"));
    }
    let idx = by_score_desc(scores);
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let mut p = 0;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            p += usize::from(labels[idx[j]] == 1);
            j += 1;
        }
        tp += p;
        seen += j - i;
        ap += (p as f64 / n_pos as f64) * (tp as f64 / seen as f64);
        i = j;
    }
    Ok(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Binary F1, or micro-F1 over all (episode, class) pairs for
    /// multi-label tasks.
    pub f1: f64,
    pub macro_f1: Option<f64>,
    /// Multi-label: mean over classes where the metric is defined.
    pub aupr: f64,
    pub auroc: f64,
    pub threshold: f64,
    pub n_examples: usize,
    pub per_class: Option<Vec<ClassScores>>,
}

impl EvalReport {
    /// Scores and labels are `n × L`; `L = 1` is the binary case.
    pub fn compute(scores: &[Vec<f64>], labels: &[Vec<u8>], threshold: f64) -> Result<Self, MetricError> {
        let l = check_matrix(scores, labels)?;
        if scores.is_empty() || l == 0 {
            return Err(MetricError::Undefined("empty evaluation set"));
        }
        if l == 1 {
            let (s, y) = (column(scores, 0), column(labels, 0));
            return Ok(Self {
                f1: f1_binary(&s, &y, threshold)?,
                macro_f1: None,
                aupr: aupr(&s, &y)?,
                auroc: auroc(&s, &y)?,
                threshold,
                n_examples: scores.len(),
                per_class: None,
            });
        }
        let flat_s: Vec<f64> = scores.iter().flatten().copied().collect();
        let flat_y: Vec<u8> = labels.iter().flatten().copied().collect();
        let mut pr = Vec::new();
        let mut roc = Vec::new();
        for c in 0..l {
            let (s, y) = (column(scores, c), column(labels, c));
            if let Ok(v) = aupr(&s, &y) {
                pr.push(v);
            }
            if let Ok(v) = auroc(&s, &y) {
                roc.push(v);
            }
        }
        let mean = |v: &[f64], what| {
            if v.is_empty() {
                Err(MetricError::Undefined(what))
            } else {
                Ok(v.iter().sum::<f64>() / v.len() as f64)
            }
        };
        Ok(Self {
            f1: f1_binary(&flat_s, &flat_y, threshold)?,
            macro_f1: Some(macro_f1(scores, labels, threshold)?),
            aupr: mean(&pr, "no class has a positive label")?,
            auroc: mean(&roc, "no class has both labels")?,
            threshold,
            n_examples: scores.len(),
            per_class: Some(per_class(scores, labels, threshold)?),
        })
    }

    /// One `key=value` line; floats are written in shortest round-trip form.
    pub fn to_kv_line(&self) -> String {
        let mut parts = vec![
            format!("n={}", self.n_examples),
            format!("threshold={:?}", self.threshold),
            format!("f1={:?}", self.f1),
        ];
        if let Some(m) = self.macro_f1 {
            parts.push(format!("macro_f1={m:?}"));
        }
        parts.push(format!("aupr={:?}", self.aupr));
        parts.push(format!("auroc={:?}", self.auroc));
        parts.join(" ")
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

/// Mean ± std of every headline metric across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub runs: usize,
    pub f1: Aggregate,
    pub macro_f1: Option<Aggregate>,
    pub aupr: Aggregate,
    pub auroc: Aggregate,
}

pub fn aggregate(reports: &[EvalReport]) -> Result<AggregateReport, MetricError> {
    if reports.is_empty() {
        return Err(MetricError::Undefined("no reports to aggregate"));
    }
    let agg = |f: &dyn Fn(&EvalReport) -> f64| {
        let (mean, std) = mean_std(&reports.iter().map(f).collect::<Vec<_>>());
        Aggregate { mean, std }
    };
    let macro_f1 = reports
        .iter()
        .all(|r| r.macro_f1.is_some())
        .then(|| agg(&|r| r.macro_f1.unwrap()));
    Ok(AggregateReport {
        runs: reports.len(),
        f1: agg(&|r| r.f1),
        macro_f1,
        aupr: agg(&|r| r.aupr),
        auroc: agg(&|r| r.auroc),
    })
}
