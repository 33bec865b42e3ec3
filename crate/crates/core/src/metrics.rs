//! Detection metrics over `(score, label)` pairs.
//!
//! Polarity: a higher score means "more likely hallucinated" and a `true`
//! label means hallucinated. Ties are handled deterministically: AUROC
//! counts a tied positive/negative pair as ½, and average precision and the
//! F1 sweep treat equal scores as a single threshold.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("scores and labels have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no samples")]
    Empty,
    #[error("only one class present")]
    SingleClass,
    #[error("no positive labels")]
    NoPositives,
    #[error("zero variance")]
    ZeroVariance,
    #[error("non-finite score")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OptimalF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalResult {
    pub auroc: f64,
    pub auprc: f64,
    pub pcc: f64,
    pub prec_opt: f64,
    pub recall_opt: f64,
    pub f1_opt: f64,
    pub threshold_opt: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    Ok((n_pos, labels.len() - n_pos))
}

/// Groups of equal scores in descending order, as (positives, total) counts
/// paired with the group's score.
fn descending_groups(scores: &[f64], labels: &[bool]) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for i in order {
        let pos = labels[i] as usize;
        match groups.last_mut() {
            Some(g) if g.0 == scores[i] => {
                g.1 += pos;
                g.2 += 1;
            }
            _ => groups.push((scores[i], pos, 1)),
        }
    }
    groups
}

/// Mann–Whitney AUROC.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    let (n_pos, n_neg) = check(scores, labels)?;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass);
    }
    // Twice the U statistic, kept integral: each positive beats every
    // negative in a lower group (2 each) and ties with those in its own (1).
    let mut twice_u: u128 = 0;
    let mut neg_below = n_neg as u128;
    for (_, pos, total) in descending_groups(scores, labels) {
        let neg = (total - pos) as u128;
        neg_below -= neg;
        twice_u += pos as u128 * (2 * neg_below + neg);
    }
    Ok(twice_u as f64 / (2 * n_pos as u128 * n_neg as u128) as f64)
}

/// Average precision.
pub fn auprc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    let (n_pos, _) = check(scores, labels)?;
    if n_pos == 0 {
        return Err(MetricError::NoPositives);
    }
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut sum = 0.0;
    for (_, pos, total) in descending_groups(scores, labels) {
        tp += pos;
        seen += total;
        if pos > 0 {
            sum += pos as f64 * (tp as f64 / seen as f64);
        }
    }
    Ok(sum / n_pos as f64)
}

/// Pearson correlation with labels coded as 0/1 (point-biserial).
pub fn pearson(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    check(scores, labels)?;
    let n = scores.len() as f64;
    let y: Vec<f64> = labels.iter().map(|&l| l as u8 as f64).collect();
    let mx = scores.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in scores.iter().zip(&y) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Best F1 over thresholds at each distinct score, predicting positive when
/// `score >= threshold`. Ties go to higher precision, then lower threshold.
/// Precision and F1 are computed as `tp/(tp+fp)` and `2tp/(2tp+fp+fn)` so
/// equal ratios compare equal.
pub fn optimal_f1(scores: &[f64], labels: &[bool]) -> Result<OptimalF1, MetricError> {
    let (n_pos, _) = check(scores, labels)?;
    if n_pos == 0 {
        return Err(MetricError::NoPositives);
    }
    let (mut tp, mut predicted) = (0usize, 0usize);
    let mut best: Option<OptimalF1> = None;
    for (score, pos, total) in descending_groups(scores, labels) {
        tp += pos;
        predicted += total;
        let fp = predicted - tp;
        let fn_ = n_pos - tp;
        let cand = OptimalF1 {
            precision: tp as f64 / predicted as f64,
            recall: tp as f64 / n_pos as f64,
            f1: (2 * tp) as f64 / (2 * tp + fp + fn_) as f64,
            threshold: score,
        };
        // Thresholds arrive in descending order, so a full tie on F1 and
        // precision favours the later (lower) one.
        let better = match best {
            None => true,
            Some(b) => cand.f1 > b.f1 || (cand.f1 == b.f1 && cand.precision >= b.precision),
        };
        if better {
            best = Some(cand);
        }
    }
    Ok(best.expect("at least one group"))
}

/// All metrics at once. Requires both classes.
pub fn evaluate(scores: &[f64], labels: &[bool]) -> Result<EvalResult, MetricError> {
    let (n_pos, n_neg) = check(scores, labels)?;
    let opt = optimal_f1(scores, labels)?;
    Ok(EvalResult {
        auroc: auroc(scores, labels)?,
        auprc: auprc(scores, labels)?,
        pcc: pearson(scores, labels)?,
        prec_opt: opt.precision,
        recall_opt: opt.recall,
        f1_opt: opt.f1,
        threshold_opt: opt.threshold,
        n_pos,
        n_neg,
    })
}
