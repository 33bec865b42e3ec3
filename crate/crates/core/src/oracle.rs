//! Brute-force reference computations.
//!
//! Each function re-derives a quantity by direct enumeration, sharing no
//! code with the engine modules, so the two can be cross-checked.

use crate::kernels::KernelSpec;
use crate::metrics::EvalResult;
use crate::trace::TokenTrace;

fn oracle_kernel(spec: KernelSpec, u: &[f64], v: &[f64]) -> Result<f64, &'static str> {
    match spec {
        KernelSpec::Cosine => {
            let mut uv = 0.0;
            let mut uu = 0.0;
            let mut vv = 0.0;
            for i in 0..u.len() {
                uv += u[i] * v[i];
                uu += u[i] * u[i];
                vv += v[i] * v[i];
            }
            if uu == 0.0 || vv == 0.0 {
                return Err("zero-norm vector");
            }
            Ok((1.0 + uv / (uu.sqrt() * vv.sqrt())) / 2.0)
        }
        KernelSpec::Rbf { sigma } => {
            let mut d2 = 0.0;
            for i in 0..u.len() {
                d2 += (u[i] - v[i]).powi(2);
            }
            Ok((-d2 / (2.0 * sigma * sigma)).exp())
        }
    }
}

/// Squared MMD as the three double sums over the raw points of each side.
pub fn oracle_mmd(spec: KernelSpec, p: &[(&[f64], f64)], q: &[(&[f64], f64)]) -> Result<f64, &'static str> {
    if p.is_empty() || q.is_empty() {
        return Err("empty support");
    }
    let mut pp = 0.0;
    for &(u, wu) in p {
        for &(v, wv) in p {
            pp += wu * wv * oracle_kernel(spec, u, v)?;
        }
    }
    let mut qq = 0.0;
    for &(u, wu) in q {
        for &(v, wv) in q {
            qq += wu * wv * oracle_kernel(spec, u, v)?;
        }
    }
    let mut pq = 0.0;
    for &(u, wu) in p {
        for &(v, wv) in q {
            pq += wu * wv * oracle_kernel(spec, u, v)?;
        }
    }
    Ok(pp + qq - 2.0 * pq)
}

/// Processing rate by direct summation over the stored layers.
pub fn oracle_rate(token: &TokenTrace, floor: f64) -> Result<f64, &'static str> {
    if token.layers.is_empty() {
        return Err("no layers");
    }
    let mut num = 0.0;
    for layer in &token.layers {
        let ratio = layer.prob_top1 / token.top1_prob;
        let capped = if ratio < 1.0 { ratio } else { 1.0 };
        num += (1.0 - capped) * layer.layer_index as f64;
    }
    let mut den = 0.0;
    for layer in &token.layers {
        let h = if layer.entropy > floor { layer.entropy } else { floor };
        den += layer.layer_index as f64 / h;
    }
    Ok(num / den)
}

/// All detection metrics by exhaustive enumeration: AUROC over every
/// positive/negative pair, precision at every positive, F1 at every
/// distinct threshold.
pub fn oracle_metrics(scores: &[f64], labels: &[bool]) -> Result<EvalResult, &'static str> {
    let n = scores.len();
    if n != labels.len() || n == 0 {
        return Err("bad lengths");
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err("single class");
    }

    let mut twice_wins = 0u64;
    for i in 0..n {
        for j in 0..n {
            if labels[i] && !labels[j] {
                if scores[i] > scores[j] {
                    twice_wins += 2;
                } else if scores[i] == scores[j] {
                    twice_wins += 1;
                }
            }
        }
    }
    let auroc = twice_wins as f64 / (2 * n_pos * n_neg) as f64;

    let mut ap = 0.0;
    for i in (0..n).filter(|&i| labels[i]) {
        let at_or_above = (0..n).filter(|&j| scores[j] >= scores[i]).count();
        let pos_at_or_above = (0..n).filter(|&j| labels[j] && scores[j] >= scores[i]).count();
        ap += pos_at_or_above as f64 / at_or_above as f64;
    }
    let auprc = ap / n_pos as f64;

    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        let x = scores[i];
        let y = if labels[i] { 1.0 } else { 0.0 };
        sx += x;
        sy += y;
        sxx += x * x;
        syy += y * y;
        sxy += x * y;
    }
    let nf = n as f64;
    let pcc = (nf * sxy - sx * sy) / ((nf * sxx - sx * sx).sqrt() * (nf * syy - sy * sy).sqrt());

    // (f1, precision, -threshold) maximized lexicographically.
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for &t in scores {
        let tp = (0..n).filter(|&j| labels[j] && scores[j] >= t).count();
        let fp = (0..n).filter(|&j| !labels[j] && scores[j] >= t).count();
        let fn_ = n_pos - tp;
        let prec = tp as f64 / (tp + fp) as f64;
        let f1 = (2 * tp) as f64 / (2 * tp + fp + fn_) as f64;
        let rec = tp as f64 / n_pos as f64;
        let better = match best {
            None => true,
            Some((bf, bp, _, bt)) => f1 > bf || (f1 == bf && (prec > bp || (prec == bp && t < bt))),
        };
        if better {
            best = Some((f1, prec, rec, t));
        }
    }
    let (f1_opt, prec_opt, recall_opt, threshold_opt) = best.expect("nonempty");

    Ok(EvalResult {
        auroc,
        auprc,
        pcc,
        prec_opt,
        recall_opt,
        f1_opt,
        threshold_opt,
        n_pos,
        n_neg,
    })
}
