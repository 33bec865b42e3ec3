//! One-tailed two-sample and paired t-tests.
//!
//! All tests use the alternative `mean(a) > mean(b)`; the p-value is the
//! upper-tail Student-t probability of the statistic. The t distribution
//! survival function goes through the regularized incomplete beta function.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TTestResult {
    pub t_stat: f64,
    pub dof: f64,
    pub p_value: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub mean_a: f64,
    pub mean_b: f64,
}

impl TTestResult {
    /// `***`, `**`, `*` or empty for p below 0.001, 0.01 and 0.05.
    pub fn stars(&self) -> &'static str {
        significance_stars(self.p_value)
    }
}

pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TTestError {
    #[error("need at least 2 samples per group, got {0} and {1}")]
    TooFewSamples(usize, usize),
    #[error("samples contain non-finite values")]
    NonFinite,
    #[error("both samples are constant with equal means; t is undefined")]
    Degenerate,
    #[error("paired samples have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("paired differences have zero variance")]
    ZeroVarianceDifferences,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn check_samples(a: &[f64], b: &[f64]) -> Result<(), TTestError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(TTestError::TooFewSamples(a.len(), b.len()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(TTestError::NonFinite);
    }
    Ok(())
}

/// Result for two constant samples with different means: the statistic is
/// infinite and the tail probability is 0 or 1.
fn separated(a: &[f64], b: &[f64], ma: f64, mb: f64) -> Result<TTestResult, TTestError> {
    if ma == mb {
        return Err(TTestError::Degenerate);
    }
    let t = if ma > mb { f64::INFINITY } else { f64::NEG_INFINITY };
    Ok(TTestResult {
        t_stat: t,
        dof: (a.len() + b.len() - 2) as f64,
        p_value: student_t_sf(t, 1.0),
        n_a: a.len(),
        n_b: b.len(),
        mean_a: ma,
        mean_b: mb,
    })
}

/// Welch's unequal-variance t-test with Welch–Satterthwaite degrees of
/// freedom.
pub fn welch_t_one_tailed(a: &[f64], b: &[f64]) -> Result<TTestResult, TTestError> {
    check_samples(a, b)?;
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if se2 == 0.0 {
        return separated(a, b, ma, mb);
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    Ok(TTestResult {
        t_stat: t,
        dof,
        p_value: student_t_sf(t, dof),
        n_a: a.len(),
        n_b: b.len(),
        mean_a: ma,
        mean_b: mb,
    })
}

/// Student's t-test with pooled variance.
pub fn pooled_t_one_tailed(a: &[f64], b: &[f64]) -> Result<TTestResult, TTestError> {
    check_samples(a, b)?;
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let dof = na + nb - 2.0;
    let pooled = ((na - 1.0) * va + (nb - 1.0) * vb) / dof;
    if pooled == 0.0 {
        return separated(a, b, ma, mb);
    }
    let t = (ma - mb) / (pooled * (1.0 / na + 1.0 / nb)).sqrt();
    Ok(TTestResult {
        t_stat: t,
        dof,
        p_value: student_t_sf(t, dof),
        n_a: a.len(),
        n_b: b.len(),
        mean_a: ma,
        mean_b: mb,
    })
}

/// Paired t-test on the differences `a[i] − b[i]`, `n − 1` degrees of freedom.
pub fn paired_t_one_tailed(a: &[f64], b: &[f64]) -> Result<TTestResult, TTestError> {
    if a.len() != b.len() {
        return Err(TTestError::LengthMismatch(a.len(), b.len()));
    }
    check_samples(a, b)?;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (md, vd) = mean_var(&diffs);
    if vd == 0.0 {
        return Err(TTestError::ZeroVarianceDifferences);
    }
    let n = diffs.len() as f64;
    let t = md / (vd / n).sqrt();
    let dof = n - 1.0;
    Ok(TTestResult {
        t_stat: t,
        dof,
        p_value: student_t_sf(t, dof),
        n_a: a.len(),
        n_b: b.len(),
        mean_a: a.iter().sum::<f64>() / n,
        mean_b: b.iter().sum::<f64>() / n,
    })
}

/// Upper-tail probability `P(T > t)` of Student's t with `dof` degrees of
/// freedom. Returns NaN for NaN input or non-positive `dof`.
pub fn student_t_sf(t: f64, dof: f64) -> f64 {
    if t.is_nan() || dof.is_nan() || dof <= 0.0 {
        return f64::NAN;
    }
    if t == 0.0 {
        return 0.5;
    }
    let tail = if t.is_infinite() {
        0.0
    } else {
        // x = ν/(ν+t²) and 1−x = t²/(ν+t²), each formed directly.
        let t2 = t * t;
        let denom = dof + t2;
        0.5 * reg_inc_beta(0.5 * dof, 0.5, dof / denom, t2 / denom)
    };
    if t > 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

/// Regularized incomplete beta `I_x(a, b)`, with `y = 1 − x` supplied by the
/// caller to avoid cancellation.
pub fn reg_inc_beta(a: f64, b: f64, x: f64, y: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if y <= 0.0 {
        return 1.0;
    }
    let log_front = a * x.ln() + b * y.ln() - ln_beta(a, b);
    if x < (a + 1.0) / (a + b + 2.0) {
        log_front.exp() * beta_cf(a, b, x, y) / a
    } else {
        1.0 - log_front.exp() * beta_cf(b, a, y, x) / b
    }
}

/// Continued fraction for the incomplete beta, modified Lentz.
fn beta_cf(a: f64, b: f64, x: f64, _y: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..100_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection: Γ(x)Γ(1−x) = π / sin(πx).
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Stirling-series correction `ln Γ(x) − [(x−½)ln x − x + ½ln 2π]`, x ≥ 10.
fn stirling_correction(x: f64) -> f64 {
    const COEF: [f64; 8] = [
        1.0 / 12.0,
        -1.0 / 360.0,
        1.0 / 1260.0,
        -1.0 / 1680.0,
        1.0 / 1188.0,
        -691.0 / 360_360.0,
        1.0 / 156.0,
        -3617.0 / 122_400.0,
    ];
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut term = inv;
    let mut sum = 0.0;
    for c in COEF {
        sum += c * term;
        term *= inv2;
    }
    sum
}

/// `ln B(a, b)`. When the larger argument is big, `ln Γ(L) − ln Γ(L + s)` is
/// formed from the Stirling series directly instead of subtracting two large
/// log-gammas.
pub fn ln_beta(a: f64, b: f64) -> f64 {
    let (small, large) = if a < b { (a, b) } else { (b, a) };
    if large < 10.0 {
        return ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
    }
    let sum = large + small;
    let diff = -small * large.ln() - (sum - 0.5) * (small / large).ln_1p() + small + stirling_correction(large)
        - stirling_correction(sum);
    let small_part = if small < 10.0 {
        ln_gamma(small)
    } else {
        (small - 0.5) * small.ln() - small + 0.5 * (2.0 * std::f64::consts::PI).ln() + stirling_correction(small)
    };
    small_part + diff
}
