//! Kernels on embedding vectors and the weighted squared-MMD estimator.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::embedding::EmbeddingTable;
use crate::trace::{TokenId, TopKDist};

/// Pre-clamp MMD values below this are treated as a kernel or data defect.
pub const NEGATIVE_MMD_LIMIT: f64 = -1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum KernelSpec {
    /// `½(1 + cos∠(u, v))`.
    #[default]
    Cosine,
    /// `exp(-‖u − v‖² / 2σ²)`.
    Rbf { sigma: f64 },
}

impl KernelSpec {
    pub fn rbf(sigma: f64) -> Result<Self, KernelError> {
        if sigma.is_finite() && sigma > 0.0 {
            Ok(KernelSpec::Rbf { sigma })
        } else {
            Err(KernelError::InvalidSigma(sigma))
        }
    }

    /// The kernel set swept by the kernel ablation.
    pub fn ablation_set() -> Vec<KernelSpec> {
        let mut v = vec![KernelSpec::Cosine];
        v.extend([0.5, 0.7, 1.0, 2.0, 3.0].map(|sigma| KernelSpec::Rbf { sigma }));
        v
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelSpec::Cosine => f.write_str("cosine"),
            KernelSpec::Rbf { sigma } => write!(f, "rbf_{sigma}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error("cosine kernel is undefined for a zero-norm vector")]
    ZeroNorm,
    #[error("vector dimensions differ ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("rbf sigma must be positive and finite, got {0}")]
    InvalidSigma(f64),
    #[error("support is empty")]
    EmptySupport,
    #[error("support columns have different lengths")]
    LengthMismatch,
    #[error("weight {0} is negative or non-finite")]
    InvalidWeight(f64),
    #[error("token {0} appears twice in one support")]
    DuplicateId(TokenId),
    #[error("token {0} has different vectors in the two supports")]
    InconsistentVector(TokenId),
    #[error("no embedding for token {0}")]
    MissingEmbedding(TokenId),
    #[error("squared MMD {0} is negative beyond rounding; kernel is not PSD or inputs are corrupt")]
    NotPositiveSemidefinite(f64),
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

fn cosine_from_parts(dot_uv: f64, norm_u: f64, norm_v: f64) -> f64 {
    let cos = (dot_uv / (norm_u * norm_v)).clamp(-1.0, 1.0);
    0.5 * (1.0 + cos)
}

fn rbf(sigma: f64, u: &[f64], v: &[f64]) -> f64 {
    let sq: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
    (-sq / (2.0 * sigma * sigma)).exp()
}

/// Evaluates the kernel on two vectors.
pub fn kernel_eval(spec: KernelSpec, u: &[f64], v: &[f64]) -> Result<f64, KernelError> {
    if u.len() != v.len() {
        return Err(KernelError::DimensionMismatch(u.len(), v.len()));
    }
    match spec {
        KernelSpec::Cosine => {
            let (nu, nv) = (norm(u), norm(v));
            if nu == 0.0 || nv == 0.0 {
                return Err(KernelError::ZeroNorm);
            }
            Ok(cosine_from_parts(dot(u, v), nu, nv))
        }
        KernelSpec::Rbf { sigma } => {
            if !(sigma.is_finite() && sigma > 0.0) {
                return Err(KernelError::InvalidSigma(sigma));
            }
            Ok(rbf(sigma, u, v))
        }
    }
}

/// A finite distribution over embedding vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSupport<'a> {
    ids: Vec<TokenId>,
    weights: Vec<f64>,
    vectors: Vec<&'a [f64]>,
}

impl<'a> WeightedSupport<'a> {
    pub fn new(ids: Vec<TokenId>, weights: Vec<f64>, vectors: Vec<&'a [f64]>) -> Result<Self, KernelError> {
        if ids.len() != weights.len() || ids.len() != vectors.len() {
            return Err(KernelError::LengthMismatch);
        }
        if ids.is_empty() {
            return Err(KernelError::EmptySupport);
        }
        if let Some(&w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(KernelError::InvalidWeight(w));
        }
        Ok(WeightedSupport { ids, weights, vectors })
    }

    /// Looks up every token of `dist` in `table`. With `renormalize`, the
    /// weights are divided by the distribution's mass so they sum to one;
    /// otherwise the raw truncated probabilities are used.
    pub fn from_dist(dist: &TopKDist, table: &'a EmbeddingTable, renormalize: bool) -> Result<Self, KernelError> {
        let mass = dist.mass();
        let scale = if renormalize { mass } else { 1.0 };
        let mut ids = Vec::with_capacity(dist.len());
        let mut weights = Vec::with_capacity(dist.len());
        let mut vectors = Vec::with_capacity(dist.len());
        for &(id, p) in dist.entries() {
            let v = table.get(id).ok_or(KernelError::MissingEmbedding(id))?;
            ids.push(id);
            weights.push(p / scale);
            vectors.push(v);
        }
        WeightedSupport::new(ids, weights, vectors)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn vectors(&self) -> &[&'a [f64]] {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

struct UnionPoint<'a> {
    diff: f64,
    vector: &'a [f64],
    norm: f64,
}

/// Squared MMD before clamping.
///
/// The two supports are merged on token id (ascending) into one point set
/// with signed weights `p − q`, and the kernel matrix on that set is
/// evaluated once: `Σᵢⱼ (pᵢ−qᵢ)(pⱼ−qⱼ) k(i, j)`, which expands to the three
/// double sums `PPk + QQk − 2·PQk`. Diagonal terms are added first, then
/// `2·` each upper-triangle term in row-major order, so swapping `p` and `q`
/// yields a bit-identical result.
pub fn mmd_squared_raw(spec: KernelSpec, p: &WeightedSupport<'_>, q: &WeightedSupport<'_>) -> Result<f64, KernelError> {
    if p.is_empty() || q.is_empty() {
        return Err(KernelError::EmptySupport);
    }
    if let KernelSpec::Rbf { sigma } = spec {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(KernelError::InvalidSigma(sigma));
        }
    }

    // id -> (weight in p, weight in q, vector)
    type Slot<'v> = (Option<f64>, Option<f64>, &'v [f64]);
    let mut merged: BTreeMap<TokenId, Slot<'_>> = BTreeMap::new();
    for (side, support) in [(0, p), (1, q)] {
        for ((&id, &w), &v) in support.ids.iter().zip(&support.weights).zip(&support.vectors) {
            let slot = merged.entry(id).or_insert((None, None, v));
            if slot.2 != v {
                return Err(KernelError::InconsistentVector(id));
            }
            let target = if side == 0 { &mut slot.0 } else { &mut slot.1 };
            if target.replace(w).is_some() {
                return Err(KernelError::DuplicateId(id));
            }
        }
    }

    let dim = merged.values().next().map(|e| e.2.len()).unwrap_or(0);
    let mut points = Vec::with_capacity(merged.len());
    for (pw, qw, vector) in merged.into_values() {
        if vector.len() != dim {
            return Err(KernelError::DimensionMismatch(dim, vector.len()));
        }
        let n = norm(vector);
        if spec == KernelSpec::Cosine && n == 0.0 {
            return Err(KernelError::ZeroNorm);
        }
        points.push(UnionPoint {
            diff: pw.unwrap_or(0.0) - qw.unwrap_or(0.0),
            vector,
            norm: n,
        });
    }

    let k = |a: &UnionPoint<'_>, b: &UnionPoint<'_>| match spec {
        KernelSpec::Cosine => cosine_from_parts(dot(a.vector, b.vector), a.norm, b.norm),
        KernelSpec::Rbf { sigma } => rbf(sigma, a.vector, b.vector),
    };

    let mut diag = 0.0;
    for a in &points {
        if a.diff != 0.0 {
            diag += a.diff * a.diff * k(a, a);
        }
    }
    let mut off = 0.0;
    for (i, a) in points.iter().enumerate() {
        if a.diff == 0.0 {
            continue;
        }
        for b in &points[i + 1..] {
            if b.diff != 0.0 {
                off += a.diff * b.diff * k(a, b);
            }
        }
    }
    Ok(diag + 2.0 * off)
}

/// Squared MMD between two weighted supports, clamped at zero.
///
/// Values in `[NEGATIVE_MMD_LIMIT, 0)` are rounding noise and clamp to 0;
/// anything lower is reported as [`KernelError::NotPositiveSemidefinite`].
pub fn mmd_squared(spec: KernelSpec, p: &WeightedSupport<'_>, q: &WeightedSupport<'_>) -> Result<f64, KernelError> {
    clamp_mmd(mmd_squared_raw(spec, p, q)?)
}

fn clamp_mmd(raw: f64) -> Result<f64, KernelError> {
    if raw < NEGATIVE_MMD_LIMIT {
        return Err(KernelError::NotPositiveSemidefinite(raw));
    }
    Ok(raw.max(0.0))
}
