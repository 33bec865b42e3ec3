//! Internal-knowledge utilization from logit-lens layer statistics.
//!
//! The processing rate of a token is
//!
//! ```text
//!        Σ_{l=1}^{L-1} (1 − min(p_l / p_top1, 1)) · l
//! R  =  ───────────────────────────────────────────
//!              Σ_{l=1}^{L-1} l / max(H_l, floor)
//! ```
//!
//! where `p_l` is the probability layer `l` assigns to the final top-1 token
//! and `H_l` the layer's entropy in nats. The calibrated score scales `R` by
//! `gen_prob / top1_prob`.

use thiserror::Error;

use crate::trace::TokenTrace;

/// Lower clamp on layer entropies, in nats.
pub const DEFAULT_ENTROPY_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InternalError {
    #[error("token has no layer statistics")]
    EmptyLayers,
    #[error("non-finite or out-of-range input `{0}`")]
    InvalidInput(&'static str),
    #[error("entropy floor must be positive and finite, got {0}")]
    InvalidFloor(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProcessingRate {
    pub rate: f64,
    pub numerator: f64,
    pub denominator: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InternalScore {
    /// Uncalibrated processing rate.
    pub rate: f64,
    /// `gen_prob / top1_prob × rate`.
    pub calibrated: f64,
    pub numerator: f64,
    pub denominator: f64,
}

pub fn processing_rate(token: &TokenTrace, entropy_floor: f64) -> Result<ProcessingRate, InternalError> {
    if !(entropy_floor.is_finite() && entropy_floor > 0.0) {
        return Err(InternalError::InvalidFloor(entropy_floor));
    }
    if token.layers.is_empty() {
        return Err(InternalError::EmptyLayers);
    }
    let top1 = token.top1_prob;
    if !(top1.is_finite() && top1 > 0.0) {
        return Err(InternalError::InvalidInput("top1_prob"));
    }

    let mut numerator = 0.0;
    let mut denominator = 0.0;
    for (pos, layer) in token.layers.iter().enumerate() {
        if !layer.prob_top1.is_finite() || layer.prob_top1 < 0.0 {
            return Err(InternalError::InvalidInput("prob_top1"));
        }
        if !layer.entropy.is_finite() || layer.entropy < 0.0 {
            return Err(InternalError::InvalidInput("entropy"));
        }
        let depth = (pos + 1) as f64;
        let converged = (layer.prob_top1 / top1).min(1.0);
        numerator += (1.0 - converged) * depth;
        denominator += depth / layer.entropy.max(entropy_floor);
    }
    Ok(ProcessingRate {
        rate: numerator / denominator,
        numerator,
        denominator,
    })
}

pub fn internal_score(token: &TokenTrace, entropy_floor: f64) -> Result<InternalScore, InternalError> {
    let ProcessingRate {
        rate,
        numerator,
        denominator,
    } = processing_rate(token, entropy_floor)?;
    if !(token.gen_prob.is_finite() && (0.0..=token.top1_prob).contains(&token.gen_prob)) {
        return Err(InternalError::InvalidInput("gen_prob"));
    }
    let calibrated = if token.token_id == token.top1_id {
        rate
    } else {
        token.gen_prob / token.top1_prob * rate
    };
    Ok(InternalScore {
        rate,
        calibrated,
        numerator,
        denominator,
    })
}
