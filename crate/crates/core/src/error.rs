use thiserror::Error;

use crate::internal::InternalError;
use crate::kernels::KernelError;
use crate::trace::Condition;

/// Failure while scoring a response or token.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoreError {
    #[error("token {token}: no random-document distribution (dist_rand)")]
    MissingRandomDist { token: usize },
    #[error("response {response_id:?} has condition {found}, expected {expected}")]
    ConditionMismatch {
        response_id: String,
        expected: Condition,
        found: Condition,
    },
    #[error("token {token}: {source}")]
    Kernel {
        token: usize,
        #[source]
        source: KernelError,
    },
    #[error("token {token}: {source}")]
    Internal {
        token: usize,
        #[source]
        source: InternalError,
    },
    #[error("lambda {0} is outside [0, 1]")]
    LambdaOutOfRange(f64),
    #[error("no token scores to aggregate")]
    Empty,
}

impl ScoreError {
    /// Re-labels a per-token error with the token's position in its response.
    pub(crate) fn at_token(self, idx: usize) -> Self {
        match self {
            ScoreError::MissingRandomDist { .. } => ScoreError::MissingRandomDist { token: idx },
            ScoreError::Kernel { source, .. } => ScoreError::Kernel { token: idx, source },
            ScoreError::Internal { source, .. } => ScoreError::Internal { token: idx, source },
            other => other,
        }
    }
}
