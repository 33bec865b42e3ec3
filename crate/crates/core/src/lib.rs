//! Token-level hallucination scoring for retrieval-augmented generation.
//!
//! Each generated token is scored on two axes:
//!
//! * **external-context utilization**: the kernel MMD between the next-token
//!   distribution conditioned on the retrieved documents and the one
//!   conditioned on random documents ([`external`]);
//! * **internal-knowledge utilization**: a layer-wise information processing
//!   rate computed from logit-lens statistics ([`internal`]).
//!
//! The two are combined into token and response hallucination scores
//! ([`scoring`]), evaluated against labels ([`metrics`]) and validated with
//! one-tailed t-tests ([`stats`], [`hypotheses`]). Traces are produced by an
//! external extractor in the formats defined in [`trace`] and [`embedding`].

pub mod cli;
pub mod embedding;
pub mod error;
pub mod external;
pub mod fixtures;
pub mod hypotheses;
pub mod internal;
pub mod kernels;
pub mod metrics;
pub mod oracle;
pub mod scoring;
pub mod stats;
pub mod trace;

pub use embedding::{parse_embeddings, validate_coverage, write_embeddings, EmbeddingTable};
pub use error::ScoreError;
pub use external::{external_score, external_scores_response, ExternalOptions, ExternalScore};
pub use internal::{internal_score, processing_rate, InternalScore, ProcessingRate};
pub use kernels::{kernel_eval, mmd_squared, KernelSpec, WeightedSupport};
pub use metrics::{auprc, auroc, evaluate, optimal_f1, pearson, EvalResult, OptimalF1};
pub use scoring::{
    response_hallucination, score_corpus, score_response, token_hallucination, ScoreReport, ScoringConfig, TokenScore,
};
pub use stats::{paired_t_one_tailed, student_t_sf, welch_t_one_tailed, TTestResult};
pub use trace::{parse_traces, write_traces, Condition, LayerStat, ResponseTrace, Task, TokenId, TokenTrace, TopKDist};
