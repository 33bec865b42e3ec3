//! Trace records: one generated response per JSONL line.
//!
//! A record carries, for every generated token, the final next-token
//! probabilities, the top-K distributions under the retrieved-document and
//! random-document conditions, and per-layer logit-lens statistics for
//! layers `1..L-1`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Opaque vocabulary index.
pub type TokenId = u32;

/// Default maximum length of a stored top-K distribution.
pub const DEFAULT_TOP_K: usize = 100;

/// Slack allowed on the total mass of a truncated distribution.
pub const MASS_TOLERANCE: f64 = 1e-6;

/// Logit-lens statistics of one intermediate layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerStat {
    /// 1-based layer index.
    pub layer_index: usize,
    /// Probability the layer's projection assigns to the final top-1 token.
    pub prob_top1: f64,
    /// Full-vocabulary entropy of the layer's projection, in nats.
    pub entropy: f64,
}

/// A truncated next-token distribution, sorted by descending probability.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKDist {
    entries: Vec<(TokenId, f64)>,
}

impl TopKDist {
    /// Builds a distribution, checking ordering, positivity, uniqueness and
    /// total mass. `max_len` bounds the number of entries.
    pub fn new(entries: Vec<(TokenId, f64)>, max_len: usize) -> Result<Self, InvariantViolation> {
        let dist = TopKDist { entries };
        dist.check(max_len, "dist")?;
        Ok(dist)
    }

    /// Builds a distribution without validation. Callers are expected to run
    /// [`ResponseTrace::validate`] before scoring.
    pub fn new_unchecked(entries: Vec<(TokenId, f64)>) -> Self {
        TopKDist { entries }
    }

    pub fn entries(&self) -> &[(TokenId, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.entries.iter().map(|&(id, _)| id)
    }

    /// Sum of the stored probabilities.
    pub fn mass(&self) -> f64 {
        self.entries.iter().map(|&(_, p)| p).sum()
    }

    /// Entropy in nats of the distribution renormalized to unit mass.
    pub fn renormalized_entropy(&self) -> f64 {
        let mass = self.mass();
        if mass <= 0.0 {
            return 0.0;
        }
        self.entries
            .iter()
            .map(|&(_, p)| {
                let q = p / mass;
                if q > 0.0 {
                    -q * q.ln()
                } else {
                    0.0
                }
            })
            .sum::<f64>()
            .max(0.0)
    }

    fn check(&self, max_len: usize, field: &str) -> Result<(), InvariantViolation> {
        let fail = |reason: String| Err(InvariantViolation::new(None, field, reason));
        if self.entries.is_empty() {
            return fail("distribution is empty".into());
        }
        if self.entries.len() > max_len {
            return fail(format!(
                "{} entries exceed the top-k limit of {max_len}",
                self.entries.len()
            ));
        }
        let mut seen = HashSet::with_capacity(self.entries.len());
        let mut prev = f64::INFINITY;
        for (pos, &(id, p)) in self.entries.iter().enumerate() {
            if !p.is_finite() || p <= 0.0 || p > 1.0 {
                return fail(format!("entry {pos} has probability {p}, expected (0, 1]"));
            }
            if p > prev {
                return fail(format!("entry {pos} breaks descending order ({p} > {prev})"));
            }
            if !seen.insert(id) {
                return fail(format!("token id {id} appears twice"));
            }
            prev = p;
        }
        let mass = self.mass();
        if mass > 1.0 + MASS_TOLERANCE {
            return fail(format!("total mass {mass} exceeds 1"));
        }
        Ok(())
    }
}

/// Evidence recorded for one generated token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTrace {
    /// The generated token.
    pub token_id: TokenId,
    /// Probability of the generated token under the retrieved documents.
    pub gen_prob: f64,
    /// The most probable next token.
    pub top1_id: TokenId,
    pub top1_prob: f64,
    /// Top-K distribution conditioned on the retrieved documents.
    pub dist_ctx: TopKDist,
    /// Top-K distribution conditioned on random documents, when extracted.
    pub dist_rand: Option<TopKDist>,
    /// Logit-lens statistics for layers `1..L-1`.
    pub layers: Vec<LayerStat>,
}

impl TokenTrace {
    /// Checks the token-level invariants against the model's layer count.
    pub fn validate(&self, layer_count: usize, max_top_k: usize) -> Result<(), InvariantViolation> {
        let fail = |field: &str, reason: String| Err(InvariantViolation::new(None, field, reason));

        if !self.top1_prob.is_finite() || self.top1_prob <= 0.0 || self.top1_prob > 1.0 {
            return fail("top1_prob", format!("{} is not in (0, 1]", self.top1_prob));
        }
        if !self.gen_prob.is_finite() || self.gen_prob < 0.0 {
            return fail("gen_prob", format!("{} is not in [0, 1]", self.gen_prob));
        }
        if self.gen_prob > self.top1_prob {
            return fail(
                "gen_prob",
                format!("{} exceeds top1_prob {}", self.gen_prob, self.top1_prob),
            );
        }
        if self.token_id == self.top1_id && self.gen_prob != self.top1_prob {
            return fail(
                "gen_prob",
                format!(
                    "generated token is the top-1 token but gen_prob {} != top1_prob {}",
                    self.gen_prob, self.top1_prob
                ),
            );
        }

        self.dist_ctx.check(max_top_k, "dist_ctx")?;
        let (first_id, first_prob) = self.dist_ctx.entries[0];
        if first_id != self.top1_id || first_prob != self.top1_prob {
            return fail(
                "dist_ctx",
                format!(
                    "first entry ({first_id}, {first_prob}) does not match top-1 ({}, {})",
                    self.top1_id, self.top1_prob
                ),
            );
        }
        if let Some(rand) = &self.dist_rand {
            rand.check(max_top_k, "dist_rand")?;
        }

        let expected = layer_count.saturating_sub(1);
        if self.layers.len() != expected {
            return fail(
                "layers",
                format!(
                    "expected {expected} layer stats for layer_count {layer_count}, found {}",
                    self.layers.len()
                ),
            );
        }
        for (pos, layer) in self.layers.iter().enumerate() {
            if layer.layer_index != pos + 1 {
                return fail(
                    "layers",
                    format!("layer at position {pos} has index {}", layer.layer_index),
                );
            }
            if !layer.prob_top1.is_finite() || !(0.0..=1.0).contains(&layer.prob_top1) {
                return fail(
                    "layers",
                    format!(
                        "layer {} prob_top1 {} is not in [0, 1]",
                        layer.layer_index, layer.prob_top1
                    ),
                );
            }
            if !layer.entropy.is_finite() || layer.entropy < 0.0 {
                return fail(
                    "layers",
                    format!(
                        "layer {} entropy {} is negative or non-finite",
                        layer.layer_index, layer.entropy
                    ),
                );
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Qa,
    Summarization,
    Data2text,
    Other,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Qa => "qa",
            Task::Summarization => "summarization",
            Task::Data2text => "data2text",
            Task::Other => "other",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    WithDocs,
    NoDocs,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::WithDocs => "with_docs",
            Condition::NoDocs => "no_docs",
        })
    }
}

/// One generated response with its per-token evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseTrace {
    pub response_id: String,
    pub model_name: String,
    pub task: Task,
    pub condition: Condition,
    /// `Some(true)` marks a hallucinated response.
    pub label: Option<bool>,
    /// Total number of model layers `L`.
    pub layer_count: usize,
    pub tokens: Vec<TokenTrace>,
    /// Free-form extractor metadata (prompt template, noise tag, seed).
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl ResponseTrace {
    pub fn validate(&self, max_top_k: usize) -> Result<(), InvariantViolation> {
        if self.layer_count < 2 {
            return Err(InvariantViolation::new(
                None,
                "layer_count",
                format!("{} is below the minimum of 2", self.layer_count),
            ));
        }
        if self.tokens.is_empty() {
            return Err(InvariantViolation::new(None, "tokens", "response has no tokens".into()));
        }
        for (idx, token) in self.tokens.iter().enumerate() {
            token
                .validate(self.layer_count, max_top_k)
                .map_err(|v| v.at_token(idx))?;
        }
        Ok(())
    }

    /// Value of the `noise_tag` metadata key, if it is a string.
    pub fn noise_tag(&self) -> Option<&str> {
        self.meta.get("noise_tag").and_then(|v| v.as_str())
    }

    /// Serializes to a single JSON line (without the trailing newline).
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&WireResponse::from(self)).expect("trace serialization cannot fail")
    }
}

/// A violated field-level invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvariantViolation {
    /// 0-based token index, when the violation is inside a token.
    pub token: Option<usize>,
    pub field: String,
    pub reason: String,
}

impl InvariantViolation {
    fn new(token: Option<usize>, field: &str, reason: String) -> Self {
        InvariantViolation {
            token,
            field: field.to_string(),
            reason,
        }
    }

    fn at_token(mut self, idx: usize) -> Self {
        self.token = Some(idx);
        self
    }
}

impl fmt::Display for InvariantViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(t) = self.token {
            write!(f, "token {t}: ")?;
        }
        write!(f, "invalid `{}`: {}", self.field, self.reason)
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: response {response_id:?}: {violation}")]
    Invariant {
        line: usize,
        response_id: String,
        violation: InvariantViolation,
    },
    #[error("line {line}: duplicate response_id {response_id:?} for condition {condition}")]
    DuplicateResponse {
        line: usize,
        response_id: String,
        condition: Condition,
    },
    #[error("read error: {0}")]
    Io(#[from] std::io::Error),
}

impl TraceError {
    /// 1-based line number the error refers to, if any.
    pub fn line(&self) -> Option<usize> {
        match self {
            TraceError::Malformed { line, .. }
            | TraceError::Invariant { line, .. }
            | TraceError::DuplicateResponse { line, .. } => Some(*line),
            TraceError::Io(_) => None,
        }
    }
}

/// Parses and validates a trace JSONL stream.
///
/// Blank lines are skipped. Distributions longer than `max_top_k` are
/// rejected. A response id may appear at most once per condition, so a
/// teacher-forced `with_docs`/`no_docs` pair can share an id.
pub fn parse_traces<R: BufRead>(reader: R, max_top_k: usize) -> Result<Vec<ResponseTrace>, TraceError> {
    let mut out = Vec::new();
    let mut seen: HashSet<(String, Condition)> = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let wire: WireResponse = serde_json::from_str(&line).map_err(|e| TraceError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        let resp = ResponseTrace::from(wire);
        resp.validate(max_top_k).map_err(|violation| TraceError::Invariant {
            line: line_no,
            response_id: resp.response_id.clone(),
            violation,
        })?;
        if !seen.insert((resp.response_id.clone(), resp.condition)) {
            return Err(TraceError::DuplicateResponse {
                line: line_no,
                response_id: resp.response_id,
                condition: resp.condition,
            });
        }
        out.push(resp);
    }
    Ok(out)
}

/// Writes responses as JSONL, one line each, LF-terminated.
pub fn write_traces<W: Write>(mut writer: W, traces: &[ResponseTrace]) -> std::io::Result<()> {
    for resp in traces {
        writer.write_all(resp.to_json_line().as_bytes())?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireResponse {
    response_id: String,
    model_name: String,
    task: Task,
    condition: Condition,
    label: Option<bool>,
    layer_count: usize,
    tokens: Vec<WireToken>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireToken {
    token_id: TokenId,
    gen_prob: f64,
    top1_id: TokenId,
    top1_prob: f64,
    dist_ctx: Vec<(TokenId, f64)>,
    dist_rand: Option<Vec<(TokenId, f64)>>,
    layers: Vec<(f64, f64)>,
}

impl From<WireResponse> for ResponseTrace {
    fn from(w: WireResponse) -> Self {
        let tokens = w
            .tokens
            .into_iter()
            .map(|t| TokenTrace {
                token_id: t.token_id,
                gen_prob: t.gen_prob,
                top1_id: t.top1_id,
                top1_prob: t.top1_prob,
                dist_ctx: TopKDist::new_unchecked(t.dist_ctx),
                dist_rand: t.dist_rand.map(TopKDist::new_unchecked),
                layers: t
                    .layers
                    .into_iter()
                    .enumerate()
                    .map(|(i, (prob_top1, entropy))| LayerStat {
                        layer_index: i + 1,
                        prob_top1,
                        entropy,
                    })
                    .collect(),
            })
            .collect();
        ResponseTrace {
            response_id: w.response_id,
            model_name: w.model_name,
            task: w.task,
            condition: w.condition,
            label: w.label,
            layer_count: w.layer_count,
            tokens,
            meta: w.meta,
        }
    }
}

impl From<&ResponseTrace> for WireResponse {
    fn from(r: &ResponseTrace) -> Self {
        WireResponse {
            response_id: r.response_id.clone(),
            model_name: r.model_name.clone(),
            task: r.task,
            condition: r.condition,
            label: r.label,
            layer_count: r.layer_count,
            tokens: r
                .tokens
                .iter()
                .map(|t| WireToken {
                    token_id: t.token_id,
                    gen_prob: t.gen_prob,
                    top1_id: t.top1_id,
                    top1_prob: t.top1_prob,
                    dist_ctx: t.dist_ctx.entries.clone(),
                    dist_rand: t.dist_rand.as_ref().map(|d| d.entries.clone()),
                    layers: t.layers.iter().map(|l| (l.prob_top1, l.entropy)).collect(),
                })
                .collect(),
            meta: r.meta.clone(),
        }
    }
}
