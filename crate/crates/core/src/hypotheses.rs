//! Directional validation of the two utilization scores.
//!
//! * **H1**: external scores with retrieved documents exceed those without.
//! * **H2**: external scores on summarization exceed those on QA.
//! * **H3**: processing rates without documents exceed those with documents,
//!   paired token-by-token on teacher-forced answers (paired test).
//! * **H4**: processing rates on data-to-text exceed those on summarization.
//!
//! H1, H2 and H4 use a one-tailed unpaired test (Welch by default). Group
//! `a` is always the side predicted to be larger. Hypotheses whose
//! partitions are missing, or whose test is degenerate, are reported as
//! skipped rather than failing the run.

use std::collections::HashMap;
use std::fmt;

use serde::Serialize;

use crate::embedding::EmbeddingTable;
use crate::error::ScoreError;
use crate::external::{external_score, ExternalOptions};
use crate::internal::{processing_rate, DEFAULT_ENTROPY_FLOOR};
use crate::stats::{paired_t_one_tailed, pooled_t_one_tailed, welch_t_one_tailed, TTestError, TTestResult};
use crate::trace::{Condition, ResponseTrace, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Hypothesis {
    H1,
    H2,
    H3,
    H4,
}

impl fmt::Display for Hypothesis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Sampling unit fed to the tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    /// Every token is one observation.
    #[default]
    Token,
    /// Each response contributes the mean of its token scores.
    Response,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HypothesisConfig {
    pub external: ExternalOptions,
    pub entropy_floor: f64,
    pub unit: Unit,
    /// Use the pooled-variance test instead of Welch for H1, H2 and H4.
    pub pooled: bool,
}

impl Default for HypothesisConfig {
    fn default() -> Self {
        HypothesisConfig {
            external: ExternalOptions::default(),
            entropy_floor: DEFAULT_ENTROPY_FLOOR,
            unit: Unit::Token,
            pooled: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Tested(TTestResult),
    Skipped(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisOutcome {
    pub hypothesis: Hypothesis,
    pub outcome: Outcome,
}

impl HypothesisOutcome {
    fn skipped(hypothesis: Hypothesis, reason: impl Into<String>) -> Self {
        HypothesisOutcome {
            hypothesis,
            outcome: Outcome::Skipped(reason.into()),
        }
    }

    pub fn result(&self) -> Option<&TTestResult> {
        match &self.outcome {
            Outcome::Tested(r) => Some(r),
            Outcome::Skipped(_) => None,
        }
    }

    /// JSON object for the hypothesis report.
    pub fn to_json(&self) -> serde_json::Value {
        match &self.outcome {
            Outcome::Tested(r) => serde_json::json!({
                "hypothesis": self.hypothesis,
                "status": "tested",
                "t_stat": finite_or_string(r.t_stat),
                "dof": r.dof,
                "p_value": r.p_value,
                "n_a": r.n_a,
                "n_b": r.n_b,
                "mean_a": r.mean_a,
                "mean_b": r.mean_b,
                "stars": r.stars(),
            }),
            Outcome::Skipped(reason) => serde_json::json!({
                "hypothesis": self.hypothesis,
                "status": "skipped",
                "reason": reason,
            }),
        }
    }
}

fn finite_or_string(x: f64) -> serde_json::Value {
    if x.is_finite() {
        serde_json::json!(x)
    } else if x > 0.0 {
        serde_json::json!("inf")
    } else {
        serde_json::json!("-inf")
    }
}

fn describe(err: &TTestError) -> String {
    match err {
        TTestError::ZeroVarianceDifferences => "zero-variance paired differences".into(),
        other => other.to_string(),
    }
}

/// Per-response token scores, collapsed according to the unit.
fn collect(groups: Vec<Vec<f64>>, unit: Unit) -> Vec<f64> {
    match unit {
        Unit::Token => groups.into_iter().flatten().collect(),
        Unit::Response => groups
            .into_iter()
            .map(|g| g.iter().sum::<f64>() / g.len() as f64)
            .collect(),
    }
}

fn external_values(
    resp: &ResponseTrace,
    table: &EmbeddingTable,
    opts: ExternalOptions,
) -> Result<Vec<f64>, ScoreError> {
    resp.tokens
        .iter()
        .enumerate()
        .map(|(i, t)| {
            external_score(t, table, opts)
                .map(|s| s.value)
                .map_err(|e| e.at_token(i))
        })
        .collect()
}

fn rate_values(resp: &ResponseTrace, floor: f64) -> Result<Vec<f64>, ScoreError> {
    resp.tokens
        .iter()
        .enumerate()
        .map(|(i, t)| {
            processing_rate(t, floor)
                .map(|r| r.rate)
                .map_err(|source| ScoreError::Internal { token: i, source })
        })
        .collect()
}

fn has_rand(resp: &ResponseTrace) -> bool {
    resp.tokens.iter().all(|t| t.dist_rand.is_some())
}

fn unpaired(h: Hypothesis, a: Vec<f64>, b: Vec<f64>, pooled: bool) -> HypothesisOutcome {
    let res = if pooled {
        pooled_t_one_tailed(&a, &b)
    } else {
        welch_t_one_tailed(&a, &b)
    };
    match res {
        Ok(r) => HypothesisOutcome {
            hypothesis: h,
            outcome: Outcome::Tested(r),
        },
        Err(e) => HypothesisOutcome::skipped(h, describe(&e)),
    }
}

fn external_test(
    h: Hypothesis,
    corpus: &[ResponseTrace],
    table: &EmbeddingTable,
    cfg: &HypothesisConfig,
    in_a: impl Fn(&ResponseTrace) -> bool,
    in_b: impl Fn(&ResponseTrace) -> bool,
    missing: &str,
) -> Result<HypothesisOutcome, ScoreError> {
    let (mut a, mut b) = (Vec::new(), Vec::new());
    let mut lacking_rand = false;
    for resp in corpus {
        let side = if in_a(resp) {
            &mut a
        } else if in_b(resp) {
            &mut b
        } else {
            continue;
        };
        if !has_rand(resp) {
            lacking_rand = true;
            continue;
        }
        side.push(external_values(resp, table, cfg.external)?);
    }
    if a.is_empty() || b.is_empty() {
        let reason = if lacking_rand {
            format!("{missing} (responses without dist_rand are excluded)")
        } else {
            missing.to_string()
        };
        return Ok(HypothesisOutcome::skipped(h, reason));
    }
    Ok(unpaired(h, collect(a, cfg.unit), collect(b, cfg.unit), cfg.pooled))
}

fn rate_test(
    h: Hypothesis,
    corpus: &[ResponseTrace],
    cfg: &HypothesisConfig,
    in_a: impl Fn(&ResponseTrace) -> bool,
    in_b: impl Fn(&ResponseTrace) -> bool,
    missing: &str,
) -> Result<HypothesisOutcome, ScoreError> {
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for resp in corpus {
        if in_a(resp) {
            a.push(rate_values(resp, cfg.entropy_floor)?);
        } else if in_b(resp) {
            b.push(rate_values(resp, cfg.entropy_floor)?);
        }
    }
    if a.is_empty() || b.is_empty() {
        return Ok(HypothesisOutcome::skipped(h, missing));
    }
    Ok(unpaired(h, collect(a, cfg.unit), collect(b, cfg.unit), cfg.pooled))
}

fn paired_rate_test(corpus: &[ResponseTrace], cfg: &HypothesisConfig) -> Result<HypothesisOutcome, ScoreError> {
    let h = Hypothesis::H3;
    let with_docs: HashMap<&str, &ResponseTrace> = corpus
        .iter()
        .filter(|r| r.condition == Condition::WithDocs)
        .map(|r| (r.response_id.as_str(), r))
        .collect();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for no_docs in corpus.iter().filter(|r| r.condition == Condition::NoDocs) {
        let Some(with) = with_docs.get(no_docs.response_id.as_str()) else {
            continue;
        };
        let aligned = with.tokens.len() == no_docs.tokens.len()
            && with
                .tokens
                .iter()
                .zip(&no_docs.tokens)
                .all(|(x, y)| x.token_id == y.token_id);
        if !aligned {
            return Ok(HypothesisOutcome::skipped(
                h,
                format!(
                    "token sequences differ for response {:?}; pairs must be teacher-forced",
                    no_docs.response_id
                ),
            ));
        }
        a.push(rate_values(no_docs, cfg.entropy_floor)?);
        b.push(rate_values(with, cfg.entropy_floor)?);
    }
    if a.is_empty() {
        return Ok(HypothesisOutcome::skipped(
            h,
            "missing condition partition: no with_docs/no_docs pairs",
        ));
    }
    let (a, b) = (collect(a, cfg.unit), collect(b, cfg.unit));
    Ok(match paired_t_one_tailed(&a, &b) {
        Ok(r) => HypothesisOutcome {
            hypothesis: h,
            outcome: Outcome::Tested(r),
        },
        Err(e) => HypothesisOutcome::skipped(h, describe(&e)),
    })
}

/// Runs H1–H4 over a corpus, in order.
pub fn run_hypotheses(
    corpus: &[ResponseTrace],
    table: &EmbeddingTable,
    cfg: &HypothesisConfig,
) -> Result<Vec<HypothesisOutcome>, ScoreError> {
    let with = |r: &ResponseTrace| r.condition == Condition::WithDocs;
    Ok(vec![
        external_test(
            Hypothesis::H1,
            corpus,
            table,
            cfg,
            with,
            |r| r.condition == Condition::NoDocs,
            "missing condition partition",
        )?,
        external_test(
            Hypothesis::H2,
            corpus,
            table,
            cfg,
            |r| with(r) && r.task == Task::Summarization,
            |r| with(r) && r.task == Task::Qa,
            "missing task partition",
        )?,
        paired_rate_test(corpus, cfg)?,
        rate_test(
            Hypothesis::H4,
            corpus,
            cfg,
            |r| with(r) && r.task == Task::Data2text,
            |r| with(r) && r.task == Task::Summarization,
            "missing task partition",
        )?,
    ])
}
