//! Token and response hallucination scores.
//!
//! A token's score is `λ·I − (1−λ)·E`: high internal-knowledge use together
//! with low external-context use marks a likely hallucination. A response's
//! score is the unweighted mean over its tokens.

use std::io::BufRead;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::embedding::EmbeddingTable;
use crate::error::ScoreError;
use crate::external::{external_score, ExternalOptions};
use crate::internal::{internal_score, DEFAULT_ENTROPY_FLOOR};
use crate::trace::{Condition, ResponseTrace};

pub const DEFAULT_LAMBDA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoringConfig {
    pub external: ExternalOptions,
    pub lambda: f64,
    pub entropy_floor: f64,
    /// Z-score external and internal scores across the whole corpus before
    /// combining them. Only [`score_corpus`] honours this.
    pub normalize_scores: bool,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            external: ExternalOptions::default(),
            lambda: DEFAULT_LAMBDA,
            entropy_floor: DEFAULT_ENTROPY_FLOOR,
            normalize_scores: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenScore {
    pub external: f64,
    /// Calibrated internal-knowledge score.
    pub internal: f64,
    pub hallucination: f64,
    pub truncation_mass: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub response_id: String,
    pub lambda: f64,
    pub per_token: Vec<TokenScore>,
    pub response_score: f64,
    /// `exp(−mean ln gen_prob)`; `+∞` when some token has probability zero.
    pub baseline_perplexity: f64,
    /// Mean entropy of the renormalized top-K context distribution
    /// (a single-sample length-normalized entropy proxy).
    pub baseline_mean_entropy: f64,
}

fn check_lambda(lambda: f64) -> Result<(), ScoreError> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(ScoreError::LambdaOutOfRange(lambda))
    }
}

pub fn token_hallucination(external: f64, internal: f64, lambda: f64) -> Result<f64, ScoreError> {
    check_lambda(lambda)?;
    Ok(lambda * internal - (1.0 - lambda) * external)
}

pub fn response_hallucination(token_scores: &[f64]) -> Result<f64, ScoreError> {
    if token_scores.is_empty() {
        return Err(ScoreError::Empty);
    }
    Ok(token_scores.iter().sum::<f64>() / token_scores.len() as f64)
}

pub fn perplexity(gen_probs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = gen_probs
        .into_iter()
        .fold((0.0, 0usize), |(s, n), p| (s + p.ln(), n + 1));
    if n == 0 {
        return f64::NAN;
    }
    (-sum / n as f64).exp()
}

struct RawResponse<'a> {
    resp: &'a ResponseTrace,
    external: Vec<f64>,
    internal: Vec<f64>,
    masses: Vec<(f64, f64)>,
}

fn raw_scores<'a>(
    resp: &'a ResponseTrace,
    table: &EmbeddingTable,
    cfg: &ScoringConfig,
) -> Result<RawResponse<'a>, ScoreError> {
    if resp.condition != Condition::WithDocs {
        return Err(ScoreError::ConditionMismatch {
            response_id: resp.response_id.clone(),
            expected: Condition::WithDocs,
            found: resp.condition,
        });
    }
    let n = resp.tokens.len();
    let mut raw = RawResponse {
        resp,
        external: Vec::with_capacity(n),
        internal: Vec::with_capacity(n),
        masses: Vec::with_capacity(n),
    };
    for (i, token) in resp.tokens.iter().enumerate() {
        let e = external_score(token, table, cfg.external).map_err(|e| e.at_token(i))?;
        let int =
            internal_score(token, cfg.entropy_floor).map_err(|source| ScoreError::Internal { token: i, source })?;
        raw.external.push(e.value);
        raw.internal.push(int.calibrated);
        raw.masses.push(e.truncation_mass);
    }
    Ok(raw)
}

fn finish(raw: RawResponse<'_>, lambda: f64) -> Result<ScoreReport, ScoreError> {
    let per_token = raw
        .external
        .iter()
        .zip(&raw.internal)
        .zip(&raw.masses)
        .map(|((&external, &internal), &truncation_mass)| {
            Ok(TokenScore {
                external,
                internal,
                hallucination: token_hallucination(external, internal, lambda)?,
                truncation_mass,
            })
        })
        .collect::<Result<Vec<_>, ScoreError>>()?;
    let h: Vec<f64> = per_token.iter().map(|t| t.hallucination).collect();
    let tokens = &raw.resp.tokens;
    Ok(ScoreReport {
        response_id: raw.resp.response_id.clone(),
        lambda,
        response_score: response_hallucination(&h)?,
        per_token,
        baseline_perplexity: perplexity(tokens.iter().map(|t| t.gen_prob)),
        baseline_mean_entropy: tokens.iter().map(|t| t.dist_ctx.renormalized_entropy()).sum::<f64>()
            / tokens.len() as f64,
    })
}

/// Scores one `with_docs` response. Corpus normalization does not apply here.
pub fn score_response(
    resp: &ResponseTrace,
    table: &EmbeddingTable,
    cfg: &ScoringConfig,
) -> Result<ScoreReport, ScoreError> {
    check_lambda(cfg.lambda)?;
    finish(raw_scores(resp, table, cfg)?, cfg.lambda)
}

/// Scores a corpus of `with_docs` responses in input order, optionally
/// z-scoring the external and internal components over all tokens first.
pub fn score_corpus(
    resps: &[ResponseTrace],
    table: &EmbeddingTable,
    cfg: &ScoringConfig,
) -> Result<Vec<ScoreReport>, ScoreError> {
    check_lambda(cfg.lambda)?;
    let mut raws = resps
        .iter()
        .map(|r| raw_scores(r, table, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    if cfg.normalize_scores {
        standardize(raws.iter_mut().flat_map(|r| r.external.iter_mut()).collect());
        standardize(raws.iter_mut().flat_map(|r| r.internal.iter_mut()).collect());
    }
    raws.into_iter().map(|r| finish(r, cfg.lambda)).collect()
}

/// Shifts to zero mean and, when the spread is nonzero, unit variance.
fn standardize(values: Vec<&mut f64>) {
    if values.is_empty() {
        return;
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|v| **v).sum::<f64>() / n;
    let var = values.iter().map(|v| (**v - mean).powi(2)).sum::<f64>() / n;
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    for v in values {
        *v = (*v - mean) / sd;
    }
}

#[derive(Serialize, Deserialize)]
struct WireReport {
    response_id: String,
    lambda: f64,
    response_score: f64,
    per_token: Vec<[f64; 3]>,
    baseline_perplexity: Value,
    baseline_mean_entropy: f64,
    truncation_mass: Vec<[f64; 2]>,
}

#[derive(Debug, Error)]
#[error("line {line}: malformed score report: {message}")]
pub struct ReportError {
    pub line: usize,
    pub message: String,
}

impl ScoreReport {
    /// One JSON line. Infinite perplexity is written as the string `"inf"`.
    pub fn to_json_line(&self) -> String {
        let ppl = if self.baseline_perplexity.is_infinite() {
            Value::String("inf".into())
        } else {
            serde_json::json!(self.baseline_perplexity)
        };
        let wire = WireReport {
            response_id: self.response_id.clone(),
            lambda: self.lambda,
            response_score: self.response_score,
            per_token: self
                .per_token
                .iter()
                .map(|t| [t.external, t.internal, t.hallucination])
                .collect(),
            baseline_perplexity: ppl,
            baseline_mean_entropy: self.baseline_mean_entropy,
            truncation_mass: self
                .per_token
                .iter()
                .map(|t| [t.truncation_mass.0, t.truncation_mass.1])
                .collect(),
        };
        serde_json::to_string(&wire).expect("report serialization cannot fail")
    }

    pub fn from_json_line(line: &str, line_no: usize) -> Result<Self, ReportError> {
        let err = |message: String| ReportError { line: line_no, message };
        let w: WireReport = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let baseline_perplexity = match &w.baseline_perplexity {
            Value::String(s) if s == "inf" => f64::INFINITY,
            Value::Number(n) => n.as_f64().ok_or_else(|| err("bad perplexity".into()))?,
            other => return Err(err(format!("bad perplexity {other}"))),
        };
        if w.truncation_mass.len() != w.per_token.len() {
            return Err(err("per_token and truncation_mass lengths differ".into()));
        }
        Ok(ScoreReport {
            response_id: w.response_id,
            lambda: w.lambda,
            per_token: w
                .per_token
                .iter()
                .zip(&w.truncation_mass)
                .map(|(t, m)| TokenScore {
                    external: t[0],
                    internal: t[1],
                    hallucination: t[2],
                    truncation_mass: (m[0], m[1]),
                })
                .collect(),
            response_score: w.response_score,
            baseline_perplexity,
            baseline_mean_entropy: w.baseline_mean_entropy,
        })
    }
}

/// Reads a score-report JSONL stream, skipping blank lines.
pub fn parse_score_reports<R: BufRead>(reader: R) -> Result<Vec<ScoreReport>, ReportError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| ReportError {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !line.trim().is_empty() {
            out.push(ScoreReport::from_json_line(&line, i + 1)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{LayerStat, Task, TokenTrace, TopKDist};
    use proptest::prelude::*;

    fn table() -> EmbeddingTable {
        let mut t = EmbeddingTable::new(2);
        t.insert(0, vec![1.0, 0.0]).unwrap();
        t.insert(1, vec![0.0, 1.0]).unwrap();
        t
    }

    fn token(gen_prob: f64, rand_id: u32, layer_prob: f64) -> TokenTrace {
        TokenTrace {
            token_id: 0,
            gen_prob,
            top1_id: 0,
            top1_prob: gen_prob,
            dist_ctx: TopKDist::new_unchecked(vec![(0, gen_prob)]),
            dist_rand: Some(TopKDist::new_unchecked(vec![(rand_id, 0.5)])),
            layers: vec![
                LayerStat {
                    layer_index: 1,
                    prob_top1: layer_prob,
                    entropy: 1.0,
                },
                LayerStat {
                    layer_index: 2,
                    prob_top1: gen_prob,
                    entropy: 2.0,
                },
            ],
        }
    }

    fn response(tokens: Vec<TokenTrace>) -> ResponseTrace {
        ResponseTrace {
            response_id: "r".into(),
            model_name: "m".into(),
            task: Task::Qa,
            condition: Condition::WithDocs,
            label: None,
            layer_count: 3,
            tokens,
            meta: Default::default(),
        }
    }

    #[test]
    fn token_score_examples() {
        assert!((token_hallucination(0.2, 0.4, 0.5).unwrap() - 0.1).abs() < 1e-16);
        assert_eq!(token_hallucination(0.7, 0.4, 1.0).unwrap(), 0.4);
        assert_eq!(token_hallucination(0.7, 0.4, 0.0).unwrap(), -0.7);
        assert_eq!(
            token_hallucination(0.7, 0.4, 1.5),
            Err(ScoreError::LambdaOutOfRange(1.5))
        );
        assert!(token_hallucination(0.7, 0.4, f64::NAN).is_err());
    }

    #[test]
    fn response_score_examples() {
        assert_eq!(response_hallucination(&[0.1]).unwrap(), 0.1);
        assert_eq!(response_hallucination(&[0.2, -0.2]).unwrap(), 0.0);
        assert!((response_hallucination(&[0.1, 0.2, 0.3]).unwrap() - 0.2).abs() < 1e-16);
        assert_eq!(response_hallucination(&[]), Err(ScoreError::Empty));
    }

    #[test]
    fn all_zero_composition() {
        let r = score_response(&response(vec![token(0.5, 0, 0.5)]), &table(), &ScoringConfig::default()).unwrap();
        let t = r.per_token[0];
        assert_eq!((t.external, t.internal, t.hallucination), (0.0, 0.0, 0.0));
        assert_eq!(r.response_score, 0.0);
    }

    #[test]
    fn baselines() {
        let r = score_response(
            &response(vec![token(0.5, 0, 0.5), token(0.5, 1, 0.0)]),
            &table(),
            &ScoringConfig::default(),
        )
        .unwrap();
        assert!((r.baseline_perplexity - 2.0).abs() < 1e-15);
        assert_eq!(r.baseline_mean_entropy, 0.0);
        assert_eq!(perplexity([0.5, 0.0]), f64::INFINITY);
    }

    #[test]
    fn lambda_sweep_is_linear() {
        let resp = response(vec![token(0.5, 1, 0.0), token(0.5, 0, 0.1)]);
        let base = score_response(&resp, &table(), &ScoringConfig::default()).unwrap();
        let mut prev: Option<f64> = None;
        for step in 1..=9 {
            let lambda = step as f64 / 10.0;
            let cfg = ScoringConfig {
                lambda,
                ..Default::default()
            };
            let r = score_response(&resp, &table(), &cfg).unwrap();
            for (t, b) in r.per_token.iter().zip(&base.per_token) {
                let expected = -b.external + lambda * (b.internal + b.external);
                assert!((t.hallucination - expected).abs() < 1e-15);
            }
            if let Some(p) = prev {
                assert!(r.response_score != p);
            }
            prev = Some(r.response_score);
        }
    }

    #[test]
    fn no_docs_responses_are_rejected() {
        let mut resp = response(vec![token(0.5, 0, 0.5)]);
        resp.condition = Condition::NoDocs;
        assert!(matches!(
            score_response(&resp, &table(), &ScoringConfig::default()),
            Err(ScoreError::ConditionMismatch { .. })
        ));
    }

    #[test]
    fn corpus_normalization() {
        let resps = vec![response(vec![token(0.5, 1, 0.0)]), response(vec![token(0.5, 0, 0.4)])];
        let cfg = ScoringConfig {
            normalize_scores: true,
            ..Default::default()
        };
        let reports = score_corpus(&resps, &table(), &cfg).unwrap();
        let ext: Vec<f64> = reports.iter().map(|r| r.per_token[0].external).collect();
        assert_eq!(ext, vec![1.0, -1.0]);
        let plain = score_corpus(&resps, &table(), &ScoringConfig::default()).unwrap();
        assert_eq!(
            plain[0],
            score_response(&resps[0], &table(), &ScoringConfig::default()).unwrap()
        );
    }

    #[test]
    fn report_json_round_trip() {
        let mut r = score_response(&response(vec![token(0.5, 1, 0.0)]), &table(), &ScoringConfig::default()).unwrap();
        let line = r.to_json_line();
        assert!(line.starts_with(r#"{"response_id":"r","lambda":0.5,"response_score":"#));
        assert_eq!(ScoreReport::from_json_line(&line, 1).unwrap(), r);
        r.baseline_perplexity = f64::INFINITY;
        let line = r.to_json_line();
        assert!(line.contains(r#""baseline_perplexity":"inf""#));
        assert_eq!(parse_score_reports(format!("{line}\n\n").as_bytes()).unwrap(), vec![r]);
    }

    proptest! {
        #[test]
        fn common_rescaling_preserves_order(
            pairs in prop::collection::vec((0.0f64..2.0, 0.0f64..3.0), 2..20), c in 0.01f64..100.0, lambda in 0.0f64..=1.0,
        ) {
            let h: Vec<f64> = pairs.iter().map(|&(e, i)| token_hallucination(e, i, lambda).unwrap()).collect();
            let hs: Vec<f64> = pairs.iter().map(|&(e, i)| token_hallucination(c * e, c * i, lambda).unwrap()).collect();
            for (a, b) in h.iter().zip(&hs) {
                prop_assert!((a * c - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }
}
