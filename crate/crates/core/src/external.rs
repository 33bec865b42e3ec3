//! External-context utilization: how much the next-token distribution moves
//! when the retrieved documents are swapped for random ones.

use crate::embedding::EmbeddingTable;
use crate::error::ScoreError;
use crate::kernels::{mmd_squared, KernelSpec, WeightedSupport};
use crate::trace::{Condition, ResponseTrace, TokenTrace};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExternalOptions {
    pub kernel: KernelSpec,
    /// Rescale each truncated distribution to unit mass before comparing.
    pub renormalize: bool,
    /// Report `MMD` instead of `MMD²`.
    pub sqrt: bool,
}

impl Default for ExternalOptions {
    fn default() -> Self {
        ExternalOptions {
            kernel: KernelSpec::Cosine,
            renormalize: true,
            sqrt: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExternalScore {
    /// Squared MMD (or MMD with [`ExternalOptions::sqrt`]).
    pub value: f64,
    /// Sizes of the retrieved-document and random-document supports.
    pub support_sizes: (usize, usize),
    /// Stored probability mass of each distribution before renormalization.
    pub truncation_mass: (f64, f64),
}

/// Scores one token. The token index in error values is 0; use
/// [`external_scores_response`] for positioned errors.
pub fn external_score(
    token: &TokenTrace,
    table: &EmbeddingTable,
    opts: ExternalOptions,
) -> Result<ExternalScore, ScoreError> {
    let rand = token
        .dist_rand
        .as_ref()
        .ok_or(ScoreError::MissingRandomDist { token: 0 })?;
    let kernel_err = |source| ScoreError::Kernel { token: 0, source };
    let p = WeightedSupport::from_dist(&token.dist_ctx, table, opts.renormalize).map_err(kernel_err)?;
    let q = WeightedSupport::from_dist(rand, table, opts.renormalize).map_err(kernel_err)?;
    let mmd2 = mmd_squared(opts.kernel, &p, &q).map_err(kernel_err)?;
    Ok(ExternalScore {
        value: if opts.sqrt { mmd2.sqrt() } else { mmd2 },
        support_sizes: (p.len(), q.len()),
        truncation_mass: (token.dist_ctx.mass(), rand.mass()),
    })
}

/// Scores every token of a `with_docs` response, in token order.
pub fn external_scores_response(
    resp: &ResponseTrace,
    table: &EmbeddingTable,
    opts: ExternalOptions,
) -> Result<Vec<ExternalScore>, ScoreError> {
    if resp.condition != Condition::WithDocs {
        return Err(ScoreError::ConditionMismatch {
            response_id: resp.response_id.clone(),
            expected: Condition::WithDocs,
            found: resp.condition,
        });
    }
    resp.tokens
        .iter()
        .enumerate()
        .map(|(i, t)| external_score(t, table, opts).map_err(|e| e.at_token(i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{LayerStat, Task, TopKDist};

    fn table() -> EmbeddingTable {
        let mut t = EmbeddingTable::new(2);
        t.insert(0, vec![1.0, 0.0]).unwrap();
        t.insert(1, vec![0.0, 1.0]).unwrap();
        t.insert(2, vec![-1.0, 0.0]).unwrap();
        t.insert(3, vec![0.6, 0.8]).unwrap();
        t
    }

    fn token(ctx: Vec<(u32, f64)>, rand: Option<Vec<(u32, f64)>>) -> TokenTrace {
        TokenTrace {
            token_id: ctx[0].0,
            gen_prob: ctx[0].1,
            top1_id: ctx[0].0,
            top1_prob: ctx[0].1,
            dist_ctx: TopKDist::new_unchecked(ctx),
            dist_rand: rand.map(TopKDist::new_unchecked),
            layers: vec![LayerStat {
                layer_index: 1,
                prob_top1: 1.0,
                entropy: 1.0,
            }],
        }
    }

    fn response(tokens: Vec<TokenTrace>) -> ResponseTrace {
        ResponseTrace {
            response_id: "r".into(),
            model_name: "m".into(),
            task: Task::Qa,
            condition: Condition::WithDocs,
            label: None,
            layer_count: 2,
            tokens,
            meta: Default::default(),
        }
    }

    #[test]
    fn identical_distributions_score_zero() {
        let d = vec![(0, 0.5), (3, 0.3)];
        let s = external_score(&token(d.clone(), Some(d)), &table(), ExternalOptions::default()).unwrap();
        assert_eq!(s.value, 0.0);
        assert_eq!(s.support_sizes, (2, 2));
    }

    #[test]
    fn orthogonal_singletons_score_one() {
        let s = external_score(
            &token(vec![(0, 0.9)], Some(vec![(1, 0.4)])),
            &table(),
            ExternalOptions::default(),
        )
        .unwrap();
        assert!((s.value - 1.0).abs() < 1e-15);
        assert_eq!(s.truncation_mass, (0.9, 0.4));
    }

    #[test]
    fn sqrt_and_unnormalized_variants() {
        let t = token(vec![(0, 0.5)], Some(vec![(2, 0.5)]));
        let base = external_score(&t, &table(), ExternalOptions::default()).unwrap();
        assert_eq!(base.value, 2.0);
        let root = external_score(
            &t,
            &table(),
            ExternalOptions {
                sqrt: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(root.value, 2.0f64.sqrt());
        let raw = external_score(
            &t,
            &table(),
            ExternalOptions {
                renormalize: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(raw.value, 0.5);
        assert_eq!(raw.truncation_mass, base.truncation_mass);
    }

    #[test]
    fn moving_mass_to_antipodal_token_increases_score() {
        let ctx = vec![(0, 0.6)];
        let mut prev = -1.0;
        for moved in [0.0, 0.1, 0.3, 0.5] {
            let mut rand: Vec<(u32, f64)> = vec![(0, 0.6 - moved)];
            if moved > 0.0 {
                rand.push((2, moved));
                rand.sort_by(|a, b| b.1.total_cmp(&a.1));
            }
            let s = external_score(&token(ctx.clone(), Some(rand)), &table(), ExternalOptions::default()).unwrap();
            assert!(s.value > prev, "{moved}: {} <= {prev}", s.value);
            prev = s.value;
        }
    }

    #[test]
    fn response_scores_keep_order_and_position_errors() {
        let a = token(vec![(0, 0.5)], Some(vec![(0, 0.5)]));
        let b = token(vec![(0, 0.5)], Some(vec![(1, 0.5)]));
        let c = token(vec![(0, 0.5)], Some(vec![(2, 0.5)]));
        let scores = external_scores_response(
            &response(vec![a.clone(), b.clone(), c.clone()]),
            &table(),
            ExternalOptions::default(),
        )
        .unwrap();
        let values: Vec<f64> = scores.iter().map(|s| s.value).collect();
        assert_eq!(values.len(), 3);
        assert_eq!(values[0], 0.0);
        assert!((values[1] - 1.0).abs() < 1e-15);
        assert_eq!(values[2], 2.0);

        let shuffled =
            external_scores_response(&response(vec![c, a.clone(), b]), &table(), ExternalOptions::default()).unwrap();
        assert_eq!(shuffled[2].value, values[1]);

        let mut missing = a.clone();
        missing.dist_rand = None;
        let err = external_scores_response(
            &response(vec![a.clone(), a.clone(), missing]),
            &table(),
            ExternalOptions::default(),
        )
        .unwrap_err();
        assert_eq!(err, ScoreError::MissingRandomDist { token: 2 });

        let mut no_docs = response(vec![a]);
        no_docs.condition = Condition::NoDocs;
        assert!(matches!(
            external_scores_response(&no_docs, &table(), ExternalOptions::default()),
            Err(ScoreError::ConditionMismatch { .. })
        ));
    }

    #[test]
    fn missing_embedding_is_positioned() {
        let a = token(vec![(0, 0.5)], Some(vec![(9, 0.5)]));
        let err =
            external_scores_response(&response(vec![a.clone(), a]), &table(), ExternalOptions::default()).unwrap_err();
        assert!(matches!(err, ScoreError::Kernel { token: 0, .. }));
    }
}
