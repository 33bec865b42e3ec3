//! Deterministic synthetic trace corpora.
//!
//! Fixtures realize two score regimes rather than realistic model output:
//!
//! * **grounded** tokens move a lot when the documents are swapped (the
//!   random-document distribution is mostly mass on other tokens) and their
//!   logit-lens layers converge early;
//! * **hallucinated** tokens barely react to the documents and their layers
//!   converge late with high entropy.
//!
//! Randomness comes from ChaCha8 seeded with `seed_from_u64(seed)`. Uniform
//! reals take the top 53 bits of `next_u64` scaled by 2⁻⁵³, bounded integers
//! use the multiply-shift map `(x · n) >> 64`, and normals use Box–Muller.
//! Nothing else draws from the stream, so a fixture is reproducible from its
//! seed and parameters in any language with a ChaCha8 implementation.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde_json::json;

use crate::embedding::{write_embeddings, EmbeddingTable};
use crate::trace::{write_traces, Condition, LayerStat, ResponseTrace, Task, TokenId, TokenTrace, TopKDist};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Grounded,
    Hallucinated,
    /// Each response is grounded or hallucinated with probability ½.
    Mixed,
}

impl Regime {
    fn name(self) -> &'static str {
        match self {
            Regime::Grounded => "grounded",
            Regime::Hallucinated => "hallucinated",
            Regime::Mixed => "mixed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixtureSpec {
    pub seed: u64,
    pub n_responses: usize,
    pub tokens_per_response: usize,
    pub vocab_size: usize,
    pub dim: usize,
    pub regime: Regime,
    pub layer_count: usize,
    /// Length of each stored distribution (capped by `vocab_size`).
    pub top_k: usize,
    /// Chance that a token follows the opposite regime to its response.
    pub off_regime_rate: f64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            seed: 1,
            n_responses: 200,
            tokens_per_response: 16,
            vocab_size: 64,
            dim: 16,
            regime: Regime::Mixed,
            layer_count: 32,
            top_k: 8,
            off_regime_rate: 0.15,
        }
    }
}

/// Generated corpus: trace JSONL bytes, LUME bytes, and per-response labels
/// (`true` = hallucinated).
#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub traces: Vec<u8>,
    pub embeddings: Vec<u8>,
    pub labels: Vec<(String, bool)>,
}

pub struct Prng(ChaCha8Rng);

impl Prng {
    pub fn new(seed: u64) -> Self {
        Prng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        ((self.0.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn chance(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// How strongly a token depends on the documents and how late its layers
/// settle.
#[derive(Debug, Clone, Copy)]
struct Profile {
    /// Fraction of the random-document distribution moved onto other tokens.
    shift: (f64, f64),
    /// Position of the first saturated layer as a fraction of `L − 1`.
    convergence: (f64, f64),
}

const GROUNDED: Profile = Profile {
    shift: (0.8, 1.0),
    convergence: (0.05, 0.25),
};
const HALLUCINATED: Profile = Profile {
    shift: (0.0, 0.1),
    convergence: (0.75, 0.95),
};

fn embedding_table(rng: &mut Prng, vocab: usize, dim: usize) -> EmbeddingTable {
    let mut table = EmbeddingTable::new(dim);
    for id in 0..vocab {
        let v: Vec<f64> = if vocab <= dim {
            // Orthogonal: a scaled basis vector per token.
            let scale = rng.range(0.5, 2.0) as f32 as f64;
            (0..dim).map(|d| if d == id { scale } else { 0.0 }).collect()
        } else {
            loop {
                let v: Vec<f64> = (0..dim).map(|_| rng.normal() as f32 as f64).collect();
                if v.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
                    break v;
                }
            }
        };
        table.insert(id as TokenId, v).expect("generated vectors are valid");
    }
    table
}

/// `k` distinct ids from `0..vocab`, preferring ids outside `avoid`.
fn pick_ids(rng: &mut Prng, vocab: usize, k: usize, avoid: &[TokenId]) -> Vec<TokenId> {
    let mut fresh: Vec<TokenId> = (0..vocab as TokenId).filter(|id| !avoid.contains(id)).collect();
    let mut used: Vec<TokenId> = avoid.to_vec();
    rng.shuffle(&mut fresh);
    rng.shuffle(&mut used);
    fresh.into_iter().chain(used).take(k).collect()
}

/// Descending weights summing to one.
fn decreasing_weights(rng: &mut Prng, k: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..k).map(|_| rng.range(0.05, 1.0).powi(2)).collect();
    w.sort_by(|a, b| b.total_cmp(a));
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

fn sorted_dist(mut entries: Vec<(TokenId, f64)>) -> Vec<(TokenId, f64)> {
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    entries
}

fn gen_token(
    rng: &mut Prng,
    profile: Profile,
    vocab: usize,
    top_k: usize,
    layer_count: usize,
    forced: Option<TokenId>,
) -> TokenTrace {
    let k = top_k.min(vocab).max(1);

    let mut ctx_ids = pick_ids(rng, vocab, k, &[]);
    if let Some(f) = forced {
        if !ctx_ids.contains(&f) {
            ctx_ids[k - 1] = f;
        }
        rng.shuffle(&mut ctx_ids);
    }
    let ctx_norm = decreasing_weights(rng, k);
    let ctx_mass = rng.range(0.85, 0.99);
    let ctx: Vec<(TokenId, f64)> = sorted_dist(
        ctx_ids
            .iter()
            .zip(&ctx_norm)
            .map(|(&id, &w)| (id, w * ctx_mass))
            .collect(),
    );

    let shift = rng.range(profile.shift.0, profile.shift.1);
    let other_ids = pick_ids(rng, vocab, k, &ctx_ids);
    let other_w = decreasing_weights(rng, k);
    let mut mix: BTreeMap<TokenId, f64> = BTreeMap::new();
    for (&id, &w) in ctx_ids.iter().zip(&ctx_norm) {
        *mix.entry(id).or_default() += (1.0 - shift) * w;
    }
    for (&id, &w) in other_ids.iter().zip(&other_w) {
        *mix.entry(id).or_default() += shift * w;
    }
    let mut rand = sorted_dist(mix.into_iter().filter(|&(_, p)| p > 0.0).collect());
    rand.truncate(k);
    let rand_mass = rng.range(0.85, 0.99);
    let kept: f64 = rand.iter().map(|e| e.1).sum();
    let rand: Vec<(TokenId, f64)> = rand.into_iter().map(|(id, p)| (id, p / kept * rand_mass)).collect();

    let (top1_id, top1_prob) = ctx[0];
    let (token_id, gen_prob) = match forced {
        Some(f) => *ctx.iter().find(|e| e.0 == f).expect("forced id is in the support"),
        None if k >= 2 && rng.chance(0.2) => ctx[1],
        None => ctx[0],
    };

    let stored = layer_count - 1;
    let conv = rng.range(profile.convergence.0, profile.convergence.1);
    let first_saturated = ((conv * stored as f64).round() as usize).clamp(1, stored);
    let layers = (1..=stored)
        .map(|l| {
            let (prob_top1, entropy) = if l < first_saturated {
                (top1_prob * rng.range(0.0, 0.3), rng.range(2.0, 5.0))
            } else {
                ((top1_prob * rng.range(1.0, 1.2)).min(1.0), rng.range(0.2, 1.5))
            };
            LayerStat {
                layer_index: l,
                prob_top1,
                entropy,
            }
        })
        .collect();

    TokenTrace {
        token_id,
        gen_prob,
        top1_id,
        top1_prob,
        dist_ctx: TopKDist::new_unchecked(ctx),
        dist_rand: Some(TopKDist::new_unchecked(rand)),
        layers,
    }
}

fn to_bytes(traces: &[ResponseTrace], table: &EmbeddingTable, labels: Vec<(String, bool)>) -> Fixture {
    let mut trace_bytes = Vec::new();
    write_traces(&mut trace_bytes, traces).expect("writing to memory");
    let mut emb = Vec::new();
    write_embeddings(&mut emb, table).expect("writing to memory");
    Fixture {
        traces: trace_bytes,
        embeddings: emb,
        labels,
    }
}

/// Builds the responses and table of a detection fixture.
pub fn generate_corpus(spec: &FixtureSpec) -> (Vec<ResponseTrace>, EmbeddingTable) {
    assert!(spec.layer_count >= 2 && spec.vocab_size >= 1 && spec.dim >= 1 && spec.tokens_per_response >= 1);
    let mut rng = Prng::new(spec.seed);
    let table = embedding_table(&mut rng, spec.vocab_size, spec.dim);
    let mut responses = Vec::with_capacity(spec.n_responses);
    for i in 0..spec.n_responses {
        let hallucinated = match spec.regime {
            Regime::Grounded => false,
            Regime::Hallucinated => true,
            Regime::Mixed => rng.chance(0.5),
        };
        let tokens = (0..spec.tokens_per_response)
            .map(|_| {
                let flip = rng.chance(spec.off_regime_rate);
                let profile = if hallucinated != flip { HALLUCINATED } else { GROUNDED };
                gen_token(&mut rng, profile, spec.vocab_size, spec.top_k, spec.layer_count, None)
            })
            .collect();
        let mut meta = BTreeMap::new();
        meta.insert("fixture_seed".to_string(), json!(spec.seed));
        meta.insert("regime".to_string(), json!(spec.regime.name()));
        responses.push(ResponseTrace {
            response_id: format!("fx{}-{i:05}", spec.seed),
            model_name: "synthetic".into(),
            task: Task::Qa,
            condition: Condition::WithDocs,
            label: Some(hallucinated),
            layer_count: spec.layer_count,
            tokens,
            meta,
        });
    }
    (responses, table)
}

pub fn generate_fixture(spec: &FixtureSpec) -> Fixture {
    let (responses, table) = generate_corpus(spec);
    let labels = responses
        .iter()
        .map(|r| (r.response_id.clone(), r.label.unwrap_or(false)))
        .collect();
    to_bytes(&responses, &table, labels)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HypothesisFixtureSpec {
    pub seed: u64,
    /// Prompts per task; each yields a with_docs and a teacher-forced
    /// no_docs response.
    pub prompts_per_task: usize,
    pub tokens_per_response: usize,
    pub vocab_size: usize,
    pub dim: usize,
    pub layer_count: usize,
    pub top_k: usize,
}

impl Default for HypothesisFixtureSpec {
    fn default() -> Self {
        HypothesisFixtureSpec {
            seed: 7,
            prompts_per_task: 20,
            tokens_per_response: 12,
            vocab_size: 64,
            dim: 16,
            layer_count: 24,
            top_k: 8,
        }
    }
}

/// Documented directional gaps, per task, for retrieved-document answers.
/// No-document re-scorings use the hallucinated profile.
fn task_profile(task: Task) -> Profile {
    match task {
        Task::Summarization => Profile {
            shift: (0.9, 1.0),
            convergence: (0.05, 0.15),
        },
        Task::Data2text => Profile {
            shift: (0.6, 0.8),
            convergence: (0.35, 0.5),
        },
        _ => Profile {
            shift: (0.6, 0.8),
            convergence: (0.2, 0.3),
        },
    }
}

/// Builds a corpus for the hypothesis protocol: QA, summarization and
/// data-to-text prompts, each answered with documents and re-scored without
/// them on the same tokens.
pub fn generate_hypothesis_corpus(spec: &HypothesisFixtureSpec) -> (Vec<ResponseTrace>, EmbeddingTable) {
    let mut rng = Prng::new(spec.seed);
    let table = embedding_table(&mut rng, spec.vocab_size, spec.dim);
    let mut responses = Vec::new();
    for task in [Task::Qa, Task::Summarization, Task::Data2text] {
        for i in 0..spec.prompts_per_task {
            let id = format!("hx{}-{task}-{i:04}", spec.seed);
            let with_tokens: Vec<TokenTrace> = (0..spec.tokens_per_response)
                .map(|_| {
                    gen_token(
                        &mut rng,
                        task_profile(task),
                        spec.vocab_size,
                        spec.top_k,
                        spec.layer_count,
                        None,
                    )
                })
                .collect();
            let no_tokens: Vec<TokenTrace> = with_tokens
                .iter()
                .map(|t| {
                    gen_token(
                        &mut rng,
                        HALLUCINATED,
                        spec.vocab_size,
                        spec.top_k,
                        spec.layer_count,
                        Some(t.token_id),
                    )
                })
                .collect();
            for (condition, tokens) in [(Condition::WithDocs, with_tokens), (Condition::NoDocs, no_tokens)] {
                let mut meta = BTreeMap::new();
                meta.insert("fixture_seed".to_string(), json!(spec.seed));
                meta.insert("teacher_forced".to_string(), json!(true));
                responses.push(ResponseTrace {
                    response_id: id.clone(),
                    model_name: "synthetic".into(),
                    task,
                    condition,
                    label: None,
                    layer_count: spec.layer_count,
                    tokens,
                    meta,
                });
            }
        }
    }
    (responses, table)
}

pub fn generate_hypothesis_fixture(spec: &HypothesisFixtureSpec) -> Fixture {
    let (responses, table) = generate_hypothesis_corpus(spec);
    to_bytes(&responses, &table, Vec::new())
}
