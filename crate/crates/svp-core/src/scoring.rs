//! Alignment-gap scores between guided and prior distributions.
//!
//! Three scores, all in nats and all additive over steps:
//! the realized sequence log-ratio `log q(z) - log p(z)`, the
//! token-weighted log-ratio (with weights equal to the guided
//! distribution it is a per-step KL sum), and the weighted difference
//! (with the natural weight choices it is a per-step entropy reduction).
//! An exhaustive enumeration over all bounded EOS-terminated sequences
//! provides the exact sequence-level KL these scores estimate.

use serde::{Deserialize, Serialize};

use crate::policy::{
    step_distribution, GuidanceSignal, PolicyConfig, PolicyParams, TokenDistribution,
};
use crate::sampler::GuidedSample;
use crate::world::Observation;
use crate::{Result, SvpError};

/// Per-step KL(q_t || p_t) via the summation in its weighted form.
fn kl_step(q: &TokenDistribution, p: &TokenDistribution) -> f64 {
    q.probs
        .iter()
        .zip(&q.logprobs)
        .zip(&p.logprobs)
        .map(|((&qp, &ql), &pl)| qp * (ql - pl))
        .sum()
}

/// Per-step `sum_v q log q - sum_v p log p`, i.e. `H(p) - H(q)`.
fn entropy_diff_step(q: &TokenDistribution, p: &TokenDistribution) -> f64 {
    let q_term: f64 = q.probs.iter().zip(&q.logprobs).map(|(p_, l)| p_ * l).sum();
    let p_term: f64 = p.probs.iter().zip(&p.logprobs).map(|(p_, l)| p_ * l).sum();
    q_term - p_term
}

fn check_alignment(sample: &GuidedSample) -> Result<()> {
    let t = sample.guided_trajectory.len();
    if sample.per_token_q.len() != t || sample.per_token_p.len() != t {
        return Err(SvpError::InvalidInput(format!(
            "per-token lists ({}/{}) do not match trajectory length {t}",
            sample.per_token_q.len(),
            sample.per_token_p.len()
        )));
    }
    Ok(())
}

/// Realized log-ratio over the guided trajectory's tokens.
pub fn score_sequence_log_ratio(sample: &GuidedSample) -> Result<f64> {
    check_alignment(sample)?;
    Ok(sequence_log_ratio_terms(sample).iter().sum())
}

fn sequence_log_ratio_terms(sample: &GuidedSample) -> Vec<f64> {
    sample
        .guided_trajectory
        .tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| sample.per_token_q[t].logprobs[tok] - sample.per_token_p[t].logprobs[tok])
        .collect()
}

/// Token-weighted log-ratio with guided-distribution weights: a sum of
/// per-step KL divergences, hence non-negative.
pub fn score_log_ratio(sample: &GuidedSample) -> Result<f64> {
    check_alignment(sample)?;
    Ok(sample
        .per_token_q
        .iter()
        .zip(&sample.per_token_p)
        .map(|(q, p)| kl_step(q, p))
        .sum())
}

/// Weighted-difference score: per-step entropy reduction of the guided
/// distribution relative to the prior.
pub fn score_weighted_diff(sample: &GuidedSample) -> Result<f64> {
    check_alignment(sample)?;
    Ok(sample
        .per_token_q
        .iter()
        .zip(&sample.per_token_p)
        .map(|(q, p)| entropy_diff_step(q, p))
        .sum())
}

/// All three scores with their per-token contributions; each aggregate
/// is the sum of its vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub s_sequence: f64,
    pub s_log_ratio: f64,
    pub s_weighted_diff: f64,
    pub per_token_sequence: Vec<f64>,
    pub per_token_log_ratio: Vec<f64>,
    pub per_token_weighted_diff: Vec<f64>,
}

impl ScoreReport {
    pub fn compute(sample: &GuidedSample) -> Result<Self> {
        check_alignment(sample)?;
        let per_token_sequence = sequence_log_ratio_terms(sample);
        let per_token_log_ratio: Vec<f64> = sample
            .per_token_q
            .iter()
            .zip(&sample.per_token_p)
            .map(|(q, p)| kl_step(q, p))
            .collect();
        let per_token_weighted_diff: Vec<f64> = sample
            .per_token_q
            .iter()
            .zip(&sample.per_token_p)
            .map(|(q, p)| entropy_diff_step(q, p))
            .collect();
        Ok(ScoreReport {
            s_sequence: per_token_sequence.iter().sum(),
            s_log_ratio: per_token_log_ratio.iter().sum(),
            s_weighted_diff: per_token_weighted_diff.iter().sum(),
            per_token_sequence,
            per_token_log_ratio,
            per_token_weighted_diff,
        })
    }
}

/// One enumerated sequence with its guided-measure mass and scores.
#[derive(Debug, Clone)]
pub struct SequenceScore {
    pub tokens: Vec<usize>,
    pub q_mass: f64,
    pub p_mass: f64,
    pub s_sequence: f64,
    pub s_log_ratio: f64,
    pub s_weighted_diff: f64,
}

/// Enumeration guardrails: the oracle is for small vocabularies only.
const ENUM_MAX_VOCAB: usize = 13;
const ENUM_MAX_LEN: usize = 4;

/// Exhaustively enumerate every EOS-terminated sequence of length at
/// most `max_len`, with its probability under the guided distribution
/// and all three per-sequence scores.
pub fn enumerate_scored_sequences(
    params: &PolicyParams,
    obs: &Observation,
    guidance: Option<&GuidanceSignal>,
    max_len: usize,
    policy: &PolicyConfig,
) -> Result<Vec<SequenceScore>> {
    if params.vocab_size() > ENUM_MAX_VOCAB || max_len > ENUM_MAX_LEN {
        return Err(SvpError::Resource(format!(
            "enumeration limited to vocab <= {ENUM_MAX_VOCAB} and max_len <= {ENUM_MAX_LEN}, got {} and {max_len}",
            params.vocab_size()
        )));
    }
    let enum_policy = PolicyConfig {
        max_len,
        ..policy.clone()
    };
    let n = params.n_categories();
    let eos = n;
    let mut out = Vec::new();
    let mut history = vec![0u8; n];
    let mut prefix: Vec<usize> = Vec::new();

    #[allow(clippy::too_many_arguments)]
    fn walk(
        params: &PolicyParams,
        obs: &Observation,
        guidance: Option<&GuidanceSignal>,
        policy: &PolicyConfig,
        eos: usize,
        history: &mut Vec<u8>,
        prefix: &mut Vec<usize>,
        q_mass: f64,
        p_mass: f64,
        s4: f64,
        s5: f64,
        s6: f64,
        out: &mut Vec<SequenceScore>,
    ) -> Result<()> {
        let slot = prefix.len();
        let q = step_distribution(params, &obs.activations, history, guidance, slot, policy)?;
        let p = step_distribution(params, &obs.activations, history, None, slot, policy)?;
        let step_kl = kl_step(&q, &p);
        let step_ed = entropy_diff_step(&q, &p);
        for tok in 0..q.probs.len() {
            if q.probs[tok] <= 0.0 {
                continue;
            }
            let q_next = q_mass * q.probs[tok];
            let p_next = p_mass * p.probs[tok];
            let s4_next = s4 + (q.logprobs[tok] - p.logprobs[tok]);
            let s5_next = s5 + step_kl;
            let s6_next = s6 + step_ed;
            if tok == eos {
                let mut tokens = prefix.clone();
                tokens.push(eos);
                out.push(SequenceScore {
                    tokens,
                    q_mass: q_next,
                    p_mass: p_next,
                    s_sequence: s4_next,
                    s_log_ratio: s5_next,
                    s_weighted_diff: s6_next,
                });
            } else {
                prefix.push(tok);
                let prev = history[tok];
                history[tok] = 1;
                walk(
                    params, obs, guidance, policy, eos, history, prefix, q_next, p_next, s4_next,
                    s5_next, s6_next, out,
                )?;
                history[tok] = prev;
                prefix.pop();
            }
        }
        Ok(())
    }

    walk(
        params,
        obs,
        guidance,
        &enum_policy,
        eos,
        &mut history,
        &mut prefix,
        1.0,
        1.0,
        0.0,
        0.0,
        0.0,
        &mut out,
    )?;
    Ok(out)
}

/// Exact sequence-level `KL(q || p)` by full enumeration.
pub fn exact_sequence_kl(
    params: &PolicyParams,
    obs: &Observation,
    guidance: Option<&GuidanceSignal>,
    max_len: usize,
    policy: &PolicyConfig,
) -> Result<f64> {
    let sequences = enumerate_scored_sequences(params, obs, guidance, max_len, policy)?;
    Ok(sequences.iter().map(|s| s.q_mass * s.s_sequence).sum())
}

/// Entropy (nats) of the next-token distribution after `prefix`.
pub fn conditional_entropy(
    params: &PolicyParams,
    obs: &Observation,
    guidance: Option<&GuidanceSignal>,
    prefix: &[usize],
    policy: &PolicyConfig,
) -> Result<f64> {
    let n = params.n_categories();
    if prefix.len() >= policy.max_len {
        return Err(SvpError::InvalidInput(format!(
            "prefix length {} leaves no next slot under max_len {}",
            prefix.len(),
            policy.max_len
        )));
    }
    let mut history = vec![0u8; n];
    for &tok in prefix {
        if tok >= n {
            return Err(SvpError::InvalidInput(format!(
                "prefix token {tok} is not a category"
            )));
        }
        history[tok] = 1;
    }
    let dist = step_distribution(
        params,
        &obs.activations,
        &history,
        guidance,
        prefix.len(),
        policy,
    )?;
    Ok(dist.entropy())
}

/// Spearman rank correlation with average ranks on ties.
pub fn rank_correlation(scores_a: &[f64], scores_b: &[f64]) -> Result<f64> {
    if scores_a.len() != scores_b.len() {
        return Err(SvpError::InvalidInput(format!(
            "length mismatch {} vs {}",
            scores_a.len(),
            scores_b.len()
        )));
    }
    if scores_a.len() < 2 {
        return Err(SvpError::InvalidInput(
            "need at least two points for rank correlation".into(),
        ));
    }
    let ra = average_ranks(scores_a);
    let rb = average_ranks(scores_b);
    pearson(&ra, &rb)
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // 1-based ranks averaged across the tie group.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(SvpError::InvalidInput(
            "rank correlation undefined for constant input".into(),
        ));
    }
    Ok(cov / (vx * vy).sqrt())
}
