//! Outer-loop adaptation on curated samples.
//!
//! The objective is the per-scene mean log-likelihood of the selected
//! guided trajectories under the prior (guidance-free) policy, averaged
//! over scenes and negated into a loss. Its gradient is computed along
//! two routes that are algebraically identical — a re-weighted
//! maximum-likelihood accumulation and a truncated importance-sampling
//! accumulation with the ratio treated as constant — and the report
//! carries both so their agreement is checkable to machine precision.
//! A preference-pair learner over the same samples serves as baseline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::policy::{
    self, PolicyConfig, PolicyParams, Trajectory,
};
use crate::sampler::SampleBatch;
use crate::scoring::ScoreReport;
use crate::selection::{CuratedRecord, ScoreChoice};
use crate::world::Observation;
use crate::{par, Result, SvpError};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptConfig {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dpo_beta")]
    pub dpo_beta: f64,
    #[serde(default = "default_dpo_steps")]
    pub dpo_steps: usize,
    #[serde(default = "default_dpo_learning_rate")]
    pub dpo_learning_rate: f64,
}

fn default_learning_rate() -> f64 {
    0.1
}
fn default_epochs() -> usize {
    1
}
fn default_batch_size() -> usize {
    16
}
fn default_dpo_beta() -> f64 {
    1.0
}
fn default_dpo_steps() -> usize {
    100
}
fn default_dpo_learning_rate() -> f64 {
    0.05
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            learning_rate: default_learning_rate(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed: 0,
            dpo_beta: default_dpo_beta(),
            dpo_steps: default_dpo_steps(),
            dpo_learning_rate: default_dpo_learning_rate(),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(SvpError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(SvpError::Config("batch_size must be >= 1".into()));
        }
        if !(self.dpo_beta > 0.0 && self.dpo_learning_rate > 0.0) {
            return Err(SvpError::Config("preference learner rates must be positive".into()));
        }
        Ok(())
    }
}

/// Gradient of `log p(trajectory | observation)` in flat layout.
///
/// For the log-linear softmax each free step contributes
/// `(onehot(token) - p)` on `u`, the same error pattern times the active
/// observation bits on `W`, and times the history bits on `A`. The
/// deterministic final slot contributes nothing.
fn accumulate_grad_logprob(
    grad: &mut [f64],
    params: &PolicyParams,
    obs: &Observation,
    trajectory: &Trajectory,
    policy_cfg: &PolicyConfig,
    weight: f64,
) -> Result<()> {
    let v = params.vocab_size();
    let n = params.n_categories();
    let dists = policy::evaluate_distributions(params, obs, &trajectory.tokens, None, policy_cfg)?;
    let mut history = vec![0u8; n];
    for (slot, (&token, dist)) in trajectory.tokens.iter().zip(&dists).enumerate() {
        let terminal_slot = slot + 1 >= policy_cfg.max_len;
        if !terminal_slot {
            for tok in 0..v {
                let err = f64::from(u8::from(tok == token)) - dist.probs[tok];
                // Temperature scales every logit, so it scales the
                // gradient of each logit-level parameter uniformly.
                let g = weight * err / policy_cfg.temperature;
                grad[tok] += g;
                let w_base = v + tok * n;
                let a_base = v + v * n + tok * n;
                for c in 0..n {
                    if obs.activations[c] == 1 {
                        grad[w_base + c] += g;
                    }
                    if history[c] == 1 {
                        grad[a_base + c] += g;
                    }
                }
            }
        }
        if token < n {
            history[token] = 1;
        }
    }
    Ok(())
}

fn group_by_scene(records: &[CuratedRecord]) -> BTreeMap<u64, Vec<&CuratedRecord>> {
    let mut groups: BTreeMap<u64, Vec<&CuratedRecord>> = BTreeMap::new();
    for record in records {
        groups.entry(record.scene_id).or_default().push(record);
    }
    groups
}

/// Loss over the curated records: negative mean over scenes of the
/// per-scene mean trajectory log-likelihood. Fails on an empty slice
/// (a scene group with nothing selected is skipped upstream).
pub fn svp_loss(
    params: &PolicyParams,
    records: &[CuratedRecord],
    policy_cfg: &PolicyConfig,
) -> Result<f64> {
    let groups = group_by_scene(records);
    if groups.is_empty() {
        return Err(SvpError::InvalidInput(
            "loss undefined over zero scenes with selected samples".into(),
        ));
    }
    let mut total = 0.0;
    for group in groups.values() {
        let mut scene_sum = 0.0;
        for record in group {
            let (logprob, _) = policy::trajectory_logprob(
                params,
                &record.observation,
                &record.trajectory,
                None,
                policy_cfg,
            )?;
            scene_sum += logprob;
        }
        total += scene_sum / group.len() as f64;
    }
    Ok(-total / groups.len() as f64)
}

/// Which derivation route computes the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientForm {
    /// Re-weighted maximum likelihood: per-scene means, then the scene mean.
    Mle,
    /// Off-policy form with the importance ratio held constant: one flat
    /// weighted pass over the records.
    RlOff,
}

/// Gradient of [`svp_loss`] in flat parameter layout.
pub fn svp_gradient(
    params: &PolicyParams,
    records: &[CuratedRecord],
    policy_cfg: &PolicyConfig,
    form: GradientForm,
) -> Result<Vec<f64>> {
    let dim = params.dim();
    let groups = group_by_scene(records);
    if groups.is_empty() {
        return Ok(vec![0.0; dim]);
    }
    let n_scenes = groups.len() as f64;
    match form {
        GradientForm::Mle => {
            let mut grad = vec![0.0; dim];
            for group in groups.values() {
                let mut scene_grad = vec![0.0; dim];
                for record in group {
                    accumulate_grad_logprob(
                        &mut scene_grad,
                        params,
                        &record.observation,
                        &record.trajectory,
                        policy_cfg,
                        1.0,
                    )?;
                }
                let scale = 1.0 / group.len() as f64;
                for (g, s) in grad.iter_mut().zip(&scene_grad) {
                    *g += s * scale;
                }
            }
            for g in &mut grad {
                *g = -*g / n_scenes;
            }
            Ok(grad)
        }
        GradientForm::RlOff => {
            let sizes: BTreeMap<u64, usize> =
                groups.iter().map(|(id, g)| (*id, g.len())).collect();
            let mut grad = vec![0.0; dim];
            for record in records {
                let weight = -1.0 / (n_scenes * sizes[&record.scene_id] as f64);
                accumulate_grad_logprob(
                    &mut grad,
                    params,
                    &record.observation,
                    &record.trajectory,
                    policy_cfg,
                    weight,
                )?;
            }
            Ok(grad)
        }
    }
}

/// Both gradient routes plus their maximum coordinate-wise gap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientReport {
    pub grad_mle: Vec<f64>,
    pub grad_rloff: Vec<f64>,
    pub max_abs_diff: f64,
    pub fd_rel_err: Option<f64>,
}

pub fn svp_gradient_report(
    params: &PolicyParams,
    records: &[CuratedRecord],
    policy_cfg: &PolicyConfig,
) -> Result<GradientReport> {
    let grad_mle = svp_gradient(params, records, policy_cfg, GradientForm::Mle)?;
    let grad_rloff = svp_gradient(params, records, policy_cfg, GradientForm::RlOff)?;
    let max_abs_diff = grad_mle
        .iter()
        .zip(&grad_rloff)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(GradientReport {
        grad_mle,
        grad_rloff,
        max_abs_diff,
        fd_rel_err: None,
    })
}

/// Central finite differences of an arbitrary scalar function of the
/// parameters; the independent check for every analytic gradient here.
pub fn finite_difference_gradient<F>(params: &PolicyParams, mut f: F, h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&PolicyParams) -> Result<f64>,
{
    let flat = params.flatten();
    let v = params.vocab_size();
    let mut grad = Vec::with_capacity(flat.len());
    for i in 0..flat.len() {
        let mut plus = flat.clone();
        plus[i] += h;
        let mut minus = flat.clone();
        minus[i] -= h;
        let fp = f(&PolicyParams::from_flat(&plus, v)?)?;
        let fm = f(&PolicyParams::from_flat(&minus, v)?)?;
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// Max-norm relative disagreement between two gradients.
pub fn gradient_rel_err(analytic: &[f64], other: &[f64]) -> f64 {
    let max_gap = analytic
        .iter()
        .zip(other)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = analytic.iter().map(|a| a.abs()).fold(0.0, f64::max);
    max_gap / scale.max(1e-12)
}

/// One gradient-descent step; parameters are immutable values.
pub fn sgd_step(params: &PolicyParams, gradient: &[f64], learning_rate: f64) -> Result<PolicyParams> {
    if gradient.len() != params.dim() {
        return Err(SvpError::InvalidInput(format!(
            "gradient length {} does not match parameter count {}",
            gradient.len(),
            params.dim()
        )));
    }
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(SvpError::Numeric("non-finite gradient".into()));
    }
    let flat: Vec<f64> = params
        .flatten()
        .iter()
        .zip(gradient)
        .map(|(p, g)| p - learning_rate * g)
        .collect();
    PolicyParams::from_flat(&flat, params.vocab_size())
}

/// One point on a training curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

pub fn curve_to_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("step,loss,grad_norm\n");
    for p in curve {
        out.push_str(&format!("{},{},{}\n", p.step, p.loss, p.grad_norm));
    }
    out
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Mini-batch gradient descent over scene groups in ascending scene-id
/// order, `epochs` passes, batches of `batch_size` scenes.
pub fn train_svp(
    params: &PolicyParams,
    records: &[CuratedRecord],
    adapt: &AdaptConfig,
    policy_cfg: &PolicyConfig,
) -> Result<(PolicyParams, Vec<CurvePoint>)> {
    adapt.validate()?;
    let mut current = params.clone();
    let mut curve = Vec::new();
    if records.is_empty() {
        return Ok((current, curve));
    }
    let scene_ids: Vec<u64> = group_by_scene(records).into_keys().collect();
    let mut step = 0;
    for _ in 0..adapt.epochs {
        for chunk in scene_ids.chunks(adapt.batch_size) {
            let batch: Vec<CuratedRecord> = records
                .iter()
                .filter(|r| chunk.contains(&r.scene_id))
                .cloned()
                .collect();
            let loss = svp_loss(&current, &batch, policy_cfg)?;
            let grad = svp_gradient(&current, &batch, policy_cfg, GradientForm::Mle)?;
            curve.push(CurvePoint {
                step,
                loss,
                grad_norm: l2_norm(&grad),
            });
            current = sgd_step(&current, &grad, adapt.learning_rate)?;
            step += 1;
        }
    }
    Ok((current, curve))
}

/// A winner/loser trajectory pair for the preference-learning baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub scene_id: u64,
    pub winner: Trajectory,
    pub loser: Trajectory,
    pub observation: Observation,
}

/// Per scene: pair the best-scored surviving sample against the worst.
/// Scenes with fewer than two survivors, or with the top and bottom
/// scores tied, are skipped. The pair is conditioned on the winner's
/// observation.
pub fn build_preference_pairs(
    batches: &[SampleBatch],
    vocab: &crate::policy::Vocabulary,
    score_choice: ScoreChoice,
) -> Result<Vec<PreferencePair>> {
    let mut pairs = Vec::new();
    for batch in batches {
        let survivors = crate::selection::filter_degenerate(&batch.samples, vocab);
        if survivors.len() < 2 {
            continue;
        }
        let mut scored: Vec<(f64, &crate::sampler::GuidedSample)> = Vec::new();
        for s in survivors {
            let report = ScoreReport::compute(s)?;
            scored.push((score_choice.pick(&report), s));
        }
        let mut order: Vec<usize> = (0..scored.len()).collect();
        order.sort_by(|&a, &b| {
            scored[b]
                .0
                .partial_cmp(&scored[a].0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let (top_score, top) = scored[order[0]];
        let (bottom_score, bottom) = scored[*order.last().unwrap()];
        if top_score <= bottom_score {
            continue;
        }
        pairs.push(PreferencePair {
            scene_id: batch.scene_id,
            winner: top.guided_trajectory.clone(),
            loser: bottom.guided_trajectory.clone(),
            observation: top.guided_observation.clone(),
        });
    }
    Ok(pairs)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn pair_margin(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    pair: &PreferencePair,
    policy_cfg: &PolicyConfig,
) -> Result<f64> {
    let lp = |p: &PolicyParams, t: &Trajectory| -> Result<f64> {
        Ok(policy::trajectory_logprob(p, &pair.observation, t, None, policy_cfg)?.0)
    };
    let r_w = lp(params, &pair.winner)? - lp(ref_params, &pair.winner)?;
    let r_l = lp(params, &pair.loser)? - lp(ref_params, &pair.loser)?;
    Ok(r_w - r_l)
}

/// Preference loss: mean over pairs of `-log sigmoid(beta * margin)`,
/// where the margin is the winner-minus-loser log-probability ratio
/// against the frozen reference policy.
pub fn dpo_loss(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    pairs: &[PreferencePair],
    beta: f64,
    policy_cfg: &PolicyConfig,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(SvpError::InvalidInput("no preference pairs".into()));
    }
    let losses = par::try_map_indexed(pairs.len(), |i| -> Result<f64> {
        let margin = pair_margin(params, ref_params, &pairs[i], policy_cfg)?;
        Ok(-(sigmoid(beta * margin).ln()))
    })?;
    Ok(losses.iter().sum::<f64>() / pairs.len() as f64)
}

/// Analytic gradient of [`dpo_loss`]: each pair contributes
/// `-beta * (1 - sigmoid(beta * margin))` times the winner-minus-loser
/// log-probability gradient, averaged over pairs.
pub fn dpo_gradient(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    pairs: &[PreferencePair],
    beta: f64,
    policy_cfg: &PolicyConfig,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(SvpError::InvalidInput("no preference pairs".into()));
    }
    let mut grad = vec![0.0; params.dim()];
    let scale = 1.0 / pairs.len() as f64;
    for pair in pairs {
        let margin = pair_margin(params, ref_params, pair, policy_cfg)?;
        let coeff = -beta * (1.0 - sigmoid(beta * margin)) * scale;
        accumulate_grad_logprob(&mut grad, params, &pair.observation, &pair.winner, policy_cfg, coeff)?;
        accumulate_grad_logprob(&mut grad, params, &pair.observation, &pair.loser, policy_cfg, -coeff)?;
    }
    Ok(grad)
}

/// Fraction of pairs where the policy prefers the winner over the
/// reference-adjusted loser.
pub fn dpo_pair_accuracy(
    params: &PolicyParams,
    ref_params: &PolicyParams,
    pairs: &[PreferencePair],
    policy_cfg: &PolicyConfig,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(SvpError::InvalidInput("no preference pairs".into()));
    }
    let mut correct = 0usize;
    for pair in pairs {
        if pair_margin(params, ref_params, pair, policy_cfg)? > 0.0 {
            correct += 1;
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}

/// Full-batch gradient descent on the preference loss against a frozen
/// snapshot of the starting parameters.
pub fn train_dpo(
    params: &PolicyParams,
    pairs: &[PreferencePair],
    adapt: &AdaptConfig,
    policy_cfg: &PolicyConfig,
) -> Result<(PolicyParams, Vec<CurvePoint>)> {
    adapt.validate()?;
    let reference = params.clone();
    let mut current = params.clone();
    let mut curve = Vec::new();
    if pairs.is_empty() {
        return Ok((current, curve));
    }
    for step in 0..adapt.dpo_steps {
        let loss = dpo_loss(&current, &reference, pairs, adapt.dpo_beta, policy_cfg)?;
        let grad = dpo_gradient(&current, &reference, pairs, adapt.dpo_beta, policy_cfg)?;
        curve.push(CurvePoint {
            step,
            loss,
            grad_norm: l2_norm(&grad),
        });
        current = sgd_step(&current, &grad, adapt.dpo_learning_rate)?;
    }
    Ok((current, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Vocabulary;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::with_categories(vec!["a", "b", "c", "d"])
    }

    fn random_record<R: Rng>(scene_id: u64, rng: &mut R, n: usize, max_len: usize) -> CuratedRecord {
        let eos = n;
        let len = rng.gen_range(1..max_len);
        let mut tokens: Vec<usize> = (0..len - 1).map(|_| rng.gen_range(0..n)).collect();
        tokens.push(eos);
        CuratedRecord {
            scene_id,
            observation: Observation {
                activations: (0..n).map(|_| u8::from(rng.gen_bool(0.5))).collect(),
                guided: true,
            },
            trajectory: Trajectory {
                token_logprobs: vec![0.0; tokens.len()],
                tokens,
            },
            score: rng.gen(),
        }
    }

    fn random_instance(seed: u64, scenes: u64) -> (PolicyParams, Vec<CuratedRecord>, PolicyConfig) {
        let v = vocab();
        let params = PolicyParams::init(&v, seed);
        let mut rng = crate::rng::rng_from_seed(seed);
        let policy_cfg = PolicyConfig {
            max_len: 5,
            ..PolicyConfig::default()
        };
        let mut records = Vec::new();
        for scene in 0..scenes {
            for _ in 0..rng.gen_range(1..4) {
                records.push(random_record(scene, &mut rng, v.n_categories(), policy_cfg.max_len));
            }
        }
        (params, records, policy_cfg)
    }

    #[test]
    fn loss_of_single_record_is_negative_logprob() {
        let (params, records, cfg) = random_instance(3, 1);
        let single = &records[..1];
        let (lp, _) = policy::trajectory_logprob(
            &params,
            &single[0].observation,
            &single[0].trajectory,
            None,
            &cfg,
        )
        .unwrap();
        assert_abs_diff_eq!(svp_loss(&params, single, &cfg).unwrap(), -lp, epsilon = 1e-15);
    }

    #[test]
    fn duplicating_records_leaves_loss_unchanged() {
        let (params, records, cfg) = random_instance(5, 3);
        let base = svp_loss(&params, &records, &cfg).unwrap();
        let mut doubled = records.clone();
        doubled.extend(records.iter().cloned());
        let dup = svp_loss(&params, &doubled, &cfg).unwrap();
        assert_abs_diff_eq!(base, dup, epsilon = 1e-12);
    }

    #[test]
    fn empty_dataset_loss_is_an_error_but_gradient_is_zero() {
        let (params, _, cfg) = random_instance(7, 1);
        assert!(svp_loss(&params, &[], &cfg).is_err());
        let grad = svp_gradient(&params, &[], &cfg, GradientForm::Mle).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn gradient_forms_agree_to_machine_precision() {
        for seed in 0..10 {
            let (params, records, cfg) = random_instance(seed, 4);
            let report = svp_gradient_report(&params, &records, &cfg).unwrap();
            assert!(
                report.max_abs_diff < 1e-12,
                "forms disagree by {}",
                report.max_abs_diff
            );
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let (params, records, cfg) = random_instance(11, 3);
        let analytic = svp_gradient(&params, &records, &cfg, GradientForm::Mle).unwrap();
        let fd = finite_difference_gradient(&params, |p| svp_loss(p, &records, &cfg), 1e-5).unwrap();
        let err = gradient_rel_err(&analytic, &fd);
        assert!(err < 1e-5, "finite-difference mismatch {err}");
    }

    #[test]
    fn gradient_ignores_unselected_samples_bit_for_bit() {
        let (params, records, cfg) = random_instance(13, 3);
        let g1 = svp_gradient(&params, &records, &cfg, GradientForm::Mle).unwrap();
        // Anything not in the record list cannot influence the gradient;
        // recompute after shuffling unrelated state.
        let g2 = svp_gradient(&params, &records.clone(), &cfg, GradientForm::Mle).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let (params, records, cfg) = random_instance(17, 2);
        let grad = svp_gradient(&params, &records, &cfg, GradientForm::Mle).unwrap();
        let stepped = sgd_step(&params, &grad, 0.0).unwrap();
        assert_eq!(stepped, params);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let (params, _, _) = random_instance(19, 1);
        let mut grad = vec![0.0; params.dim()];
        grad[0] = f64::NAN;
        assert!(sgd_step(&params, &grad, 0.1).is_err());
    }

    #[test]
    fn small_enough_step_decreases_loss() {
        let (params, records, cfg) = random_instance(23, 1);
        let single = &records[..1];
        let base = svp_loss(&params, single, &cfg).unwrap();
        let grad = svp_gradient(&params, single, &cfg, GradientForm::Mle).unwrap();
        let mut alpha = 0.5;
        loop {
            let stepped = sgd_step(&params, &grad, alpha).unwrap();
            let loss = svp_loss(&stepped, single, &cfg).unwrap();
            if loss < base {
                break;
            }
            alpha /= 2.0;
            assert!(alpha > 1e-12, "no descent even at vanishing step size");
        }
    }

    #[test]
    fn two_steps_with_fixed_gradient_compose_linearly() {
        let (params, records, cfg) = random_instance(29, 2);
        let grad = svp_gradient(&params, &records, &cfg, GradientForm::Mle).unwrap();
        let twice = sgd_step(&sgd_step(&params, &grad, 0.1).unwrap(), &grad, 0.1).unwrap();
        let summed: Vec<f64> = grad.iter().map(|g| 2.0 * g).collect();
        let once = sgd_step(&params, &summed, 0.1).unwrap();
        for (a, b) in twice.flatten().iter().zip(once.flatten()) {
            assert_abs_diff_eq!(a, &b, epsilon = 1e-12);
        }
    }

    fn pair_fixture(seed: u64) -> (PolicyParams, Vec<PreferencePair>, PolicyConfig) {
        let v = vocab();
        let params = PolicyParams::init(&v, seed);
        let cfg = PolicyConfig {
            max_len: 5,
            ..PolicyConfig::default()
        };
        let mut rng = crate::rng::rng_from_seed(seed);
        let pairs: Vec<PreferencePair> = (0..6)
            .map(|scene| {
                let w = random_record(scene, &mut rng, 4, cfg.max_len);
                let l = random_record(scene, &mut rng, 4, cfg.max_len);
                PreferencePair {
                    scene_id: scene,
                    winner: w.trajectory,
                    loser: l.trajectory,
                    observation: w.observation,
                }
            })
            .collect();
        (params, pairs, cfg)
    }

    #[test]
    fn dpo_loss_at_reference_is_ln_two() {
        let (params, pairs, cfg) = pair_fixture(31);
        let loss = dpo_loss(&params, &params, &pairs, 1.0, &cfg).unwrap();
        assert_abs_diff_eq!(loss, 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn dpo_loss_vanishes_for_huge_margins() {
        let v = vocab();
        let params = PolicyParams::zeros(&v);
        let cfg = PolicyConfig {
            max_len: 5,
            ..PolicyConfig::default()
        };
        let eos = v.eos();
        let pair = PreferencePair {
            scene_id: 0,
            winner: Trajectory {
                tokens: vec![eos],
                token_logprobs: vec![0.0],
            },
            loser: Trajectory {
                tokens: vec![0, eos],
                token_logprobs: vec![0.0, 0.0],
            },
            observation: Observation {
                activations: vec![0; 4],
                guided: true,
            },
        };
        // Strongly preferring EOS makes the winner near-certain and the
        // loser's first token near-impossible.
        let mut tuned = params.clone();
        tuned.u[eos] += 40.0;
        let loss = dpo_loss(&tuned, &params, &[pair], 1.0, &cfg).unwrap();
        assert!(loss < 1e-3, "loss {loss} should approach zero");
    }

    #[test]
    fn dpo_gradient_weight_at_zero_margin_is_half() {
        assert_abs_diff_eq!(1.0 - sigmoid(0.0), 0.5);
        assert_abs_diff_eq!(sigmoid(0.0) * (1.0 - sigmoid(0.0)), 0.25);
        // sigma(-z) = 1 - sigma(z): flipping the margin flips the weight.
        for z in [-2.0, -0.3, 0.7, 3.1] {
            assert_abs_diff_eq!(sigmoid(-z), 1.0 - sigmoid(z), epsilon = 1e-12);
        }
    }

    #[test]
    fn dpo_gradient_matches_finite_differences() {
        let (params, pairs, cfg) = pair_fixture(41);
        let analytic = dpo_gradient(&params, &params, &pairs, 1.0, &cfg).unwrap();
        let reference = params.clone();
        let fd = finite_difference_gradient(
            &params,
            |p| dpo_loss(p, &reference, &pairs, 1.0, &cfg),
            1e-5,
        )
        .unwrap();
        let err = gradient_rel_err(&analytic, &fd);
        assert!(err < 1e-5, "finite-difference mismatch {err}");
    }

    #[test]
    fn identical_pair_has_zero_gradient() {
        let (params, pairs, cfg) = pair_fixture(43);
        let degenerate = vec![PreferencePair {
            scene_id: 0,
            winner: pairs[0].winner.clone(),
            loser: pairs[0].winner.clone(),
            observation: pairs[0].observation.clone(),
        }];
        let grad = dpo_gradient(&params, &params, &degenerate, 1.0, &cfg).unwrap();
        assert!(grad.iter().all(|&g| g.abs() < 1e-15));
    }

    #[test]
    fn dpo_training_decreases_loss_and_ranks_pairs() {
        let (params, pairs, cfg) = pair_fixture(47);
        let adapt = AdaptConfig {
            dpo_steps: 50,
            ..AdaptConfig::default()
        };
        let (tuned, curve) = train_dpo(&params, &pairs, &adapt, &cfg).unwrap();
        assert!(curve.windows(2).all(|w| w[1].loss < w[0].loss));
        let acc = dpo_pair_accuracy(&tuned, &params, &pairs, &cfg).unwrap();
        assert!(acc > 0.5);
    }
}
