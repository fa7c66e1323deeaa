//! Held-out evaluation: recall, hallucination, entropy and grounded-object
//! statistics.
//!
//! Mentions are treated as category sets. A policy is evaluated either in
//! plain mode (caption sampled from the prior) or in guided
//! inference mode (draft → grounding → guided caption, no parameter
//! change). Both modes share observation and caption streams, so with
//! zero guidance gain and equal visibilities they produce identical rows.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::policy::{self, TokenDistribution};
use crate::rng::{self, domain};
use crate::sampler::{Backend, GuidedSample, PipelineConfig, SampleCtx};
use crate::world::{self, Scene};
use crate::{par, Result, SvpError};

/// Fraction of the scene's categories that are mentioned.
pub fn object_recall(mentions: &BTreeSet<String>, scene: &Scene) -> f64 {
    let scene_cats: BTreeSet<&str> = scene.objects.iter().map(|o| o.category.as_str()).collect();
    if scene_cats.is_empty() {
        return 0.0;
    }
    let hit = scene_cats
        .iter()
        .filter(|c| mentions.contains(**c))
        .count();
    hit as f64 / scene_cats.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HallucinationStats {
    pub hallucination_rate: f64,
    pub precision: f64,
    pub f1: f64,
    /// Set when there were no mentions at all; the rate is then 0 by
    /// convention and precision 0.
    pub empty_mentions: bool,
}

/// Hallucination rate (mentions absent from the scene over all mentions),
/// the complementary precision, and F1 against object recall.
pub fn hallucination_stats(mentions: &BTreeSet<String>, scene: &Scene) -> HallucinationStats {
    let recall = object_recall(mentions, scene);
    if mentions.is_empty() {
        return HallucinationStats {
            hallucination_rate: 0.0,
            precision: 0.0,
            f1: 0.0,
            empty_mentions: true,
        };
    }
    let scene_cats: BTreeSet<&str> = scene.objects.iter().map(|o| o.category.as_str()).collect();
    let hallucinated = mentions
        .iter()
        .filter(|m| !scene_cats.contains(m.as_str()))
        .count();
    let rate = hallucinated as f64 / mentions.len() as f64;
    let precision = 1.0 - rate;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    HallucinationStats {
        hallucination_rate: rate,
        precision,
        f1,
        empty_mentions: false,
    }
}

/// Histograms of grounded-object counts per caption, for the prior and
/// guided sides of each sample.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroundedHistogram {
    pub prior: BTreeMap<usize, u64>,
    pub guided: BTreeMap<usize, u64>,
}

impl GroundedHistogram {
    pub fn total(&self, guided: bool) -> u64 {
        let side = if guided { &self.guided } else { &self.prior };
        side.values().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("side,count,frequency\n");
        for (count, freq) in &self.prior {
            out.push_str(&format!("prior,{count},{freq}\n"));
        }
        for (count, freq) in &self.guided {
            out.push_str(&format!("guided,{count},{freq}\n"));
        }
        out
    }
}

/// Count grounded objects (post-NMS detections) per caption on both sides.
pub fn grounded_histogram(samples: &[GuidedSample]) -> GroundedHistogram {
    let mut hist = GroundedHistogram::default();
    for sample in samples {
        *hist
            .prior
            .entry(sample.grounding.detections.len())
            .or_insert(0) += 1;
        *hist
            .guided
            .entry(sample.guided_grounding.detections.len())
            .or_insert(0) += 1;
    }
    hist
}

/// Evaluation mode: caption from the prior, or from guided inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Prior,
    Isvp,
}

impl std::str::FromStr for EvalMode {
    type Err = SvpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prior" => Ok(EvalMode::Prior),
            "isvp" => Ok(EvalMode::Isvp),
            other => Err(SvpError::Config(format!(
                "unknown eval mode {other:?} (expected prior or isvp)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub recall: f64,
    pub hallucination_rate: f64,
    pub precision: f64,
    pub f1: f64,
    pub mean_mentions: f64,
    pub mean_grounded: f64,
    pub mean_entropy_prior: f64,
    pub mean_entropy_guided: f64,
}

pub fn metrics_csv_header() -> &'static str {
    "iteration,recall,hallucination_rate,precision,f1,mean_entropy_prior,mean_entropy_guided\n"
}

pub fn metrics_row_to_csv(row: &MetricsRow) -> String {
    format!(
        "{},{},{},{},{},{},{}\n",
        row.iteration,
        row.recall,
        row.hallucination_rate,
        row.precision,
        row.f1,
        row.mean_entropy_prior,
        row.mean_entropy_guided
    )
}

struct SceneEval {
    recall: f64,
    hallucination_rate: f64,
    precision: f64,
    mentions: f64,
    grounded: f64,
    entropy_prior_sum: f64,
    entropy_guided_sum: f64,
    entropy_steps: usize,
}

fn mean_entropy_free_slots(dists: &[TokenDistribution], max_len: usize) -> (f64, usize) {
    let free = dists.len().min(max_len.saturating_sub(1));
    let sum = dists[..free].iter().map(TokenDistribution::entropy).sum();
    (sum, free)
}

fn evaluate_scene(
    backend: &dyn Backend,
    scene: &Scene,
    config: &PipelineConfig,
    mode: EvalMode,
    master_seed: u64,
    iteration: usize,
    draw: u64,
) -> Result<SceneEval> {
    let caption_seed = rng::derive_seed(
        master_seed,
        &[domain::EVAL_CAPTION, iteration as u64, scene.id, draw],
    );
    let (caption, generating_dists, grounding) = match mode {
        EvalMode::Prior => {
            let obs = world::observe(scene, &config.world, false, draw);
            let generated = backend.generate(&obs, None, caption_seed)?;
            let p_dists =
                backend.eval_distributions(&obs, None, &generated.trajectory.tokens)?;
            (generated.trajectory, (p_dists, generated.dists), None)
        }
        EvalMode::Isvp => {
            let prior_seed = rng::derive_seed(
                master_seed,
                &[domain::EVAL_PRIOR, iteration as u64, scene.id, draw],
            );
            let obs_prior = world::observe(scene, &config.world, false, draw);
            let draft = backend.generate(&obs_prior, None, prior_seed)?;
            let draft_text = policy::decode(&draft.trajectory, &config.vocab);
            let detections = backend.ground(&draft_text, scene.id)?;
            let unmatched = crate::sampler::unmatched_from(
                &draft.trajectory.mentions(&config.vocab),
                &detections,
                &config.vocab,
            );
            let grounding = crate::grounder::GroundingSet {
                detections,
                unmatched_mentions: unmatched,
            };
            let obs_guided = world::observe(scene, &config.world, true, draw);
            let generated = backend.generate(&obs_guided, Some(&grounding), caption_seed)?;
            let p_dists =
                backend.eval_distributions(&obs_guided, None, &generated.trajectory.tokens)?;
            (generated.trajectory, (p_dists, generated.dists), Some(grounding))
        }
    };
    let _ = grounding;
    let (p_dists, g_dists) = generating_dists;
    let mentions: BTreeSet<String> = caption
        .mentions(&config.vocab)
        .into_iter()
        .filter_map(|t| config.vocab.category_name(t).map(str::to_string))
        .collect();
    let recall = object_recall(&mentions, scene);
    let stats = hallucination_stats(&mentions, scene);
    let caption_text = policy::decode(&caption, &config.vocab);
    let caption_detections = backend.ground(&caption_text, scene.id)?;
    let (entropy_prior_sum, steps_p) = mean_entropy_free_slots(&p_dists, config.policy.max_len);
    let (entropy_guided_sum, steps_g) = mean_entropy_free_slots(&g_dists, config.policy.max_len);
    debug_assert_eq!(steps_p, steps_g);
    Ok(SceneEval {
        recall,
        hallucination_rate: stats.hallucination_rate,
        precision: stats.precision,
        mentions: mentions.len() as f64,
        grounded: caption_detections.len() as f64,
        entropy_prior_sum,
        entropy_guided_sum,
        entropy_steps: steps_p,
    })
}

/// Evaluate a policy over a contiguous range of held-out scenes.
///
/// Rates are macro-averaged over scene-draw pairs; F1 is computed from
/// the averaged precision and recall. Entropies are averaged over the
/// caption's free decoding steps, with the prior side re-evaluated on
/// the caption's own prefixes so the comparison is matched.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_policy(
    backend: &dyn Backend,
    config: &PipelineConfig,
    scene_range: std::ops::Range<u64>,
    n_draws: usize,
    mode: EvalMode,
    master_seed: u64,
    iteration: usize,
) -> Result<MetricsRow> {
    if n_draws == 0 {
        return Err(SvpError::InvalidInput("n_draws must be >= 1".into()));
    }
    let scene_ids: Vec<u64> = scene_range.collect();
    if scene_ids.is_empty() {
        return Err(SvpError::InvalidInput("empty evaluation scene range".into()));
    }
    let evals: Vec<Vec<SceneEval>> = par::try_map_indexed(scene_ids.len(), |i| {
        let scene = world::generate_scene(&config.world, scene_ids[i])?;
        (0..n_draws as u64)
            .map(|draw| {
                evaluate_scene(backend, &scene, config, mode, master_seed, iteration, draw)
            })
            .collect::<Result<Vec<SceneEval>>>()
    })?;
    let flat: Vec<&SceneEval> = evals.iter().flatten().collect();
    let n = flat.len() as f64;
    let recall = flat.iter().map(|e| e.recall).sum::<f64>() / n;
    let hallucination_rate = flat.iter().map(|e| e.hallucination_rate).sum::<f64>() / n;
    let precision = flat.iter().map(|e| e.precision).sum::<f64>() / n;
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let mean_mentions = flat.iter().map(|e| e.mentions).sum::<f64>() / n;
    let mean_grounded = flat.iter().map(|e| e.grounded).sum::<f64>() / n;
    let total_steps: usize = flat.iter().map(|e| e.entropy_steps).sum();
    let (mean_entropy_prior, mean_entropy_guided) = if total_steps == 0 {
        (0.0, 0.0)
    } else {
        (
            flat.iter().map(|e| e.entropy_prior_sum).sum::<f64>() / total_steps as f64,
            flat.iter().map(|e| e.entropy_guided_sum).sum::<f64>() / total_steps as f64,
        )
    };
    Ok(MetricsRow {
        iteration,
        recall,
        hallucination_rate,
        precision,
        f1,
        mean_mentions,
        mean_grounded,
        mean_entropy_prior,
        mean_entropy_guided,
    })
}

/// Convenience for tests: run the sampling inner loop for one scene
/// purely to collect guided samples for histogram-style statistics.
pub fn collect_samples(
    backend: &dyn Backend,
    config: &PipelineConfig,
    scene_range: std::ops::Range<u64>,
    k: usize,
    ctx: &SampleCtx,
) -> Result<Vec<GuidedSample>> {
    let scene_ids: Vec<u64> = scene_range.collect();
    let batches = par::try_map_indexed(scene_ids.len(), |i| {
        let scene = world::generate_scene(&config.world, scene_ids[i])?;
        crate::sampler::sample_batch(backend, &scene, k, config, ctx)
    })?;
    Ok(batches.into_iter().flat_map(|b| b.samples).collect())
}
