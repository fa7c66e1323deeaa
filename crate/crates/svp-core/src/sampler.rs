//! Inner sampling loop: prior draw, grounding feedback, guided draw.
//!
//! Every policy and grounder interaction goes through the [`Backend`]
//! trait with caller-derived seeds. The in-process backend calls the toy
//! implementations directly; a remote backend can forward the same calls
//! over a wire protocol and, because all randomness is seed-derived,
//! produce bit-identical samples.

use serde::{Deserialize, Serialize};

use crate::grounder::{self, Detection, GrounderConfig, GroundingSet};
use crate::policy::{
    self, GuidanceSignal, PolicyConfig, PolicyParams, TokenDistribution, Trajectory, Vocabulary,
};
use crate::rng::{self, domain};
use crate::world::{self, Observation, Scene, WorldConfig};
use crate::{par, Result, SvpError};

/// One generation call: the trajectory plus its generating distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSequence {
    pub trajectory: Trajectory,
    pub dists: Vec<TokenDistribution>,
}

/// Generation and grounding services the loop drives.
///
/// Implementations must be deterministic functions of their arguments:
/// a given `(observation, grounding, seed)` always yields the same
/// sequence, and grounding depends only on `(text, scene_id)` plus the
/// backend's own immutable configuration.
pub trait Backend: Sync + Send {
    /// Sample a trajectory, optionally conditioned on grounding feedback.
    fn generate(
        &self,
        obs: &Observation,
        grounding: Option<&GroundingSet>,
        seed: u64,
    ) -> Result<GeneratedSequence>;

    /// Per-step distributions along a fixed token sequence.
    fn eval_distributions(
        &self,
        obs: &Observation,
        grounding: Option<&GroundingSet>,
        tokens: &[usize],
    ) -> Result<Vec<TokenDistribution>>;

    /// Ground description text against the identified scene.
    fn ground(&self, text: &str, scene_id: u64) -> Result<Vec<Detection>>;
}

/// Immutable bundle of configuration shared by local and remote lanes.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub world: WorldConfig,
    pub grounder: GrounderConfig,
    pub policy: PolicyConfig,
    pub vocab: Vocabulary,
    /// When set, the prior is scored on the prior observation instead of
    /// the guided one (ablation knob; default off so the score isolates
    /// the conditioning effect rather than observation noise).
    pub score_against_prior_observation: bool,
}

impl PipelineConfig {
    pub fn new(world: WorldConfig, grounder: GrounderConfig, policy: PolicyConfig) -> Self {
        let vocab = Vocabulary::with_categories(world.categories.clone());
        PipelineConfig {
            world,
            grounder,
            policy,
            vocab,
            score_against_prior_observation: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.grounder.validate()?;
        self.policy.validate()?;
        if self.vocab.categories() != self.world.categories.as_slice() {
            return Err(SvpError::Config(
                "vocabulary does not match world categories".into(),
            ));
        }
        Ok(())
    }
}

/// In-process backend over the toy world, policy and grounder.
pub struct LocalBackend {
    pub params: PolicyParams,
    pub config: PipelineConfig,
}

impl LocalBackend {
    pub fn new(params: PolicyParams, config: PipelineConfig) -> Self {
        LocalBackend { params, config }
    }

    fn guidance(&self, grounding: Option<&GroundingSet>) -> Option<GuidanceSignal> {
        grounding.map(|g| {
            GuidanceSignal::from_grounding(
                g,
                &self.config.vocab,
                self.config.policy.guidance_gain,
                self.config.policy.penalty_ratio,
            )
        })
    }
}

impl Backend for LocalBackend {
    fn generate(
        &self,
        obs: &Observation,
        grounding: Option<&GroundingSet>,
        seed: u64,
    ) -> Result<GeneratedSequence> {
        let guidance = self.guidance(grounding);
        let mut rng = rng::rng_from_seed(seed);
        let sampled = policy::sample_trajectory(
            &self.params,
            obs,
            guidance.as_ref(),
            &self.config.policy,
            &mut rng,
        )?;
        Ok(GeneratedSequence {
            trajectory: sampled.trajectory,
            dists: sampled.dists,
        })
    }

    fn eval_distributions(
        &self,
        obs: &Observation,
        grounding: Option<&GroundingSet>,
        tokens: &[usize],
    ) -> Result<Vec<TokenDistribution>> {
        let guidance = self.guidance(grounding);
        policy::evaluate_distributions(
            &self.params,
            obs,
            tokens,
            guidance.as_ref(),
            &self.config.policy,
        )
    }

    fn ground(&self, text: &str, scene_id: u64) -> Result<Vec<Detection>> {
        let scene = world::generate_scene(&self.config.world, scene_id)?;
        let mentions = policy::parse_mentions(text, &self.config.vocab);
        let grounding =
            grounder::ground_mentions(&mentions, &scene, &self.config.grounder, &self.config.vocab)?;
        Ok(grounding.detections)
    }
}

/// One guided sample: the draft, its feedback, the guided redraw, and the
/// aligned per-step distributions under both the guided and the prior
/// distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidedSample {
    pub scene_id: u64,
    pub sample_index: usize,
    pub prior_observation: Observation,
    pub prior_trajectory: Trajectory,
    pub grounding: GroundingSet,
    pub guided_observation: Observation,
    pub guided_trajectory: Trajectory,
    /// Grounding of the guided trajectory itself; diagnostic only.
    pub guided_grounding: GroundingSet,
    pub per_token_q: Vec<TokenDistribution>,
    pub per_token_p: Vec<TokenDistribution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub scene_id: u64,
    pub samples: Vec<GuidedSample>,
}

/// Stream bookkeeping for one outer-loop iteration.
#[derive(Debug, Clone, Copy)]
pub struct SampleCtx {
    pub master_seed: u64,
    pub iteration: u64,
    pub samples_per_scene: usize,
}

impl SampleCtx {
    fn draw_index(&self, sample_index: usize) -> u64 {
        self.iteration * self.samples_per_scene as u64 + sample_index as u64
    }

    pub fn prior_seed(&self, scene_id: u64, sample_index: usize) -> u64 {
        rng::derive_seed(
            self.master_seed,
            &[
                domain::PRIOR_SAMPLE,
                self.iteration,
                scene_id,
                sample_index as u64,
            ],
        )
    }

    pub fn guided_seed(&self, scene_id: u64, sample_index: usize) -> u64 {
        rng::derive_seed(
            self.master_seed,
            &[
                domain::GUIDED_SAMPLE,
                self.iteration,
                scene_id,
                sample_index as u64,
            ],
        )
    }
}

/// Mentioned categories that grounding produced no detection for, in
/// first-mention order. Shared by both lanes so the reconstruction of a
/// grounding set from wire detections matches the local computation.
pub fn unmatched_from(mentions: &[usize], detections: &[Detection], vocab: &Vocabulary) -> Vec<String> {
    let mut unique: Vec<usize> = Vec::new();
    for &m in mentions {
        if !unique.contains(&m) {
            unique.push(m);
        }
    }
    unique
        .into_iter()
        .filter_map(|m| vocab.category_name(m).map(str::to_string))
        .filter(|name| detections.iter().all(|d| &d.label != name))
        .collect()
}

fn ground_via_backend(
    backend: &dyn Backend,
    trajectory: &Trajectory,
    scene_id: u64,
    vocab: &Vocabulary,
) -> Result<GroundingSet> {
    let text = policy::decode(trajectory, vocab);
    let detections = backend.ground(&text, scene_id)?;
    let unmatched = unmatched_from(&trajectory.mentions(vocab), &detections, vocab);
    Ok(GroundingSet {
        detections,
        unmatched_mentions: unmatched,
    })
}

/// Run the three-step draw for one sample slot:
/// prior draw → grounding feedback → guided redraw, then evaluate the
/// prior on the guided trajectory's prefixes for scoring.
pub fn inner_loop_once(
    backend: &dyn Backend,
    scene: &Scene,
    config: &PipelineConfig,
    ctx: &SampleCtx,
    sample_index: usize,
) -> Result<GuidedSample> {
    let draw = ctx.draw_index(sample_index);
    let prior_observation = world::observe(scene, &config.world, false, draw);
    let prior = backend.generate(
        &prior_observation,
        None,
        ctx.prior_seed(scene.id, sample_index),
    )?;
    let grounding = ground_via_backend(backend, &prior.trajectory, scene.id, &config.vocab)?;

    let guided_observation = world::observe(scene, &config.world, true, draw);
    let guided = backend.generate(
        &guided_observation,
        Some(&grounding),
        ctx.guided_seed(scene.id, sample_index),
    )?;
    let scoring_obs = if config.score_against_prior_observation {
        &prior_observation
    } else {
        &guided_observation
    };
    let per_token_p = backend.eval_distributions(scoring_obs, None, &guided.trajectory.tokens)?;
    let guided_grounding =
        ground_via_backend(backend, &guided.trajectory, scene.id, &config.vocab)?;

    Ok(GuidedSample {
        scene_id: scene.id,
        sample_index,
        prior_observation,
        prior_trajectory: prior.trajectory,
        grounding,
        guided_observation,
        guided_trajectory: guided.trajectory,
        guided_grounding,
        per_token_q: guided.dists,
        per_token_p,
    })
}

/// Draw `k` guided samples for one scene. Samples use independent derived
/// streams, so any parallel schedule yields the same batch.
pub fn sample_batch(
    backend: &dyn Backend,
    scene: &Scene,
    k: usize,
    config: &PipelineConfig,
    ctx: &SampleCtx,
) -> Result<SampleBatch> {
    if k == 0 {
        return Err(SvpError::InvalidInput(
            "samples per scene must be >= 1".into(),
        ));
    }
    let samples = par::try_map_indexed(k, |i| inner_loop_once(backend, scene, config, ctx, i))?;
    Ok(SampleBatch {
        scene_id: scene.id,
        samples,
    })
}

/// Serialize batches as JSONL, one guided sample per line.
pub fn batches_to_jsonl(batches: &[SampleBatch]) -> Result<String> {
    let mut out = String::new();
    for batch in batches {
        for sample in &batch.samples {
            out.push_str(&serde_json::to_string(sample)?);
            out.push('\n');
        }
    }
    Ok(out)
}

/// Parse JSONL produced by [`batches_to_jsonl`] back into per-scene batches.
pub fn batches_from_jsonl(text: &str) -> Result<Vec<SampleBatch>> {
    let mut batches: Vec<SampleBatch> = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let sample: GuidedSample = serde_json::from_str(line)?;
        match batches.last_mut() {
            Some(batch) if batch.scene_id == sample.scene_id => batch.samples.push(sample),
            _ => batches.push(SampleBatch {
                scene_id: sample.scene_id,
                samples: vec![sample],
            }),
        }
    }
    Ok(batches)
}
