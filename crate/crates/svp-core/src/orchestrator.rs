//! Outer loop: sample → score → select → adapt, with artifact persistence.
//!
//! Each iteration samples fresh batches from the current parameters,
//! curates the top-scored guided trajectories, adapts the policy on
//! them, and evaluates the result on a disjoint held-out scene range in
//! both plain and guided-inference modes. The whole artifact tree is a
//! deterministic function of the run configuration (the curated-dataset
//! sidecar carries a wall-clock timestamp; everything else is
//! byte-reproducible).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::grounder::GrounderConfig;
use crate::learner::{self, AdaptConfig, CurvePoint};
use crate::metrics::{self, EvalMode, MetricsRow};
use crate::policy::{PolicyConfig, PolicyParams};
use crate::sampler::{Backend, PipelineConfig, SampleBatch, SampleCtx};
use crate::selection::{self, DatasetProvenance, ScoreChoice};
use crate::world::{self, WorldConfig};
use crate::{par, Result, SvpError};

/// Which learner consumes the curated samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnerChoice {
    Svp,
    Dpo,
}

impl std::str::FromStr for LearnerChoice {
    type Err = SvpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svp" => Ok(LearnerChoice::Svp),
            "dpo" => Ok(LearnerChoice::Dpo),
            other => Err(SvpError::Config(format!(
                "unknown learner {other:?} (expected svp or dpo)"
            ))),
        }
    }
}

/// Run variant recorded in the manifest and comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Svp,
    BaselineNoGrounding,
    Dpo,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Svp => "svp",
            Variant::BaselineNoGrounding => "baseline_no_grounding",
            Variant::Dpo => "dpo",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    /// Training scene count.
    #[serde(rename = "C", default = "default_scenes")]
    pub scenes: usize,
    /// Guided samples drawn per scene each iteration.
    #[serde(rename = "K", default = "default_samples")]
    pub samples_per_scene: usize,
    #[serde(default = "default_k_ratio")]
    pub k_ratio: f64,
    /// Outer-loop iterations.
    #[serde(rename = "I", default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_score_choice")]
    pub score_choice: ScoreChoice,
    #[serde(default = "default_learner")]
    pub learner: LearnerChoice,
    #[serde(default = "default_eval_scene_count")]
    pub eval_scene_count: usize,
    #[serde(default = "default_eval_draws")]
    pub eval_draws: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub score_against_prior_observation: bool,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub grounder: GrounderConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub adapt: AdaptConfig,
}

fn default_scenes() -> usize {
    200
}
fn default_samples() -> usize {
    20
}
fn default_k_ratio() -> f64 {
    0.2
}
fn default_iterations() -> usize {
    3
}
fn default_score_choice() -> ScoreChoice {
    ScoreChoice::LogRatio
}
fn default_learner() -> LearnerChoice {
    LearnerChoice::Svp
}
fn default_eval_scene_count() -> usize {
    200
}
fn default_eval_draws() -> usize {
    1
}
fn default_seed() -> u64 {
    7
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scenes: default_scenes(),
            samples_per_scene: default_samples(),
            k_ratio: default_k_ratio(),
            iterations: default_iterations(),
            score_choice: default_score_choice(),
            learner: default_learner(),
            eval_scene_count: default_eval_scene_count(),
            eval_draws: default_eval_draws(),
            seed: default_seed(),
            score_against_prior_observation: false,
            world: WorldConfig::default(),
            grounder: GrounderConfig::default(),
            policy: PolicyConfig::default(),
            adapt: AdaptConfig::default(),
        }
        .resolved()
    }
}

impl RunConfig {
    /// Propagate the master seed into the sub-configuration seeds (their
    /// streams are kept independent by domain tags).
    pub fn resolved(mut self) -> Self {
        self.world.seed = self.seed;
        self.grounder.seed = self.seed;
        self.adapt.seed = self.seed;
        self
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text)?;
        Ok(config.resolved())
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenes < 1 {
            return Err(SvpError::Config("scene count must be >= 1".into()));
        }
        if self.samples_per_scene < 1 {
            return Err(SvpError::Config("samples per scene must be >= 1".into()));
        }
        if !(self.k_ratio > 0.0 && self.k_ratio <= 1.0) {
            return Err(SvpError::Config(format!(
                "k_ratio {} outside (0, 1]",
                self.k_ratio
            )));
        }
        if self.eval_scene_count < 1 || self.eval_draws < 1 {
            return Err(SvpError::Config(
                "evaluation needs at least one scene and one draw".into(),
            ));
        }
        self.world.validate()?;
        self.grounder.validate()?;
        self.policy.validate()?;
        self.adapt.validate()?;
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        let mut pipeline = PipelineConfig::new(
            self.world.clone(),
            self.grounder.clone(),
            self.policy.clone(),
        );
        pipeline.score_against_prior_observation = self.score_against_prior_observation;
        pipeline
    }

    /// Held-out scene indices, disjoint from the training range by
    /// construction.
    pub fn eval_range(&self) -> std::ops::Range<u64> {
        let start = self.scenes as u64;
        start..start + self.eval_scene_count as u64
    }

    pub fn config_hash(&self) -> Result<String> {
        let canonical = serde_json::to_string(self)?;
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        Ok(hex_string(&hasher.finalize()))
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Builds a backend for the given parameter snapshot. The in-process
/// factory wraps the toy implementations directly; a remote factory can
/// stand up a server serving the snapshot and return a client.
pub trait BackendFactory {
    fn make(&self, params: PolicyParams, config: &PipelineConfig) -> Result<Box<dyn Backend>>;
}

/// Factory for the in-process lane.
pub struct LocalFactory;

impl BackendFactory for LocalFactory {
    fn make(&self, params: PolicyParams, config: &PipelineConfig) -> Result<Box<dyn Backend>> {
        Ok(Box::new(crate::sampler::LocalBackend::new(
            params,
            config.clone(),
        )))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub config_hash: String,
    pub seed: u64,
    pub variant: Variant,
    pub files: Vec<String>,
    pub complete: bool,
}

/// Everything a finished run produced, with the on-disk file list.
#[derive(Debug)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub variant: Variant,
    pub metrics_prior: Vec<MetricsRow>,
    pub metrics_isvp: Vec<MetricsRow>,
    pub params_snapshots: Vec<PolicyParams>,
    pub loss_curves: Vec<Vec<CurvePoint>>,
    pub curated_sizes: Vec<usize>,
    pub manifest: Manifest,
}

struct ArtifactWriter {
    out_dir: PathBuf,
    files: Vec<String>,
}

impl ArtifactWriter {
    fn new(out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir)?;
        Ok(ArtifactWriter {
            out_dir: out_dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        fs::write(self.out_dir.join(name), contents)?;
        if !self.files.contains(&name.to_string()) {
            self.files.push(name.to_string());
        }
        Ok(())
    }
}

fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(metrics::metrics_csv_header());
    for row in rows {
        out.push_str(&metrics::metrics_row_to_csv(row));
    }
    out
}

fn ablation_csv(variant: Variant, rows: &[MetricsRow]) -> String {
    let mut out = String::from("variant,recall,f1\n");
    for row in rows {
        out.push_str(&format!(
            "{}_iter{},{},{}\n",
            variant.as_str(),
            row.iteration,
            row.recall,
            row.f1
        ));
    }
    out
}

fn sample_all_scenes(
    backend: &dyn Backend,
    config: &RunConfig,
    pipeline: &PipelineConfig,
    iteration: usize,
) -> Result<Vec<SampleBatch>> {
    let ctx = SampleCtx {
        master_seed: config.seed,
        iteration: iteration as u64,
        samples_per_scene: config.samples_per_scene,
    };
    par::try_map_indexed(config.scenes, |i| {
        let scene = world::generate_scene(&pipeline.world, i as u64)?;
        crate::sampler::sample_batch(backend, &scene, config.samples_per_scene, pipeline, &ctx)
    })
}

fn evaluate_both_modes(
    backend: &dyn Backend,
    config: &RunConfig,
    pipeline: &PipelineConfig,
    iteration: usize,
) -> Result<(MetricsRow, MetricsRow)> {
    let prior = metrics::evaluate_policy(
        backend,
        pipeline,
        config.eval_range(),
        config.eval_draws,
        EvalMode::Prior,
        config.seed,
        iteration,
    )?;
    let isvp = metrics::evaluate_policy(
        backend,
        pipeline,
        config.eval_range(),
        config.eval_draws,
        EvalMode::Isvp,
        config.seed,
        iteration,
    )?;
    Ok((prior, isvp))
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn run_variant(
    config: &RunConfig,
    factory: &dyn BackendFactory,
    variant: Variant,
    out_dir: &Path,
) -> Result<RunArtifacts> {
    config.validate()?;
    let pipeline = config.pipeline();
    let mut writer = ArtifactWriter::new(out_dir)?;

    // A partial manifest marks the run incomplete until the final write.
    let mut manifest = Manifest {
        config: config.clone(),
        config_hash: config.config_hash()?,
        seed: config.seed,
        variant,
        files: vec![],
        complete: false,
    };
    writer.write("manifest.json", &serde_json::to_string_pretty(&manifest)?)?;

    let mut params = PolicyParams::init(&pipeline.vocab, config.seed);
    let mut params_snapshots = vec![params.clone()];
    writer.write("params_iter0.json", &serde_json::to_string(&params)?)?;

    let backend = factory.make(params.clone(), &pipeline)?;
    let (prior0, isvp0) = evaluate_both_modes(backend.as_ref(), config, &pipeline, 0)?;
    drop(backend);
    let mut metrics_prior = vec![prior0];
    let mut metrics_isvp = vec![isvp0];
    let mut loss_curves = Vec::new();
    let mut curated_sizes = Vec::new();

    for iteration in 1..=config.iterations {
        let backend = factory.make(params.clone(), &pipeline)?;
        let batches = sample_all_scenes(backend.as_ref(), config, &pipeline, iteration)?;
        drop(backend);

        let provenance = DatasetProvenance {
            seed: config.seed,
            score_choice: config.score_choice,
            k_ratio: config.k_ratio,
            samples_per_scene: config.samples_per_scene,
            scene_count: config.scenes,
            created_at: unix_now(),
        };
        let (curated, score_rows) = selection::assemble_dataset(
            &batches,
            &pipeline.vocab,
            config.score_choice,
            config.k_ratio,
            provenance,
        )?;
        curated_sizes.push(curated.records.len());
        writer.write(
            &format!("scores_iter{iteration}.csv"),
            &selection::score_rows_to_csv(&score_rows),
        )?;
        writer.write(&format!("curated_iter{iteration}.jsonl"), &curated.to_jsonl()?)?;
        writer.write(
            &format!("curated_iter{iteration}.manifest.json"),
            &serde_json::to_string_pretty(&curated.provenance)?,
        )?;

        let curve = match config.learner {
            LearnerChoice::Svp => {
                let (next, curve) =
                    learner::train_svp(&params, &curated.records, &config.adapt, &pipeline.policy)?;
                params = next;
                curve
            }
            LearnerChoice::Dpo => {
                let pairs = learner::build_preference_pairs(
                    &batches,
                    &pipeline.vocab,
                    config.score_choice,
                )?;
                log::info!("iteration {iteration}: {} preference pairs", pairs.len());
                let (next, curve) =
                    learner::train_dpo(&params, &pairs, &config.adapt, &pipeline.policy)?;
                params = next;
                curve
            }
        };
        writer.write(
            &format!("loss_iter{iteration}.csv"),
            &learner::curve_to_csv(&curve),
        )?;
        loss_curves.push(curve);
        params_snapshots.push(params.clone());
        writer.write(
            &format!("params_iter{iteration}.json"),
            &serde_json::to_string(&params)?,
        )?;

        let backend = factory.make(params.clone(), &pipeline)?;
        let (prior, isvp) = evaluate_both_modes(backend.as_ref(), config, &pipeline, iteration)?;
        metrics_prior.push(prior);
        metrics_isvp.push(isvp);
    }

    writer.write("metrics_prior.csv", &metrics_csv(&metrics_prior))?;
    writer.write("metrics_isvp.csv", &metrics_csv(&metrics_isvp))?;
    writer.write("ablation.csv", &ablation_csv(variant, &metrics_prior))?;

    manifest.files = writer.files.clone();
    manifest.files.sort();
    manifest.complete = true;
    writer.write("manifest.json", &serde_json::to_string_pretty(&manifest)?)?;

    Ok(RunArtifacts {
        out_dir: out_dir.to_path_buf(),
        variant,
        metrics_prior,
        metrics_isvp,
        params_snapshots,
        loss_curves,
        curated_sizes,
        manifest,
    })
}

/// The full self-improvement loop with guided sampling and top-k
/// re-weighted adaptation.
pub fn run_svp(
    config: &RunConfig,
    factory: &dyn BackendFactory,
    out_dir: &Path,
) -> Result<RunArtifacts> {
    run_variant(config, factory, Variant::Svp, out_dir)
}

/// Ablation: the identical loop with the guidance gain forced to zero,
/// so the second draw is plain self-captioning and scores carry no
/// information (selection falls back to sample order).
pub fn run_baseline_no_grounding(
    config: &RunConfig,
    factory: &dyn BackendFactory,
    out_dir: &Path,
) -> Result<RunArtifacts> {
    let mut baseline = config.clone();
    baseline.policy.guidance_gain = 0.0;
    run_variant(&baseline, factory, Variant::BaselineNoGrounding, out_dir)
}

/// Baseline learner: identical sampling and scoring, preference-pair
/// training instead of re-weighted likelihood.
pub fn run_dpo_baseline(
    config: &RunConfig,
    factory: &dyn BackendFactory,
    out_dir: &Path,
) -> Result<RunArtifacts> {
    if config.samples_per_scene < 2 {
        return Err(SvpError::Config(
            "preference pairs need at least two samples per scene".into(),
        ));
    }
    let mut dpo = config.clone();
    dpo.learner = LearnerChoice::Dpo;
    run_variant(&dpo, factory, Variant::Dpo, out_dir)
}
