//! Top-k selection and curated-dataset assembly.
//!
//! Per scene: drop degenerate samples (no category mentions), score the
//! survivors, keep the `max(1, round(k_ratio * K))` highest-scored ones
//! (ties broken toward lower sample index), and append the winners to
//! the adaptation dataset in `(scene_id, sample_index)` order.

use serde::{Deserialize, Serialize};

use crate::policy::{Trajectory, Vocabulary};
use crate::sampler::{GuidedSample, SampleBatch};
use crate::scoring::ScoreReport;
use crate::world::Observation;
use crate::{Result, SvpError};

/// Which score ranks the samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreChoice {
    /// Token-weighted log-ratio (per-step KL sum).
    #[serde(rename = "eq5")]
    LogRatio,
    /// Weighted difference (per-step entropy reduction).
    #[serde(rename = "eq6")]
    WeightedDiff,
}

impl ScoreChoice {
    pub fn pick(&self, report: &ScoreReport) -> f64 {
        match self {
            ScoreChoice::LogRatio => report.s_log_ratio,
            ScoreChoice::WeightedDiff => report.s_weighted_diff,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ScoreChoice::LogRatio => "eq5",
            ScoreChoice::WeightedDiff => "eq6",
        }
    }
}

impl std::str::FromStr for ScoreChoice {
    type Err = SvpError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eq5" => Ok(ScoreChoice::LogRatio),
            "eq6" => Ok(ScoreChoice::WeightedDiff),
            other => Err(SvpError::Config(format!(
                "unknown score choice {other:?} (expected eq5 or eq6)"
            ))),
        }
    }
}

/// Outcome of thresholding one scene's scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Selected positions into the scored slice, ascending.
    pub indices: Vec<usize>,
    /// The keep-count-th highest score.
    pub threshold: f64,
}

/// Keep the `max(1, round(k_ratio * K))` highest scores.
///
/// Ranking is by score descending with ties broken by lower index; the
/// returned threshold is the lowest selected score, so every selected
/// score is `>= threshold >=` every rejected score.
pub fn select_top_k(batch_scores: &[f64], k_ratio: f64) -> Result<Selection> {
    if batch_scores.is_empty() {
        return Err(SvpError::InvalidInput("no scores to select from".into()));
    }
    if !(k_ratio > 0.0 && k_ratio <= 1.0) {
        return Err(SvpError::InvalidInput(format!(
            "k_ratio {k_ratio} outside (0, 1]"
        )));
    }
    let k = batch_scores.len();
    let keep_count = ((k_ratio * k as f64).round() as usize).max(1).min(k);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        batch_scores[b]
            .partial_cmp(&batch_scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut indices: Vec<usize> = order[..keep_count].to_vec();
    let threshold = batch_scores[order[keep_count - 1]];
    indices.sort_unstable();
    Ok(Selection { indices, threshold })
}

/// Drop samples whose guided trajectory mentions no category.
pub fn filter_degenerate<'a>(
    samples: &'a [GuidedSample],
    vocab: &Vocabulary,
) -> Vec<&'a GuidedSample> {
    samples
        .iter()
        .filter(|s| !s.guided_trajectory.is_degenerate(vocab))
        .collect()
}

/// One adaptation example: the guided trajectory with the observation it
/// was sampled under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuratedRecord {
    pub scene_id: u64,
    pub observation: Observation,
    pub trajectory: Trajectory,
    pub score: f64,
}

/// Config snapshot stored next to the curated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetProvenance {
    pub seed: u64,
    pub score_choice: ScoreChoice,
    pub k_ratio: f64,
    #[serde(rename = "K")]
    pub samples_per_scene: usize,
    #[serde(rename = "C")]
    pub scene_count: usize,
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuratedDataset {
    pub records: Vec<CuratedRecord>,
    pub provenance: DatasetProvenance,
}

impl CuratedDataset {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for record in &self.records {
            out.push_str(&serde_json::to_string(record)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn records_from_jsonl(text: &str) -> Result<Vec<CuratedRecord>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Into::into))
            .collect()
    }
}

/// Per-sample score row for the score CSV (all samples, selected or not).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub scene_id: u64,
    pub sample_index: usize,
    pub s_eq4: f64,
    pub s_eq5: f64,
    pub s_eq6: f64,
    pub selected: bool,
}

pub fn score_rows_to_csv(rows: &[ScoreRow]) -> String {
    let mut out = String::from("scene_id,sample_index,s_eq4,s_eq5,s_eq6,selected\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.scene_id, r.sample_index, r.s_eq4, r.s_eq5, r.s_eq6, r.selected
        ));
    }
    out
}

/// Filter, score, select and collect every scene's winners.
///
/// Returns the curated dataset plus the score rows for all samples.
/// Scenes whose samples are all degenerate contribute nothing (callers
/// may warn about them); record order is `(scene_id, sample_index)`.
pub fn assemble_dataset(
    batches: &[SampleBatch],
    vocab: &Vocabulary,
    score_choice: ScoreChoice,
    k_ratio: f64,
    provenance: DatasetProvenance,
) -> Result<(CuratedDataset, Vec<ScoreRow>)> {
    let mut records = Vec::new();
    let mut rows = Vec::new();
    for batch in batches {
        let survivors = filter_degenerate(&batch.samples, vocab);
        let mut reports = Vec::with_capacity(batch.samples.len());
        for sample in &batch.samples {
            reports.push(ScoreReport::compute(sample)?);
        }
        let mut selected_flags = vec![false; batch.samples.len()];
        if !survivors.is_empty() {
            let scores: Vec<f64> = survivors
                .iter()
                .map(|s| score_choice.pick(&reports[s.sample_index]))
                .collect();
            let selection = select_top_k(&scores, k_ratio)?;
            for &pos in &selection.indices {
                let sample = survivors[pos];
                selected_flags[sample.sample_index] = true;
                records.push(CuratedRecord {
                    scene_id: sample.scene_id,
                    observation: sample.guided_observation.clone(),
                    trajectory: sample.guided_trajectory.clone(),
                    score: scores[pos],
                });
            }
        } else {
            log::warn!(
                "scene {}: every sample degenerate, nothing selected",
                batch.scene_id
            );
        }
        for (i, report) in reports.iter().enumerate() {
            rows.push(ScoreRow {
                scene_id: batch.scene_id,
                sample_index: i,
                s_eq4: report.s_sequence,
                s_eq5: report.s_log_ratio,
                s_eq6: report.s_weighted_diff,
                selected: selected_flags[i],
            });
        }
    }
    Ok((
        CuratedDataset {
            records,
            provenance,
        },
        rows,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grounder::GroundingSet;
    use crate::policy::TokenDistribution;

    fn provenance() -> DatasetProvenance {
        DatasetProvenance {
            seed: 7,
            score_choice: ScoreChoice::LogRatio,
            k_ratio: 0.2,
            samples_per_scene: 20,
            scene_count: 1,
            created_at: 0,
        }
    }

    #[test]
    fn top_fifth_of_twenty_selects_four_largest() {
        let scores: Vec<f64> = (0..20).map(|i| i as f64 * 0.37).collect();
        let sel = select_top_k(&scores, 0.2).unwrap();
        assert_eq!(sel.indices, vec![16, 17, 18, 19]);
        assert_eq!(sel.threshold, scores[16]);
    }

    #[test]
    fn top_tenth_of_ten_selects_argmax() {
        let scores = vec![0.3, 0.9, 0.1, 0.5, 0.2, 0.8, 0.4, 0.6, 0.7, 0.0];
        let sel = select_top_k(&scores, 0.1).unwrap();
        assert_eq!(sel.indices, vec![1]);
        assert_eq!(sel.threshold, 0.9);
    }

    #[test]
    fn ties_break_toward_lower_index() {
        let scores = vec![1.0; 5];
        let sel = select_top_k(&scores, 0.4).unwrap();
        assert_eq!(sel.indices, vec![0, 1]);
    }

    #[test]
    fn empty_scores_are_rejected() {
        assert!(select_top_k(&[], 0.2).is_err());
        assert!(select_top_k(&[1.0], 0.0).is_err());
        assert!(select_top_k(&[1.0], 1.5).is_err());
    }

    #[test]
    fn keep_count_is_at_least_one() {
        let sel = select_top_k(&[0.4, 0.2, 0.9], 0.01).unwrap();
        assert_eq!(sel.indices, vec![2]);
    }

    #[test]
    fn threshold_separates_selected_from_rejected() {
        let scores = vec![0.5, 0.1, 0.7, 0.7, 0.3, 0.9];
        let sel = select_top_k(&scores, 0.5).unwrap();
        for (i, &s) in scores.iter().enumerate() {
            if sel.indices.contains(&i) {
                assert!(s >= sel.threshold);
            } else {
                assert!(s <= sel.threshold);
            }
        }
    }

    #[test]
    fn scale_invariance_of_selection() {
        let scores = vec![0.5, 0.1, 0.7, 0.65, 0.3, 0.9, 0.2, 0.8];
        let base = select_top_k(&scores, 0.25).unwrap();
        for factor in [0.001, 3.0, 1e6] {
            let scaled: Vec<f64> = scores.iter().map(|s| s * factor).collect();
            let sel = select_top_k(&scaled, 0.25).unwrap();
            assert_eq!(sel.indices, base.indices);
        }
    }

    fn sample_with_mentions(scene_id: u64, sample_index: usize, tokens: Vec<usize>) -> GuidedSample {
        let vocab = Vocabulary::standard();
        let t = tokens.len();
        let dist = TokenDistribution::from_logits(&vec![0.0; vocab.size()]);
        GuidedSample {
            scene_id,
            sample_index,
            prior_observation: Observation {
                activations: vec![0; 12],
                guided: false,
            },
            prior_trajectory: Trajectory {
                tokens: vec![vocab.eos()],
                token_logprobs: vec![0.0],
            },
            grounding: GroundingSet::empty(),
            guided_observation: Observation {
                activations: vec![0; 12],
                guided: true,
            },
            guided_trajectory: Trajectory {
                token_logprobs: vec![0.0; t],
                tokens,
            },
            guided_grounding: GroundingSet::empty(),
            per_token_q: vec![dist.clone(); t],
            per_token_p: vec![dist; t],
        }
    }

    #[test]
    fn degenerate_samples_are_filtered() {
        let vocab = Vocabulary::standard();
        let eos = vocab.eos();
        let samples = vec![
            sample_with_mentions(0, 0, vec![eos]),
            sample_with_mentions(0, 1, vec![1, eos]),
        ];
        let kept = filter_degenerate(&samples, &vocab);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].sample_index, 1);
    }

    #[test]
    fn all_degenerate_scene_contributes_nothing() {
        let vocab = Vocabulary::standard();
        let eos = vocab.eos();
        let batch = SampleBatch {
            scene_id: 4,
            samples: vec![
                sample_with_mentions(4, 0, vec![eos]),
                sample_with_mentions(4, 1, vec![eos]),
            ],
        };
        let (dataset, rows) =
            assemble_dataset(&[batch], &vocab, ScoreChoice::LogRatio, 0.2, provenance()).unwrap();
        assert!(dataset.records.is_empty());
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| !r.selected));
    }

    #[test]
    fn assemble_counts_and_order() {
        let vocab = Vocabulary::standard();
        let eos = vocab.eos();
        let batches: Vec<SampleBatch> = (0..3)
            .map(|scene| SampleBatch {
                scene_id: scene,
                samples: (0..10)
                    .map(|i| sample_with_mentions(scene, i, vec![i % 12, eos]))
                    .collect(),
            })
            .collect();
        let (dataset, rows) =
            assemble_dataset(&batches, &vocab, ScoreChoice::LogRatio, 0.2, provenance()).unwrap();
        // 10 samples, k = 0.2 -> 2 per scene, 3 scenes.
        assert_eq!(dataset.records.len(), 6);
        assert_eq!(rows.len(), 30);
        let order: Vec<u64> = dataset.records.iter().map(|r| r.scene_id).collect();
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(order, sorted);
    }

    #[test]
    fn empty_batches_give_empty_dataset() {
        let vocab = Vocabulary::standard();
        let (dataset, rows) =
            assemble_dataset(&[], &vocab, ScoreChoice::LogRatio, 0.2, provenance()).unwrap();
        assert!(dataset.records.is_empty());
        assert!(rows.is_empty());
    }

    #[test]
    fn jsonl_round_trips() {
        let vocab = Vocabulary::standard();
        let dataset = CuratedDataset {
            records: vec![CuratedRecord {
                scene_id: 9,
                observation: Observation {
                    activations: vec![1; 12],
                    guided: true,
                },
                trajectory: Trajectory {
                    tokens: vec![0, vocab.eos()],
                    token_logprobs: vec![-0.5, -1.25],
                },
                score: 1.5,
            }],
            provenance: provenance(),
        };
        let text = dataset.to_jsonl().unwrap();
        let records = CuratedDataset::records_from_jsonl(&text).unwrap();
        assert_eq!(records, dataset.records);
    }

    #[test]
    fn score_csv_layout() {
        let rows = vec![ScoreRow {
            scene_id: 1,
            sample_index: 2,
            s_eq4: 0.5,
            s_eq5: 1.25,
            s_eq6: -0.125,
            selected: true,
        }];
        assert_eq!(
            score_rows_to_csv(&rows),
            "scene_id,sample_index,s_eq4,s_eq5,s_eq6,selected\n1,2,0.5,1.25,-0.125,true\n"
        );
    }
}
