//! Oracle grounding over the hidden scene.
//!
//! Mentions from a draft description are matched against the true scene:
//! each mentioned category that is present yields a detection per scene
//! instance (subject to a small miss probability) with a confidence drawn
//! from a configured range; mentioned-but-absent categories are reported
//! back as unmatched. Detections then pass through per-label greedy NMS.
//! The grounder never invents detections for hallucinated mentions,
//! which is what makes its feedback informative.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{iou_unchecked, BoundingBox};
use crate::policy::{Trajectory, Vocabulary};
use crate::rng::{self, domain};
use crate::world::Scene;
use crate::{Result, SvpError};

pub use crate::geometry::iou;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingSet {
    pub detections: Vec<Detection>,
    #[serde(rename = "unmatched")]
    pub unmatched_mentions: Vec<String>,
}

impl GroundingSet {
    pub fn empty() -> Self {
        GroundingSet {
            detections: vec![],
            unmatched_mentions: vec![],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty() && self.unmatched_mentions.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrounderConfig {
    #[serde(default = "default_nms_threshold")]
    pub nms_threshold: f64,
    #[serde(default = "default_conf_low")]
    pub conf_low: f64,
    #[serde(default = "default_conf_high")]
    pub conf_high: f64,
    #[serde(default = "default_p_miss")]
    pub p_miss: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_nms_threshold() -> f64 {
    0.5
}
fn default_conf_low() -> f64 {
    0.6
}
fn default_conf_high() -> f64 {
    0.95
}
fn default_p_miss() -> f64 {
    0.05
}

impl Default for GrounderConfig {
    fn default() -> Self {
        GrounderConfig {
            nms_threshold: default_nms_threshold(),
            conf_low: default_conf_low(),
            conf_high: default_conf_high(),
            p_miss: default_p_miss(),
            seed: 0,
        }
    }
}

impl GrounderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nms_threshold > 0.0 && self.nms_threshold < 1.0) {
            return Err(SvpError::Config(format!(
                "nms_threshold {} outside (0, 1)",
                self.nms_threshold
            )));
        }
        if !(self.conf_low > 0.0 && self.conf_low <= self.conf_high && self.conf_high <= 1.0) {
            return Err(SvpError::Config(format!(
                "need 0 < conf_low <= conf_high <= 1, got {}..{}",
                self.conf_low, self.conf_high
            )));
        }
        if !(0.0..=1.0).contains(&self.p_miss) {
            return Err(SvpError::Config(format!(
                "p_miss {} outside [0, 1]",
                self.p_miss
            )));
        }
        Ok(())
    }
}

/// Greedy per-label non-maximum suppression.
///
/// Candidates are visited in confidence-descending order (stable by
/// input index on ties); a detection is kept iff its IoU with every
/// already-kept detection of the same label stays below `threshold`.
/// The kept list comes back in that visiting order.
pub fn nms(detections: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .confidence
            .partial_cmp(&detections[a].confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for idx in order {
        let cand = &detections[idx];
        let suppressed = kept.iter().any(|k| {
            k.label == cand.label && iou_unchecked(&k.bbox, &cand.bbox) >= threshold
        });
        if !suppressed {
            kept.push(cand.clone());
        }
    }
    kept
}

/// Ground an ordered mention sequence against the scene.
///
/// Deterministic in `(config.seed, scene.id, mentions)`: the RNG stream
/// is derived from exactly those values, so identical drafts always get
/// identical feedback no matter where or when they are grounded.
pub fn ground_mentions(
    mentions: &[usize],
    scene: &Scene,
    config: &GrounderConfig,
    vocab: &Vocabulary,
) -> Result<GroundingSet> {
    config.validate()?;
    let mut tags: Vec<u64> = Vec::with_capacity(mentions.len() + 2);
    tags.push(domain::GROUND);
    tags.push(scene.id);
    tags.extend(mentions.iter().map(|&m| m as u64));
    let mut rng = rng::stream(config.seed, &tags);

    // Unique mentioned categories in first-occurrence order.
    let mut unique: Vec<usize> = Vec::new();
    for &m in mentions {
        if !unique.contains(&m) {
            unique.push(m);
        }
    }

    let mut detections: Vec<Detection> = Vec::new();
    let mut unmatched: Vec<String> = Vec::new();
    for cat in unique {
        let name = match vocab.category_name(cat) {
            Some(n) => n.to_string(),
            None => continue,
        };
        let instances = scene.objects_with_category(&name);
        let mut grounded_any = false;
        for obj in instances {
            let miss: f64 = rng.gen();
            if miss < config.p_miss {
                continue;
            }
            let confidence =
                config.conf_low + rng.gen::<f64>() * (config.conf_high - config.conf_low);
            detections.push(Detection {
                label: name.clone(),
                bbox: obj.bbox,
                confidence,
            });
            grounded_any = true;
        }
        if !grounded_any {
            unmatched.push(name);
        }
    }
    Ok(GroundingSet {
        detections: nms(&detections, config.nms_threshold),
        unmatched_mentions: unmatched,
    })
}

/// Ground a trajectory's mentions against the scene.
pub fn ground(
    trajectory: &Trajectory,
    scene: &Scene,
    config: &GrounderConfig,
    vocab: &Vocabulary,
) -> Result<GroundingSet> {
    ground_mentions(&trajectory.mentions(vocab), scene, config, vocab)
}

/// Box layout for serialized grounding context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxFormat {
    Xyxy,
    Cxcywh,
}

/// Round half-up to 2 decimal places, returned in hundredths.
fn cents_half_up(x: f64) -> i64 {
    // Snap to the nearest thousandth first so decimal inputs sitting just
    // below a .5 boundary in binary still round the way their decimal
    // reading does.
    let milli = (x * 1000.0).round() as i64;
    (milli + 5).div_euclid(10)
}

fn fmt2(x: f64) -> String {
    let cents = cents_half_up(x);
    format!("{}.{:02}", cents / 100, (cents % 100).abs())
}

/// Serialize grounding to the textual context format: one line per
/// detection, `<label> [a,b,c,d]`, coordinates at 2 decimals, detections
/// in confidence-descending order.
pub fn serialize_context(grounding: &GroundingSet, format: BoxFormat) -> String {
    let mut order: Vec<usize> = (0..grounding.detections.len()).collect();
    order.sort_by(|&a, &b| {
        grounding.detections[b]
            .confidence
            .partial_cmp(&grounding.detections[a].confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let lines: Vec<String> = order
        .into_iter()
        .map(|i| {
            let det = &grounding.detections[i];
            let [x1, y1, x2, y2] = det.bbox.0;
            let coords = match format {
                BoxFormat::Xyxy => [x1, y1, x2, y2],
                BoxFormat::Cxcywh => {
                    [(x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1]
                }
            };
            format!(
                "{} [{},{},{},{}]",
                det.label,
                fmt2(coords[0]),
                fmt2(coords[1]),
                fmt2(coords[2]),
                fmt2(coords[3])
            )
        })
        .collect();
    lines.join("\n")
}

/// Parse `serialize_context` output back into labels and rounded boxes.
pub fn parse_context(text: &str) -> Result<Vec<(String, [f64; 4])>> {
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (label, rest) = line
            .split_once(" [")
            .ok_or_else(|| SvpError::InvalidInput(format!("unparseable line {line:?}")))?;
        let coords_text = rest
            .strip_suffix(']')
            .ok_or_else(|| SvpError::InvalidInput(format!("missing bracket in {line:?}")))?;
        let coords: Vec<f64> = coords_text
            .split(',')
            .map(|c| {
                c.trim()
                    .parse::<f64>()
                    .map_err(|e| SvpError::InvalidInput(format!("bad coordinate {c:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        if coords.len() != 4 {
            return Err(SvpError::InvalidInput(format!(
                "expected 4 coordinates in {line:?}"
            )));
        }
        out.push((label.to_string(), [coords[0], coords[1], coords[2], coords[3]]));
    }
    Ok(out)
}
