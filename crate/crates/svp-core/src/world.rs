//! Synthetic scene world and noisy multi-hot observations.
//!
//! A scene is a hidden set of labelled boxes; the policy never sees it
//! directly. What it sees is an [`Observation`]: one bit per category,
//! where present categories light up with probability `p_vis` (or the
//! higher `p_vis_guided` on a guided re-look) and absent categories
//! light up with probability `p_distract`. Missed bits produce omission
//! errors downstream, distractor bits produce hallucinations, which is
//! exactly the failure surface the loop is meant to repair.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{iou_unchecked, BoundingBox};
use crate::rng::{self, domain};
use crate::{Result, SvpError};

pub const DEFAULT_CATEGORIES: [&str; 12] = [
    "lamp", "desk", "chair", "plant", "laptop", "frame", "basket", "dog", "car", "tree", "cup",
    "book",
];

/// Cap on per-box rejection re-draws before scene generation gives up.
const MAX_BOX_REJECTIONS: usize = 10_000;

/// Scene-level overlap limit used when placing boxes.
const SCENE_IOU_LIMIT: f64 = 0.5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldConfig {
    #[serde(default = "default_categories")]
    pub categories: Vec<String>,
    #[serde(default = "default_p_vis")]
    pub p_vis: f64,
    #[serde(default = "default_p_vis_guided")]
    pub p_vis_guided: f64,
    #[serde(default = "default_p_distract")]
    pub p_distract: f64,
    #[serde(default = "default_min_objects")]
    pub min_objects: usize,
    #[serde(default = "default_max_objects")]
    pub max_objects: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_categories() -> Vec<String> {
    DEFAULT_CATEGORIES.iter().map(|s| s.to_string()).collect()
}
fn default_p_vis() -> f64 {
    0.7
}
fn default_p_vis_guided() -> f64 {
    0.9
}
fn default_p_distract() -> f64 {
    0.1
}
fn default_min_objects() -> usize {
    2
}
fn default_max_objects() -> usize {
    6
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            categories: default_categories(),
            p_vis: default_p_vis(),
            p_vis_guided: default_p_vis_guided(),
            p_distract: default_p_distract(),
            min_objects: default_min_objects(),
            max_objects: default_max_objects(),
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn with_seed(seed: u64) -> Self {
        WorldConfig {
            seed,
            ..WorldConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(SvpError::Config("category list is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.p_distract) {
            return Err(SvpError::Config(format!(
                "p_distract {} outside [0, 1]",
                self.p_distract
            )));
        }
        if !(self.p_vis > 0.0 && self.p_vis <= self.p_vis_guided && self.p_vis_guided <= 1.0) {
            return Err(SvpError::Config(format!(
                "need 0 < p_vis <= p_vis_guided <= 1, got {} and {}",
                self.p_vis, self.p_vis_guided
            )));
        }
        if self.min_objects < 1 || self.min_objects > self.max_objects {
            return Err(SvpError::Config(format!(
                "need 1 <= min_objects <= max_objects, got {}..{}",
                self.min_objects, self.max_objects
            )));
        }
        // At most two objects may share a category, so 2 * |categories|
        // is the largest placeable scene.
        if self.max_objects > 2 * self.categories.len() {
            return Err(SvpError::Config(format!(
                "max_objects {} exceeds category capacity {}",
                self.max_objects,
                2 * self.categories.len()
            )));
        }
        Ok(())
    }

    pub fn category_index(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    /// Multi-hot presence vector over the config's category order.
    pub fn presence(&self, config: &WorldConfig) -> Vec<u8> {
        let mut present = vec![0u8; config.categories.len()];
        for obj in &self.objects {
            if let Some(idx) = config.category_index(&obj.category) {
                present[idx] = 1;
            }
        }
        present
    }

    /// Objects carrying the given category label, in placement order.
    pub fn objects_with_category(&self, category: &str) -> Vec<&SceneObject> {
        self.objects
            .iter()
            .filter(|o| o.category == category)
            .collect()
    }

    /// Check the structural scene constraints against a config.
    pub fn validate(&self, config: &WorldConfig) -> Result<()> {
        if self.objects.len() < config.min_objects || self.objects.len() > config.max_objects {
            return Err(SvpError::InvalidInput(format!(
                "scene {} has {} objects outside {}..={}",
                self.id,
                self.objects.len(),
                config.min_objects,
                config.max_objects
            )));
        }
        for obj in &self.objects {
            obj.bbox.validate()?;
            if config.category_index(&obj.category).is_none() {
                return Err(SvpError::InvalidInput(format!(
                    "unknown category {:?}",
                    obj.category
                )));
            }
            let shared = self
                .objects
                .iter()
                .filter(|o| o.category == obj.category)
                .count();
            if shared > 2 {
                return Err(SvpError::InvalidInput(format!(
                    "category {:?} appears {} times",
                    obj.category, shared
                )));
            }
        }
        for (i, a) in self.objects.iter().enumerate() {
            for b in &self.objects[i + 1..] {
                if iou_unchecked(&a.bbox, &b.bbox) >= SCENE_IOU_LIMIT {
                    return Err(SvpError::InvalidInput(format!(
                        "scene {} has overlapping boxes (IoU >= {SCENE_IOU_LIMIT})",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Noisy multi-hot view of a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub activations: Vec<u8>,
    pub guided: bool,
}

fn round4(x: f64) -> f64 {
    (x * 10_000.0).round() / 10_000.0
}

fn sample_box<R: Rng>(rng: &mut R) -> BoundingBox {
    let cx = 0.15 + 0.70 * rng.gen::<f64>();
    let cy = 0.15 + 0.70 * rng.gen::<f64>();
    let w = 0.10 + 0.20 * rng.gen::<f64>();
    let h = 0.10 + 0.20 * rng.gen::<f64>();
    let x1 = round4((cx - w / 2.0).clamp(0.0, 1.0));
    let y1 = round4((cy - h / 2.0).clamp(0.0, 1.0));
    let x2 = round4((cx + w / 2.0).clamp(0.0, 1.0));
    let y2 = round4((cy + h / 2.0).clamp(0.0, 1.0));
    BoundingBox([x1, y1, x2, y2])
}

/// Generate the scene at `scene_index`, a pure function of (seed, index).
///
/// Box placement rejects overlaps at IoU >= 0.5 and fails with a config
/// error after 10,000 rejections (unreachable for sane configs).
pub fn generate_scene(config: &WorldConfig, scene_index: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = rng::stream(config.seed, &[domain::SCENE, scene_index]);
    let n_objects = rng.gen_range(config.min_objects..=config.max_objects);
    let mut counts = vec![0usize; config.categories.len()];
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n_objects);
    let mut rejections = 0usize;
    for _ in 0..n_objects {
        let eligible: Vec<usize> = (0..config.categories.len())
            .filter(|&c| counts[c] < 2)
            .collect();
        let cat = eligible[rng.gen_range(0..eligible.len())];
        counts[cat] += 1;
        let bbox = loop {
            let candidate = sample_box(&mut rng);
            let clear = objects
                .iter()
                .all(|o| iou_unchecked(&o.bbox, &candidate) < SCENE_IOU_LIMIT);
            if clear {
                break candidate;
            }
            rejections += 1;
            if rejections >= MAX_BOX_REJECTIONS {
                return Err(SvpError::Config(format!(
                    "scene {scene_index}: box placement exceeded {MAX_BOX_REJECTIONS} rejections"
                )));
            }
        };
        objects.push(SceneObject {
            category: config.categories[cat].clone(),
            bbox,
        });
    }
    Ok(Scene {
        id: scene_index,
        objects,
    })
}

/// Draw a noisy observation of `scene`.
///
/// The draw is keyed by `(seed, scene.id, draw_index)`; the `guided`
/// flag only raises the visibility threshold on the same underlying
/// uniforms. A guided re-look therefore sees a superset of what the
/// plain look saw for the same draw index, and collapses to it exactly
/// when `p_vis_guided == p_vis`.
pub fn observe(scene: &Scene, config: &WorldConfig, guided: bool, draw_index: u64) -> Observation {
    let mut rng = rng::stream(config.seed, &[domain::OBSERVE, scene.id, draw_index]);
    let p_vis = if guided {
        config.p_vis_guided
    } else {
        config.p_vis
    };
    let present = scene.presence(config);
    let activations = present
        .iter()
        .map(|&is_present| {
            let u: f64 = rng.gen();
            let p = if is_present == 1 {
                p_vis
            } else {
                config.p_distract
            };
            u8::from(u < p)
        })
        .collect();
    Observation {
        activations,
        guided,
    }
}
