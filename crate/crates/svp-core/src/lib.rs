//! Self-improvement loop for a toy autoregressive scene describer.
//!
//! The crate builds a complete sample → ground → score → select → adapt
//! pipeline over a synthetic world: scenes are hidden sets of labelled
//! boxes, the policy sees only a noisy multi-hot observation, and an
//! oracle grounder turns each draft description into detection feedback
//! that conditions a second, guided draw. Token-level alignment scores
//! between the guided and prior distributions drive top-k selection,
//! and the curated samples adapt the policy by re-weighted maximum
//! likelihood (with a preference-pair baseline learner for comparison).
//!
//! All randomness flows through derived, explicitly seeded streams, so
//! every artifact is a deterministic function of its configuration under
//! any thread count. The `parallel` feature (on by default) runs the
//! per-scene and per-sample loops on rayon; disabling it falls back to
//! sequential iteration with identical output.

pub mod error;
pub mod geometry;
pub mod grounder;
pub mod learner;
pub mod metrics;
pub mod orchestrator;
pub mod par;
pub mod policy;
pub mod rng;
pub mod sampler;
pub mod scoring;
pub mod selection;
pub mod world;

pub use error::{Result, SvpError};
