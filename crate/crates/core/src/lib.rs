//! Self-paced selection of hallucinated training samples for low-shot classification.
//!
//! The pipeline:
//!
//! 1. [`synthworld`] builds a seeded world of base and novel classes whose
//!    samples mix a class texture with pose and camera-view nuisance factors,
//!    and hallucinates new samples of a novel instance along two branches
//!    (new views of its own pose, its texture on base-class poses).
//! 2. [`shallownet`] pre-trains a one-hidden-layer classifier `D` on the base
//!    classes and swaps its head for the novel classes (`D'`).
//! 3. [`splengine`] iteratively ranks hallucinated candidates by `D'`
//!    confidence, admits the best ones (optionally one per branch, optionally
//!    retiring their keypoint cluster via [`clustering`]) and fine-tunes `D'`.
//! 4. [`evalharness`] runs each ablation variant on k-shot episodes and
//!    aggregates top-k accuracies into a CSV table.

pub mod clustering;
pub mod config;
pub mod datamodel;
pub mod error;
pub mod evalharness;
pub mod linalg;
pub mod persist;
pub mod rng;
pub mod shallownet;
pub mod splengine;
pub mod synthworld;

pub use error::{Error, ErrorKind, Result};
