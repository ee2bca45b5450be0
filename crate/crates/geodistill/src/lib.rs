//! # geodistill
//!
//! Learns to predict, from an overhead feature vector, the parameters of
//! Dirichlet distributions over two categorical label spaces and Poisson
//! distributions over object counts, supervised only by co-located
//! ground-level signals. On top of the trained model it provides
//! cross-view retrieval, joint-attribute location search, and
//! localization with accuracy curves and heatmaps.
//!
//! Pipeline sketch:
//!
//! 1. [`dataset::generate_world`] builds a seeded synthetic world of
//!    feature/ground pairs (or [`dataset::load_records`] ingests real
//!    extracted features), and [`dataset::split_dataset`] partitions it.
//! 2. [`train::train_protocol`] runs the two-stage protocol: the shared
//!    backbone is pretrained against the ground categorical distributions
//!    with a KL loss, frozen, and the three heads are then trained jointly
//!    on the negative log-likelihood.
//! 3. [`eval::build_reference_db`] predicts parameters for every location;
//!    [`eval::retrieve_topk`], [`eval::attribute_search`],
//!    [`eval::localize`], [`eval::accuracy_curve`], and [`eval::heatmap`]
//!    drive the applications.
//!
//! Everything is deterministic given the seeds: samplers are hand-rolled
//! over a portable counter-based RNG, and file formats serialize floats at
//! full round-trip precision.

pub mod dataset;
pub mod dist;
pub mod error;
pub mod eval;
pub mod model;
pub mod specfn;
pub mod train;

pub use error::{Error, Result};
