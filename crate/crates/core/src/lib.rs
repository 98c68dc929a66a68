//! Random channel-pruning search toolkit.
//!
//! Two pipelines around a small deterministic CNN engine:
//!
//! * **Pretrained pruning** — score channels of a trained network with one of
//!   six importance criteria, sample layer-wise channel configurations under a
//!   FLOPs gate, restore each candidate with a layer-wise least-squares
//!   correction, evaluate, and fine-tune the best.
//! * **Pruning from scratch** — train a weight-shared slimmable network with
//!   in-place distillation, then search the restricted width space by direct
//!   evaluation and retrain the winner.
//!
//! Everything is seeded and reproducible: a run is fully determined by its
//! configuration and seed, independent of the worker count.

pub mod error;
pub mod graph;
pub mod nn;
pub mod parallel;
pub mod rng;
pub mod tensor;

pub use error::{PruneError, Result};
pub use tensor::{Scalar, Tensor};
