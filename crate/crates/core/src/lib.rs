//! prunelab — a desk-scale laboratory for neural network pruning and
//! retraining learning-rate schedules.
//!
//! The crate provides a small deterministic training engine (dense and
//! convolutional layers with explicit forward/backward passes and mask-aware
//! parameters), SGD with Nesterov momentum, the four retraining schedules
//! (fine-tuning, rewinding, scaled restarting, 1-cycle restarting), several
//! pruning saliency methods with structured shrinking, cost/accuracy/mask
//! metrics, dataset loading and synthesis, experiment pipelines, and a
//! seeded multi-repeat harness with CSV/JSON/SVG outputs.

pub mod arch;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod plot;
pub mod prune;
pub mod rng;
pub mod schedule;
pub mod store;
pub mod tensor;

pub use error::{Error, Result};
