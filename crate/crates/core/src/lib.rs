//! Building blocks for compact, adversarially robust model ensembles.
//!
//! The crate covers the full path from a single dense/conv classifier to a
//! served ensemble:
//!
//! * [`netcore`]: tensors, layers, masked forward/backward passes, SGD and a
//!   binary checkpoint format. All arithmetic is `f64` and deterministic for
//!   a fixed seed.
//! * [`attacks`]: FGSM and PGD under an l-infinity budget, plus per-model
//!   failure matrices used by team selection.
//! * [`advtrain`]: adversarial training loops (train on perturbed batches).
//! * [`importance`]: four weight-importance scores used to prune one base
//!   network into structurally different sub-models.
//! * [`pruning`]: percentile masks, learned per-layer keep rates and the
//!   alternating prune/fine-tune loop.
//! * [`ensemble`]: sub-model pool construction, robust-diversity team
//!   scoring/selection, prediction combiners and the composite ensemble
//!   training loss.
//! * [`die`]: dynamic early-stopping inference over a selected team.
//!
//! Orchestration (configs, datasets, CLI, reports) lives in the companion
//! `eed-harness` crate.

pub mod advtrain;
pub mod attacks;
pub mod die;
pub mod ensemble;
pub mod error;
pub mod importance;
pub mod netcore;
pub mod pruning;
pub mod rng;

pub use error::{Error, Result};
