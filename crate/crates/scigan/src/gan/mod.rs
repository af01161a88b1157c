//! Adversarial estimation of individualized dose-response curves.
//!
//! Three stages: a generator proposes counterfactual outcomes at sampled
//! dosage sets, discriminators try to spot the factual entry hidden among
//! them, and a separate inference network distills the trained generator
//! into a feed-forward surface that needs no factual context at test time.

pub mod losses;
pub mod nets;
pub mod train;

pub use nets::{Discriminator, GeneratorNet, InferenceNet, Variant};
pub use train::{train_scigan, SciganModel, Standardizer, TrainConfig, TrainingLog};
