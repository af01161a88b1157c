//! Individualized dose-response estimation with a counterfactual GAN.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`tape`], [`nn`]: a small f64 matrix type, reverse-mode
//!   automatic differentiation over whole-batch operations, dense layers
//!   and an Adam optimizer.
//! - [`setlayers`]: permutation-invariant and permutation-equivariant
//!   layers over small sets of (dosage, outcome) pairs.
//! - [`simulate`]: semi-synthetic data generation — per-treatment response
//!   shapes with closed-form optimal dosages, mode-targeted Beta dosage
//!   assignment and softmax treatment assignment.
//! - [`gan`]: the generator / hierarchical discriminator pair, ablation
//!   variants, adversarial training and the distilled inference network.
//! - [`baselines`]: plain and multitask regression baselines.
//! - [`metrics`]: integrated / policy error metrics over dosage curves.
//! - [`theory`]: finite enumeration checks of the discriminator optimum,
//!   its KL decomposition, and the hierarchical factorization.
//! - [`harness`]: config-driven experiment commands shared by the CLI.

pub mod baselines;
pub mod checkpoint;
pub mod error;
pub mod gan;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod random;
pub mod setlayers;
pub mod simulate;
pub mod tape;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
