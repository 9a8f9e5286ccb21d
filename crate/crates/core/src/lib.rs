//! Mutual-information-guided sparse tuning (MIST) for continual learning.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: `f64` tensors, a reverse-mode autodiff graph, masked SGD.
//! - [`backbone`]: a tanh MLP feature extractor, pretraining and checkpoints.
//! - [`mi_objective`]: the three-view supervised InfoNCE loss and augmentation.
//! - [`sparsity`]: MI-Fisher and baseline scorers, top-k masks, gradient dropout.
//! - [`mist`]: the per-task sparse pre-adaptation loop.
//! - [`hosts`]: frozen-backbone classifiers (prototypes, linear probe) and full fine-tuning.
//! - [`harness`]: synthetic task streams, continual-learning metrics, experiment protocols.
//! - [`oracles`]: exact checks of the mutual-information gradient identities on
//!   discrete joints.

pub mod backbone;
pub mod error;
pub mod harness;
pub mod hosts;
pub mod mi_objective;
pub mod mist;
pub mod numerics;
pub mod oracles;
pub mod rng;
pub mod sparsity;

pub use error::{Error, Result};
