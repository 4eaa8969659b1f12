//! Core library for the SGI pipeline: a reverse-mode autodiff tensor core,
//! a deterministic pixel gridworld with offline dataset collection, the
//! network stack (encoder, latent transition model, projections, FiLM-gated
//! goal head), the three self-supervised pretraining objectives, DQN
//! finetuning with per-group learning-rate scales, and evaluation
//! statistics (HNS, IQM, percentile bootstrap, collapse metric).
//!
//! The crate is `no_std` + `alloc`; everything here is pure computation
//! over in-memory data. File formats, logging sinks and the CLI live in
//! the companion `sgi-cli` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod agent;
pub mod augment;
pub mod collect;
pub mod env;
pub mod error;
pub mod gradcheck;
pub mod nets;
pub mod objectives;
pub mod optim;
pub mod replay;
pub mod rng;
pub mod stats;
pub mod tape;
pub mod tensor;

pub use error::{CoreError, Result};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
