//! Masked discrete diffusion and one-step fixed-point distillation on
//! synthetic token worlds small enough to check against exact oracles.
//!
//! The crate is `no_std` (it needs `alloc`). Everything that touches files,
//! clocks or the command line lives in the `fpd-lab` companion crate.
//!
//! Module map:
//!
//! - [`autodiff`]: dense `f64` tensors and a per-step reverse-mode tape.
//! - [`world`]: frozen codebook, decoder, feature backbone and the synthetic
//!   class-conditional dataset with closed-form probabilities.
//! - [`masking`]: noise schedules, forward corruption, re-masking and
//!   confidence-based selection.
//! - [`nn`]: the denoiser network shared by teacher and student, plus the
//!   optimizer.
//! - [`teacher`]: masked cross-entropy training, the single refinement step
//!   and the iterative sampler.
//! - [`drift`]: Laplace-kernel affinities, drift vectors and the
//!   multi-bandwidth stop-gradient regression loss.
//! - [`distill`]: the one-step student, straight-through embedding, target
//!   construction, optional adversarial term and the training step.
//! - [`metrics`]: exact total variation, Fréchet proxy and fixed-point
//!   residual.
//! - [`gradcheck`]: finite-difference verification of every primitive.

#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod distill;
pub mod drift;
mod error;
pub mod gradcheck;
pub mod masking;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod teacher;
pub mod world;

pub use error::{Error, Result};

/// A token id. Vocabulary symbols are `0..K`; the mask symbol is `K`.
pub type Token = u32;

/// A length-`L` token sequence, possibly containing the mask symbol.
pub type TokenSeq = alloc::vec::Vec<Token>;
