//! Knowledge distillation for self-supervised keyword-spotting students.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] — dense `f64` tensors, a tape-based reverse-mode autodiff
//!   graph, Adam, a finite-difference gradient checker and the checkpoint
//!   container.
//! * [`dsp`] — 64-channel log filterbank energy (LFBE) frontend.
//! * [`datagen`] — deterministic synthetic keyword corpus.
//! * [`models`] — frozen toy teacher, trainable student, span masking.
//! * [`losses`] — L1/cosine baselines, dual-view cross-correlation,
//!   teacher-codebook contrastive loss and their combination.
//! * [`train`] — teacher pretraining, distillation and fine-tuning loops.
//! * [`eval`] — FRR/FAR, operating points, relative FAR, DET sweeps.
//!
//! Batch work (per-utterance synthesis, per-sample forward/backward, scoring)
//! goes through [`exec::Execution`], which runs on rayon when the `parallel`
//! feature is enabled and falls back to a plain loop otherwise. Results are
//! always reduced in index order, so both modes are bitwise identical.

pub mod config;
pub mod datagen;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod exec;
pub mod fsio;
pub mod losses;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
