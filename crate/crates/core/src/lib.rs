//! Asynchronous temporal attention for multitask survival prediction from
//! irregular, multimodal longitudinal patient data.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`]: tape-based reverse-mode differentiation, Adam, and a
//!   finite-difference gradient checker.
//! * [`attention`]: the SimTA time-decay attention layer, SimTA stacks and
//!   the TSimTA transformer block built around them.
//! * [`multimodal`]: per-modality encoders, multimodal dropout, the
//!   Concat / Concat+SA / late-mean fusion variants and multitask heads.
//! * [`cohort`]: patient records, eligibility, preprocessing, cutoff
//!   truncation and horizon labels.
//! * [`synth`]: seeded synthetic cohorts with known latent risk.
//! * [`stats`]: AUC, Mann-Whitney, DeLong, Fisher's method, stratified
//!   k-fold and fold aggregation.
//! * [`pipeline`]: cross-validated training, evaluation and comparison.

pub mod attention;
pub mod autodiff;
pub mod cohort;
pub mod error;
pub mod multimodal;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
