//! Desk-scale benchmark for `asfda-core`: a synthetic two-domain dataset,
//! a small native trainer, baseline query strategies, evaluation and the
//! experiment runner behind the `asfda` binary.

pub mod baselines;
pub mod eval;
pub mod experiment;
pub mod synth;
pub mod toy;
