//! Desk-scale laboratory for continual unlearning of a small decoder-only
//! transformer by orthogonal projection of hidden states, with a
//! gradient-ascent baseline and a relearning-attack harness.

pub mod baselines;
pub mod cli;
pub mod error;
pub mod evalkit;
pub mod linalg;
pub mod mrp;
pub mod nanomodel;
pub mod rng;
pub mod taskgen;

pub use error::{Error, Result};
