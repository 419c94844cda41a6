//! Social recommendation with a neural attention model over friends'
//! latent preferences.
//!
//! The crate covers the full pipeline: rating and friendship ingestion
//! ([`data`]), a small dense kernel with Adam and a finite-difference
//! checker ([`nn`]), the attention model with its explicit backward pass
//! ([`model`]), matrix-factorization pretraining and BPR training
//! ([`train`]), the plain BPR-MF and fixed-weight baselines
//! ([`baselines`]), ranking evaluation ([`eval`]), model snapshots
//! ([`snapshot`]) and a planted-influence data generator ([`synth`]).

pub mod baselines;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod snapshot;
pub mod synth;
pub mod train;

pub use error::{NasError, Result};
