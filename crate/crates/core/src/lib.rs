//! Joint training of an end classifier and a label model from weak
//! supervision sources.
//!
//! Internally classes are `1..=C` and `0` means "abstain"; the on-disk
//! format uses `0..C` and `-1` (see [`data`]).

pub mod baselines;
pub mod data;
pub mod end_model;
pub mod error;
pub mod experiment;
pub mod export;
pub mod label_model;
pub mod math;
pub mod metrics;
pub mod mlp;
pub mod objective;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
