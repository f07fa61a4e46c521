//! One-shot sign spotting: given multi-stride features of an isolated query
//! clip, predict per frame whether the query occurs in a continuous target.
//!
//! The pipeline is `synthgen` (or files via `datastore`) → `features` →
//! `model` → `metrics`, with `training` fitting the model on balanced
//! query/target pairs.

pub mod datastore;
pub mod error;
pub mod features;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
