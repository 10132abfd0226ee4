//! Video token merging (VTM) for long-form video transformers.
//!
//! The library implements the full partition → match → merge pipeline over
//! spatiotemporal video tokens, five target-selection strategies (naive
//! uniform, center- and boundary-concentrated, motion-based, and learnable
//! saliency-based sampling), a chunked three-block network with a train-only
//! saliency-guided auxiliary path, and an analytic FLOP/memory cost model for
//! attention under any token schedule.
//!
//! Numerics are built on a small dense-array core with tape-based
//! reverse-mode autodiff ([`autodiff`]): values are stored in 32-bit floats,
//! reductions accumulate in 64-bit.

pub mod attention;
pub mod autodiff;
pub mod config;
pub mod cost;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod merge;
pub mod motion;
pub mod network;
pub mod strategy;
pub mod token;

pub use error::{Error, Result};
