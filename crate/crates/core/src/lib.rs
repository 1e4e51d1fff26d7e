//! Language steering vectors for decoder-only transformers.
//!
//! The crate covers the whole experiment loop at desk scale: multi-parallel
//! corpora ([`corpus`]), a small transformer with hook points ([`model`]),
//! per-language vector banks ([`vectors`]), steering functions and hooks
//! ([`steering`]), training of the low-rank steering variant
//! ([`steertrain`]), and language-confusion metrics ([`eval`]).

pub mod corpus;
pub mod error;
pub mod eval;
pub mod fsutil;
pub mod model;
pub mod numeric;
pub mod steering;
pub mod steertrain;
pub mod vectors;

pub use error::{Error, Result};
