//! Behavioral rate–distortion analysis.
//!
//! Confusion counts become effective channels ([`channel`]); a latent cost
//! geometry is inferred from them ([`inference`]); Blahut–Arimoto sweeps trace
//! the frontier implied by that geometry ([`rd`]); frontiers are summarized by
//! slope, slope dispersion and area ([`signatures`]); and systems are compared
//! block-by-block ([`stats`]). [`synth`] generates observers with known
//! geometry for recovery checks.

pub mod channel;
pub mod cost;
pub mod error;
pub mod flags;
pub mod inference;
pub mod ingest;
mod optim;
pub mod rd;
pub mod records;
pub mod signatures;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};
