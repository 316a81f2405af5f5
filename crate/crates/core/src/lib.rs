//! Carleman-lifted horizon systems for projected-gradient robust training.
pub mod bench;
pub mod carleman;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod horizon;
pub mod manifest;
pub mod mpoly;
pub mod par;
pub mod polyapprox;
pub mod readout;
pub mod solver;
pub mod sparse;
pub use error::{Error, Result};
