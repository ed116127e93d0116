//! Singular-value based adaptive low-rank adaptation.

pub mod error;
pub mod linalg;
pub mod par;

pub use error::{Error, Result};
pub use linalg::{Matrix, Rng, SvdResult};
pub mod checkpoint;
pub mod rank;
pub mod adapters;
pub mod train;
pub mod model;
pub mod analysis;
