//! Dense real linear algebra: the substrate every other module builds on.

mod matrix;
mod rng;
mod svd;

pub use matrix::{softmax_rows, Matrix};
pub use rng::{kaiming_uniform, Rng};
pub use svd::{svd, truncate_svd, SvdResult, MAX_SWEEPS};
