//! Numeric primitives: dense matrices, thin SVD, seeded RNG streams,
//! softmax and categorical sampling.

mod matrix;
mod rng;
mod sampling;
mod svd;

pub use matrix::DenseMatrix;
pub use rng::RngStream;
pub use sampling::{sample_categorical, softmax};
pub use svd::{reconstruct, svd, truncate, SvdResult};
