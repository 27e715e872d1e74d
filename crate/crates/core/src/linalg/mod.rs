//! Dense matrix arithmetic and the seeded PRNG shared by every other module.

mod matrix;
mod rng;

pub use matrix::{dot, l2_norm, DenseMatrix};
pub use rng::SeededRng;
