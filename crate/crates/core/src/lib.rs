//! Weight Balancing Replay (WBR) for class-incremental learning.
//!
//! Each completed class is summarised by a single memory vector. While a new
//! task trains, every mini-batch step on new data is followed by a replay step
//! on the whole memory store, and the two steps are clipped independently
//! (`alpha` for new data, `beta` for memory). The relative size of the two
//! updates is what keeps old and new class weights in balance.
//!
//! Module map:
//!
//! - [`linalg`]: dense row-major `f64` matrices and the seeded xoshiro256++ PRNG.
//! - [`data`]: MNIST IDX and `WBRF` feature-file codecs.
//! - [`scenario`]: Base-K / Inc-M task splits with disjoint label spaces.
//! - [`model`]: MLP decoder with manual backprop, masked softmax CE, cosine prototypes.
//! - [`optim`]: SGD (optional momentum) and gradient clip policies.
//! - [`memory`]: per-class memory vectors (average or confidence weighted).
//! - [`trainer`]: the WBR loop, finetune and SimpleCIL baselines, weight-delta probe.
//! - [`metrics`]: `A_b`, `A_B`, average accuracy and the per-task accuracy matrix.

pub mod data;
pub mod error;
pub mod linalg;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod scenario;
pub mod trainer;

pub use error::{Error, Result};
