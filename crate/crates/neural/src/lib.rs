//! Dense-matrix autodiff, layers, Adam, gradient checking and parameter
//! checkpoints.
//!
//! Everything runs in `f64` on a single thread and is reproducible
//! bit-for-bit from a seed.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{Init, ParamId, ParamStore, Parameter};
pub use rng::RngState;
pub use tape::{ParamGrads, Tape, Var};
pub use tensor::Matrix;
