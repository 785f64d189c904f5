//! Dense tensors (`f32` by default, `f64` for checking), a reverse-mode gradient tape, ADAM, a cosine
//! learning-rate schedule and the `CTXF` parameter checkpoint format.

mod error;
mod kernels;
mod real;

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{AutodiffError, Result};
pub use optim::{Adam, AdamConfig, CosineSchedule};
pub use params::ParamSet;
pub use real::Real;
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
