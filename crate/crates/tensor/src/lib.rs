//! Minimal dense numerics with reverse-mode autodiff.
//!
//! Values are `f64` throughout. Computations are recorded on a [`Tape`];
//! parameters live in a [`ParamStore`] and are updated by [`adam_step`].

pub mod adam;
pub mod checkpoint;
pub mod error;
pub mod linalg;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use error::{Result, TensorError};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;
