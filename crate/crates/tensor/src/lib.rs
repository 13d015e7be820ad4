//! Minimal dense tensor engine with reverse-mode automatic differentiation.
//!
//! Values are `f64` throughout. Operations are recorded on a [`Tape`]; a
//! single backward pass produces [`Gradients`] for leaves and parameters held
//! in a [`ParamStore`]. [`Adam`] updates the store in place.

mod error;
pub mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use optim::{Adam, Moments};
pub use params::{ParamId, ParamStore};
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;
