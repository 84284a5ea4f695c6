//! Computation in superposition: vector-symbolic binding, analytic
//! interference bounds, linear attention over superposed channels, a
//! superposed convolutional network with hand-written gradients, a toy
//! training harness and a multiply-accumulate cost model.

pub mod attention;
pub mod bounds;
pub mod container;
pub mod conv;
pub mod error;
pub mod macs;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vsa;

pub use error::{Error, Result};
pub use bounds::BoundReport;
pub use tensor::{Grid, Matrix, Tensor3};
pub use vsa::{KeyKind, KeyVector, Superposition, UnbindMatrix};
