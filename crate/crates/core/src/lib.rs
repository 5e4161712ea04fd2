//! Dynamic Perceiver: a two-branch image classifier whose latent
//! classification branch hosts confidence-gated early exits, plus the
//! tooling to train it, count its FLOPs and calibrate exit thresholds
//! against a compute budget.

pub mod calibration;
pub mod engine;
pub mod error;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, ParamId, ParamStore, Tensor, Var};
