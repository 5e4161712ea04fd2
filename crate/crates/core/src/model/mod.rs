//! The two-branch network: configuration, parameter layout and staged
//! execution.

pub mod check;
mod config;
mod net;

pub use check::{check_model, CheckOutcome, CheckProblem};
pub use config::{ImageShape, LatentConfig, ModelConfig, StageConfig, POOL_SIZE, PRESETS, STAGES};
pub use net::{ClassStage, ConvBlock, DynPerceiver, Execution, FeatureStage, ForwardOutputs, X2Z, Z2X};
