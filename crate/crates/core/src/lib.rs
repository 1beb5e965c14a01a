//! Continual learning on a small LoRA-adapted network by identifying which
//! skill units each task relies on and fusing sequentially trained models
//! unit by unit.
//!
//! The numeric core is generic over the scalar type ([`Scalar`], implemented
//! for `f32` and `f64`). Experiments run in `f64`; the aliases at the crate
//! root name the concrete types the driver and CLI use.

pub mod bench;
pub mod driver;
pub mod error;
pub mod fusion;
pub mod identification;
pub mod lora;
pub mod metrics;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod units;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Dense `f64` matrix.
pub type Matrix = tensor::Matrix<f64>;
/// `f64` gradient tape.
pub type GradTape = tensor::GradTape<f64>;
/// `f64` gradient map.
pub type Gradients = tensor::Gradients<f64>;
/// `f64` LoRA layer.
pub type LoraLayer = lora::LoraLayer<f64>;
/// `f64` LoRA MLP.
pub type Model = lora::Model<f64>;

/// `f64` sensitivity state.
pub type SensitivityState = identification::SensitivityState<f64>;
/// `f64` per-unit importance scores.
pub type UnitScores = identification::UnitScores<f64>;
/// `f64` evaluation matrix.
pub type EvalMatrix = metrics::EvalMatrix<f64>;
/// `f64` result of one continual-learning run.
pub type RunOutput = driver::RunOutput<f64>;

