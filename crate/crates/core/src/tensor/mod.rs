//! Dense matrices and a reverse-mode gradient tape over the small layer set
//! the LoRA network needs.

mod matrix;
mod tape;

pub use matrix::Matrix;
pub use tape::{cross_entropy_loss, per_sample_gradients, GradTape, Gradients, ParamId, Var};
