//! Differentiable building blocks on a reverse-accumulation tape.

mod gradcheck;
mod layers;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, ParamCheck};
pub use layers::{affine, scaled_dot_attention, Affine, Embedding, Mlp2};
pub use params::{optimizer_step, Init, Param, ParamId, ParamStore, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use tape::{softmax_rows, Tape, Var};
pub use tensor::Tensor2D;
