//! Tensor kernels, reverse-mode differentiation, layers, optimizer and the
//! finite-difference gradient checker.

mod gradcheck;
mod layers;
mod ops;
mod optim;
mod params;
mod real;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_grad_check, rel_error, GradCheckReport, DEFAULT_EPS, REL_FLOOR};
pub use layers::{
    positions, scaled_dot_product, sinusoidal_table, Attended, Ctx, FeedForward, LayerNorm, Linear, Mode,
    MultiHeadAttention, PointwiseConv, SingleHeadAttention, BN_EPS, BN_MOMENTUM, LN_EPS, PRELU_INIT,
};
pub use ops::{cosine_matrix, cosine_similarity, gumbel_softmax, GumbelNoise, COSINE_EPS};
pub use optim::{Adam, LrSchedule};
pub use params::{ParamId, ParamStore, Parameter};
pub use real::Real;
pub use rng::{Purpose, RngStream};
pub use tape::{argmax, Gradients, Tape, Var};
pub use tensor::Tensor;
