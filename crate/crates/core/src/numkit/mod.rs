//! Deterministic numeric substrate: dense tensors, a reverse-mode tape,
//! Adam, seeded random streams and binary relaxations.

mod mlp;
mod optim;
mod random;
mod relax;
mod tape;
mod tensor;

pub use mlp::{forward_mlp, sigmoid_tensor, softmax_rows, Activation, Layer, Mlp};
pub use optim::Adam;
pub use random::RandomSource;
pub use relax::{
    bernoulli_entropy, binary_entropy, gumbel_bernoulli, gumbel_bernoulli_logits,
    sample_gumbel_bernoulli,
};
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;

/// Clamp applied before any logarithm of a probability.
pub const PROB_EPS: f64 = 1e-6;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumkitError {
    #[error("loss must be scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("layer {layer}: {detail}")]
    LayerShape { layer: usize, detail: String },
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
}
