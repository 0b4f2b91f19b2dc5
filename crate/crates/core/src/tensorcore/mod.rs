//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Enough machinery to train a small U-Net and to backpropagate through unrolled
//! mean-field iterations: same-padded convolution, pooling, bilinear upsampling,
//! channel concatenation, inverted dropout, channel softmax, elementwise arithmetic,
//! masked cross-entropy and constant linear operators.

mod conv;
pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{softmax_channels_inplace, Gradients, LinearOperator, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
