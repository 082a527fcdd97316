//! Minimal tensor substrate with reverse-mode differentiation and the layer
//! set the network needs: 1D convolutions (plain and depthwise), batch
//! normalization, activations, pooling, linear maps, bidirectional GRU,
//! softmax cross-entropy, and dropout. Every backward pass is validated
//! against central finite differences in the test suite.

pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod norm;
pub mod ops;
pub mod rnn;
pub mod tensor;

/// Forward-pass mode: train uses batch statistics and dropout, eval uses
/// running statistics and disables dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

pub use conv::{conv1d, conv1d_depthwise, conv_out_len};
pub use loss::softmax_cross_entropy;
pub use norm::BatchNorm1d;
pub use ops::{Activation, PoolKind};
pub use rnn::{BiGru, GruCell};
pub use tensor::{no_grad, Parameter, Real, Tensor};
