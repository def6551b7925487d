//! Small neural-network toolkit: batched tensors, dense and convolutional
//! layers, reverse-mode gradients, Adam and finite-difference checks.

mod adam;
mod gradcheck;
mod layer;
mod network;
mod tensor;

pub use adam::AdamState;
pub use gradcheck::{grad_check, FD_STEP, MAX_CHECKED};
pub use layer::{conv_out, Layer};
pub use network::{Network, NetworkBuilder, Parameterized, Tap, Taps};
pub use tensor::Tensor;
