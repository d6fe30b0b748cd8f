//! Dense tensors, a reverse-mode tape, and the kernels the model and losses use.

pub mod gradcheck;
pub mod ops;
pub mod softmax;
pub mod tape;
mod tensor;

pub use ops::{depthwise_conv1d, masked_attention};
pub use softmax::{log_softmax_naive, log_softmax_online, logsumexp_tiled, OnlineLse};
pub use tape::{Grads, Tape, Var};
pub use tensor::{Real, Tensor};
