//! 1-D convolutional building blocks on `[batch, channels, time]` tensors.
//!
//! | block | structure | output |
//! |---|---|---|
//! | [`ShallowEncoder`] | grouped conv k7/s2 (groups = L) → BN → ReLU → max-pool k3/s2 | `128L × P/4` |
//! | [`DeepEncoder`] | basic residual blocks, depth per [`DepthProfile`] | `128L × P/8` or `P/16` |
//! | [`ResidualAdaptor`] | conv k3/s2 → BN → ReLU | `128L × P/8` |
//! | [`Classifier`] | conv k3 (no padding) to `256L` → BN → ReLU → pool → linear | `M` logits |
//!
//! Convolutions followed by batch-norm carry no bias. Parameter counts
//! include norm scale and shift but not running statistics.

mod blocks;
mod layers;
mod tensor;

pub use blocks::{
    BasicBlock, Classifier, Cost, DeepEncoder, DepthProfile, Geometry, ResidualAdaptor, ShallowEncoder,
    CHANNELS_PER_LINK,
};
pub use layers::{
    adaptive_bins, relu_backward, relu_inplace, BatchNorm1d, Conv1d, ConvSpec, Linear, MaxPool1d, PoolToVector,
    BN_EPS, BN_MOMENTUM,
};
pub(crate) use tensor::{derive_seed, join};
pub use tensor::{digest_module, Module, Param, ParamKind, Tensor};
