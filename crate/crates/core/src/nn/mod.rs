//! Small neural-network toolkit on top of candle tensors: parameter storage,
//! layers, optimizer and resampling.

pub mod channel;
pub mod conv;
pub mod layers;
pub mod optim;
pub mod params;
pub mod resize;

pub use channel::{add_along, expand_along, mul_along};
pub use conv::conv2d;
pub use layers::{log_softmax_last, sigmoid, softmax_last, softplus, Attention, Conv2d, GroupNorm, LayerNorm, Linear, Mlp, Scope};
pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use params::{Init, ParamGroup, ParamStore};
