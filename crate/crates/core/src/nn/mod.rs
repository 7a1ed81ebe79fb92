//! Tensor building blocks shared by the network: convolution, normalization,
//! pooling, resampling and the parameter store.

mod conv;
mod layers;
mod norm_act;
mod params;
mod pool;
mod resize;

pub use conv::conv2d_same;
pub use norm_act::{norm_act, Moments, Stats};
pub use layers::{BatchNorm2d, Conv2d, GroupNorm};
pub use params::{ParamStore, Role, Scope};
pub use pool::{max_pool2d, trace_selections};
pub use resize::{axis_taps, resize_bilinear, resize_plane, Tap};
