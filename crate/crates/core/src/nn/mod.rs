//! Convolution, pooling, normalization, linear, and residual building blocks.

pub mod conv;
mod layers;
mod linear;
mod norm;
mod pool;

pub use conv::{conv3d, Geometry3d};
pub use layers::{BatchNorm3dParams, Conv3dParams, LinearParams, ResidualBlock3d, BN_EPS, BN_MOMENTUM};
pub use linear::linear;
pub use norm::{batch_norm, BnStats, ObservedStats};
pub use pool::maxpool3d;
