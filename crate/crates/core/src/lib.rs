//! Spatiotemporal fatigue estimation: a 3D ResNet-18 with an embedded-Gaussian
//! non-local attention block, built on a small reverse-mode autodiff core.

pub mod ablation;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod nonlocal;
pub mod ops;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod viz;
pub mod weights;

pub use error::{Error, Result, WeightFileError};
pub use params::{ForwardCtx, ForwardRecord, Mode, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
