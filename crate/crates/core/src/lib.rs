//! Training engine for pre-activation GELU ResNets with mixup regularization.
pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod optim;
pub mod sweep;
pub mod tensor;
pub mod trainer;
pub use error::{Error, Result};
