//! Hyper Vision Net kidney/tumor segmentation on a small reverse-mode tensor engine.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod conformance;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod network;
pub mod optim;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use autograd::{Gradients, Mode, Padding, PoolKind, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
