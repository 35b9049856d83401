#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod grading;
pub mod losses;
pub mod metrics;
pub mod gradcheck;
mod linalg;
pub mod nn;
pub mod rng;
pub mod sca;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
