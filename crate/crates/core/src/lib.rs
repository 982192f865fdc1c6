//! Progressive pixel-synthesis GAN with pixel folding.
//!
//! The crate is layered bottom-up: dense tensor storage and convolution
//! kernels, a reverse-mode autodiff tape whose backward passes are
//! recorded as further tape operations, and on top of that the generator,
//! discriminator, training loop, and analytic cost model.

pub mod checkpoint;
pub mod coords;
pub mod costmodel;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod modconv;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
