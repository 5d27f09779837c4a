pub mod autodiff;
pub mod blocks;
pub mod datagen;
pub mod error;
pub mod fourier;
pub mod gradsuite;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod network;
mod kernels;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
