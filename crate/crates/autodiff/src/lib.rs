//! Minimal reverse-mode automatic differentiation with the layers needed for
//! a small segmentation UNet, an Adam optimizer, finite-difference gradient
//! checking and a binary model format.

pub mod adam;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
mod kernels;
pub mod scalar;
pub mod tensor;
pub mod unet;

pub use adam::{backward_and_step, AdamConfig, AdamState};
pub use error::NnError;
pub use gradcheck::{grad_check, grad_check_many};
pub use graph::{Gradients, Graph, NodeId};
pub use io::{load_adam, load_model, save_adam, save_model};
pub use scalar::Real;
pub use tensor::Tensor;
pub use unet::{build_unet, Forward, Mode, NormKind, UNet, UNetConfig};
