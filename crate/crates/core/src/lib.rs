//! Continuous-depth segmentation toolkit.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`kernels`], [`autodiff`], [`params`], [`checkpoint`]: dense
//!   tensors, layer primitives, a reverse-mode tape, parameters with Adam and
//!   the binary checkpoint format.
//! - [`ode`] and [`adjoint`]: Euler/RK4/dopri5 solvers and constant-memory
//!   gradients through them.
//! - [`model`]: U-Net, U-ResNet and U-Node builders.
//! - [`seg`]: instance labeling, morphology, post-processing and the
//!   object-level gland metrics.
//! - [`data`]: synthetic glands, image files, preprocessing and augmentation.

pub mod adjoint;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod ode;
pub mod params;
pub mod seg;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
