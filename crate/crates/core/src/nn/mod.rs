//! A small deterministic autodiff engine: NCHW tensors, a tape of
//! convolutional ops, named parameter stores and Adam.

pub(crate) mod conv;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Graph, Var};
pub use layers::{BatchNorm2d, Conv2d, ConvTranspose2d};
pub use optim::Adam;
pub use params::{Bind, ParamKind, ParamStore};
pub use tensor::{Scalar, Tensor};
