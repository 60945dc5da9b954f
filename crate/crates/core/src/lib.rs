//! Window attention upsampling: a reverse-mode tape over NCHW tensors,
//! convolution and attention layers, complexity counters, and a small
//! segmentation harness.

pub mod analysis;
pub mod attention;
pub mod cli;
pub mod conv;
pub mod counter;
pub mod error;
pub mod par;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod toyseg;
pub mod wau;
pub mod windowing;

pub use error::{Result, WauError};
pub use params::{Graph, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor, Var};
