//! Dual-encoding ConvLSTM U-Net for grid traffic-frame forecasting.
//!
//! The crate is self-contained: a small reverse-mode autodiff tensor
//! ([`tensor`]), the structured layers the network needs ([`nn`],
//! [`convlstm`]), the network itself ([`model`]), optimizers ([`optim`]),
//! movie I/O and sampling ([`data`]), checkpoints ([`checkpoint`]) and the
//! pre-train / freeze / fine-tune / ensemble workflow ([`trainer`]).

pub mod checkpoint;
pub mod convlstm;
pub mod data;
mod error;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{no_grad, DType, Element, Tensor};
