//! TF-SepNet: a convolutional network for acoustic scene classification
//! that processes the frequency and time axes along separate 1-D kernel
//! paths.
//!
//! The crate is self-contained: a small rank-4 tensor type with reverse-mode
//! differentiation ([`tensor`], [`autodiff`]), a log-mel frontend
//! ([`audio`]), the network and its building blocks ([`blocks`],
//! [`network`]), a training loop with Mixup and Freq-MixStyle ([`train`]),
//! effective-receptive-field analysis ([`erf`]) and exact parameter/MAC
//! accounting ([`network::summary`]).

pub mod audio;
pub mod autodiff;
pub mod blocks;
pub mod bundle;
pub mod cli;
pub mod erf;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod nn;
pub mod ops;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{ConvGeometry, ConvParams, Element, Shape, Tensor};
