//! Reverse-attention saliency network, computed from scratch.
//!
//! The crate is `no_std` (it needs `alloc`). It holds the pure parts of the
//! system: a small dense-tensor engine with reverse-mode differentiation,
//! the network with its side-output residual units and reverse attention,
//! deep-supervision training, the saliency metrics and a synthetic shape
//! dataset generator. Everything that touches files lives in the `ras` crate.
//!
//! The `std` feature (on by default) only enables runtime CPU feature
//! detection in the matrix-multiply kernels.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod network;
mod ops;
pub mod real;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use network::{Backbone, ForwardOptions, Model, NetworkSpec, Prediction, SidePredictions};
pub use real::Real;
pub use tensor::{Shape, Tensor};
