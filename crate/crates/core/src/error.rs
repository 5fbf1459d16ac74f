use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::tensor::Shape;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Data length does not agree with the declared shape.
    DataLength { shape: Shape, len: usize },
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    /// Even kernel sizes cannot be zero-padded symmetrically.
    EvenKernel { kh: usize, kw: usize },
    OddSpatial { op: &'static str, shape: Shape },
    InvalidUpsampleFactor(usize),
    NonBinaryTarget { index: usize },
    NotScalar(Shape),
    /// Height or width is not a multiple of 32.
    NotDivisible { height: usize, width: usize },
    InvalidSpec(String),
    InvalidConfig(String),
    /// A parameter the model layout expects is missing or malformed.
    Parameter(String),
    NonFiniteLoss {
        iteration: u64,
        param_norms: Vec<(String, f64)>,
    },
    EmptyDataset,
    Metric(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DataLength { shape, len } => {
                write!(f, "data length {len} does not match shape {shape} ({} elements)", shape.len())
            }
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left} and {right}")
            }
            Error::EvenKernel { kh, kw } => write!(f, "conv2d: kernel {kh}x{kw} must have odd sides"),
            Error::OddSpatial { op, shape } => {
                write!(f, "{op}: spatial dims of {shape} must be even")
            }
            Error::InvalidUpsampleFactor(k) => {
                write!(f, "upsample factor {k} is not one of 2, 4, 8, 16, 32")
            }
            Error::NonBinaryTarget { index } => {
                write!(f, "target value at index {index} is not 0 or 1")
            }
            Error::NotScalar(shape) => write!(f, "backward needs a scalar root, got shape {shape}"),
            Error::NotDivisible { height, width } => {
                let pad_h = (32 - height % 32) % 32;
                let pad_w = (32 - width % 32) % 32;
                write!(
                    f,
                    "input {height}x{width} is not divisible by 32; pad by {pad_h} rows and {pad_w} columns"
                )
            }
            Error::InvalidSpec(msg) => write!(f, "invalid network spec: {msg}"),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::Parameter(msg) => write!(f, "parameter store: {msg}"),
            Error::NonFiniteLoss {
                iteration,
                param_norms,
            } => {
                write!(f, "non-finite loss at iteration {iteration}; parameter norms:")?;
                for (name, norm) in param_norms {
                    write!(f, "\n  {name}: {norm:e}")?;
                }
                Ok(())
            }
            Error::EmptyDataset => write!(f, "dataset is empty"),
            Error::Metric(msg) => write!(f, "evaluation: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
