//! File formats, dataset directories, configuration and command-line
//! workflows around [`ras_core`].
//!
//! - [`pnm`]: binary PPM/PGM images.
//! - [`weights`]: the RASW weight format.
//! - [`dataset`]: `images/` + `masks/` directories and dataset evaluation.
//! - [`config`]: JSON run configuration.
//! - [`pipeline`]: train, predict, evaluate and ablation workflows.
//! - [`cli`]: the `ras` binary.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod pipeline;
pub mod pnm;
pub mod report;
pub mod weights;

pub use error::{Error, Result};
