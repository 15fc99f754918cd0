//! Few-shot segmentation with symmetric support/query prototypes.
//!
//! A weight-shared encoder produces low/mid/high feature pyramids for the
//! support and query images. A parameter-free prior mask locates the query
//! object, text-conditioned attention refines both prototypes, a
//! hyper-correlation stack matches every block pair, and a multi-scale head
//! decodes the query mask.

pub mod apa;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
mod error;
pub mod eval;
pub mod fusion;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod params;
pub mod spm;
pub mod synthetic;
pub mod tdc;
pub mod train;

pub use config::Config;
pub use error::{Error, Result};
pub use symnet_tensor::{Real, Tensor};
