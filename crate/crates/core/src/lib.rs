//! Fully dense encoder-decoder segmentation on a small reverse-mode autodiff
//! engine: dense blocks, adaptive aggregation of every previous block output,
//! a boundary-aware loss with deep supervision, plus training, multi-scale
//! inference and evaluation tooling.

pub mod bands;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod loss;
pub mod network;
pub mod params;
pub mod raster;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
