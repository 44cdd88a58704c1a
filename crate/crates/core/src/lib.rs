//! Modality-agnostic transformer backbone with a graph-convolution point
//! tokenizer and an image-patch tokenizer, task decoders, weight transfer
//! from image-pretrained checkpoints, and the finetuning machinery.
//!
//! Every layer carries a hand-written backward pass. Everything here is pure
//! computation over in-memory values; file formats and the command line live
//! in the `crosstok` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod augment;
pub mod backbone;
pub mod data;
pub mod decoders;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod transfer;

pub use backbone::{Backbone, BackboneConfig, PosEmbed};
pub use error::{Error, Result};
pub use geometry::{Labels, NeighborIndex, PointCloud};
pub use params::{NamedTensors, Params};
pub use rng::RngStream;
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
pub use tokenizer::{InputMode, TokenSet};
