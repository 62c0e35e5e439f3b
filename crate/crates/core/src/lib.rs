//! Self-supervised scene text segmentation from text-region polygons.
//!
//! Everything numeric is generic over [`scalar::Scalar`] (`f32` for training and inference,
//! `f64` for gradient checks). The aliases below fix the common choices.

pub mod autograd;
pub mod binding;
pub mod conv;
pub mod datamodel;
pub mod decoding;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod region_query;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = autograd::Graph<f32>;
pub type Graph64 = autograd::Graph<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Segmenter32 = eval::Segmenter<f32>;
pub type RegionCrop32 = datamodel::crop::RegionCrop<f32>;
