//! Omni-directional feature learning for person re-identification.
//!
//! A small CNN maps each image to a 16x8 grid of features. Three BiGRU
//! branches read that grid as a head-to-foot sequence, a left-to-right
//! sequence and a sequence of channel maps; a global head pools it into
//! `f_trip` and projects it to `f_oim`. Four OIM heads and one batch-hard
//! triplet loss supervise training.
//!
//! Everything numeric is generic over [`Scalar`]; training uses `f32` and
//! gradient checks use `f64`.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod gru;
pub mod losses;
pub mod model;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type ModelParams32 = model::ModelParams<f32>;
pub type ModelParams64 = model::ModelParams<f64>;
