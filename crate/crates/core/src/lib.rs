//! Latent molecular diffusion: equivariant autoencoder, latent score model,
//! ancestral sampler and native molecule metrics.

pub mod autodiff;
pub mod autoencoder;
pub mod diffusion;
pub mod egnn;
pub mod elements;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod hash;
pub mod invariant_net;
pub mod metrics;
pub mod nn;
pub mod noise;
pub mod optim;
pub mod sampler;
pub mod scalar;
pub mod selftest;
pub mod score_network;
pub mod tensor;
pub mod trainer;

pub use error::{LmdmError, Result};
pub use scalar::Scalar;
pub use tensor::Matrix;

pub type Matrix64 = tensor::Matrix<f64>;
pub type Matrix32 = tensor::Matrix<f32>;
pub type Molecule64 = geometry::Molecule<f64>;
pub type Molecule32 = geometry::Molecule<f32>;
pub type LatentState64 = autoencoder::LatentState<f64>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
pub type ParamStore32 = autodiff::ParamStore<f32>;
