//! Noise-robust vision-language pre-training at desk scale.
//!
//! A small bridging transformer between frozen encoder stand-ins is trained
//! with noise-adaptive contrastive learning and concept-enhanced
//! matching/generation on synthetic image-caption pairs with planted noise.
//!
//! The numeric core ([`tensor`], [`autodiff`], [`objectives`], [`noise_gmm`],
//! [`optim`]) is generic over [`Scalar`]; the model and pipeline run in `f64`
//! through the aliases below.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod data;
pub mod error;
pub mod eval;
pub mod frozen;
pub mod gradcheck;
pub mod gradsuite;
pub mod masks;
pub mod model;
pub mod noise_gmm;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type Gradients = autodiff::Gradients<f64>;
