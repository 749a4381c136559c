//! TransPose: a convolutional stem followed by a Transformer encoder that
//! predicts keypoint heatmaps, plus tooling to explain its predictions through
//! the last layer's attention.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the aliases at the
//! crate root fix `f64`.

pub mod checkpoint;
pub mod encoder;
pub mod error;
pub mod explain;
pub mod export;
pub mod gradcheck;
pub mod heatmaps;
pub mod kernels;
pub mod model;
pub mod params;
pub mod posembed;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod training;

pub use checkpoint::{load_model, save_model};
pub use error::{Error, Result};
pub use model::{count_params, BackboneKind, HeadUpsample, ModelConfig, ParamCount};
pub use posembed::PeKind;
pub use rng::SplitMix64;
pub use scalar::Scalar;
pub use tape::Var;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tape::Tape<f64>;
pub type Model = model::Model<f64>;
pub type PositionEmbedding = posembed::PositionEmbedding<f64>;
