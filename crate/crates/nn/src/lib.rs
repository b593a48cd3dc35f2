//! Minimal neural-network toolkit for classifying multi-channel evoked
//! responses: a reverse-mode tensor tape, a multi-scale 1D ResNet, a
//! cross-channel Transformer encoder with a CLS readout, weighted BCE and
//! AdamW.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` for training,
//! `f64` for gradient checks); the aliases below name the common choices.

pub mod checkpoint;
mod error;
pub mod layers;
pub mod loss;
pub mod model;
pub mod msresnet;
pub mod optim;
pub mod params;
mod scalar;
pub mod tape;
mod tensor;
pub mod transformer;

pub use checkpoint::Checkpoint;
pub use error::NnError;
pub use layers::Session;
pub use loss::{sigmoid, weighted_bce};
pub use model::{Model, ModelSpec};
pub use msresnet::{MsResNet, MsResNetSpec};
pub use optim::{adamw_step, AdamWConfig, AdamWState};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use transformer::{Encoder, TransformerSpec};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
