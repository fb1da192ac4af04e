//! Open-vocabulary semantic segmentation over dense image–text correlation
//! volumes.
//!
//! The crate is `no_std` (with `alloc`) and carries the whole numerical
//! pipeline: stub backbones, early refinement with windowed cross-attention,
//! correlation volumes, spatial/class late refinement, the upsampling
//! decoder, focal–dice losses, local–global tiled inference, evaluation
//! tooling and a synthetic training loop. IO, file formats and the CLI live
//! in the companion `ovseg` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autograd;
pub mod config;
pub mod correlation;
pub mod decoder;
pub mod early_refinement;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod late_refinement;
pub mod lga;
pub mod losses;
pub mod math;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;
pub mod types;

pub use config::{EncoderConfig, LgaConfig, LossConfig, ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::Model;
pub use tensor::Tensor;
pub use types::{
    ClsToken, CorrelationVolume, FeatureMap, GuidancePyramid, ImageTensor, LogitMap, SegMap,
    SimilarityVolume, TextEmbeddingSet,
};
