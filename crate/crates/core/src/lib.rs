//! Single-stage visual grounding.
//!
//! Given an image and a natural-language query, the model predicts one
//! bounding box. Visual features from a three-scale convolutional pyramid are
//! matched against per-word features from a bidirectional LSTM; the matching
//! matrix drives both a per-cell text representation and a sigmoid attention
//! map that is supervised with a rectangular mask rasterized from the
//! ground-truth box. A single softmax over every anchor placement picks the
//! output box.
//!
//! The numerical core is a small reverse-mode autograd engine ([`nn`]) that
//! runs in 64-bit floats. Batch-level work fans out over rayon when the
//! `parallel` feature is on (the default); see [`exec`].

pub mod data;
pub mod error;
pub mod exec;
pub mod fusion_grounding;
pub mod geometry;
pub mod image_encoder;
pub mod losses;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod text_encoder;
pub mod train_eval;
pub mod verification;
pub mod vt_attention;

pub use error::{Error, Result};
pub use geometry::{AnchorBox, BBox, GridSpec};
pub use model::{AttnGrounder, ModelConfig};
pub use tensor::Tensor;
