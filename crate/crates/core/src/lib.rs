//! Multi-organ, multi-tumor segmentation from partially labeled data with a
//! single network whose segmentation heads are generated per task.
//!
//! A residual 3D encoder-decoder ([`backbone`]) produces a feature pyramid
//! and a shared pre-segmentation map. A deformable transformer
//! ([`transformer`]) reads the coarsest pyramid levels and decodes one
//! embedding per task query; a small MLP ([`head`]) turns each embedding into
//! the kernels of that task's pointwise convolution head.

pub mod attention;
pub mod backbone;
pub mod config;
pub mod data;
pub mod engine;
mod error;
pub mod head;
pub mod model;
pub mod objective;
pub mod params;
pub mod posenc;
pub mod transformer;
pub mod verify;

pub use config::{BackboneConfig, FusionMode, HeadConfig, ModelConfig, TransformerConfig};
pub use error::{Error, Result};
pub use model::Model;
