//! Cross-slice attention segmentation at desk scale.
//!
//! A self-contained stack for segmenting anisotropic volumes slice-stack by
//! slice-stack: a dense tensor core with reverse-mode differentiation, slice
//! transformer modules on the skip connections of a small 2D encoder-decoder,
//! a deterministic synthetic-volume generator, 3D evaluation metrics, and a
//! trainer with a CLI front end.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod manifest;
pub mod metrics;
pub mod net;
pub mod ops;
pub mod optim;
pub mod phantom;
pub mod scalar;
pub mod stats;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod volfile;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{LabelVolume, Tensor};
