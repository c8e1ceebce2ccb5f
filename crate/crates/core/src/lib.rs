//! Multi-stage residual hiding of images inside audio.
//!
//! A secret image is hidden across `t` non-overlapping subsequences of a
//! cover audio stream. Stage `i` embeds whatever the previous stages failed
//! to reveal, so later stages carry progressively sparser residuals and the
//! receiver sums the per-stage reveals to reconstruct the image.

pub mod carrier;
pub mod error;
pub mod experiments;
pub mod kv;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use carrier::{AudioStream, CarrierFrame, FramingPolicy, Manifest, PcmBits};
pub use error::{Error, Result};
pub use metrics::{QualityReport, SsimWindow};
pub use nn::{ModelConfig, StageModels, Variant};
pub use pipeline::{RevealState, SecretImage, StegoBundle};
pub use tensor::{Scalar, Tensor};
pub use training::TrainingConfig;
