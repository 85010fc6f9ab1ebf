//! Source-free active learning for volumetric segmentation.
//!
//! * [`tensor`]: dense tensors, probability volumes, embeddings, numeric kernels, file I/O
//! * [`query`]: DKD / ASD scoring and the fused query criterion
//! * [`reliability`]: confidence and semantic-distance driven pseudo-label selection
//! * [`orchestrator`]: the round loop, adapters, manifests and resumption

pub mod error;
pub mod fsutil;
pub mod orchestrator;
pub mod query;
pub mod reliability;
pub mod scores;
pub mod tensor;

pub use error::{Error, Result};
pub use scores::ScoreVector;
