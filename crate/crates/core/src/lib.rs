//! Desk-scale decoder-only transformer inference on the CPU.
//!
//! The engine bounds per-token cost and KV memory with sliding window
//! attention served from a rolling buffer cache of `window_size` slots per
//! layer, pre-fills prompts in window-sized chunks, and shares key/value
//! heads across groups of query heads. [`oracle`] holds slow full-history
//! baselines that the fast path is checked against.

pub mod attention;
pub mod cache;
pub mod config;
pub mod error;
pub mod model;
pub mod oracle;
pub mod sampling;
pub mod tensor;
pub mod verify;
pub mod weights;

pub use attention::{AttentionMask, HeadGrouping};
pub use cache::{RollingKvCache, WindowView};
pub use config::{ModelConfig, Violation};
pub use error::{Error, Result};
pub use model::{DecoderWeights, GenerationOutput, GenerationSession, LayerWeights};
pub use sampling::SamplerSpec;
pub use tensor::Tensor;
