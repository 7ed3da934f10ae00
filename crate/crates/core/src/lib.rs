//! Hierarchical vision-token dropping for multimodal decoders: late
//! injection, differentiable top-k pruning at filter layers and early exit,
//! run on a small deterministic transformer, with the layer-wise metrics and
//! cost model used to choose a schedule.
//!
//! Layers are 1-based throughout; layer 0 denotes the embeddings.

pub mod dtopk;
pub mod error;
pub mod importance;
pub mod layout;
pub mod metrics;
pub mod numeric;
pub mod oracle;
pub mod pipeline;
pub mod schedule;
pub mod trace;

pub use error::{Error, Result};
