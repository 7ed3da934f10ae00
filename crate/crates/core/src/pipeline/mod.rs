//! Toy decoder running the full inject / filter / exit lifecycle.

mod forward;
mod kv;
mod model;
mod pe;
mod prefill;
mod probe;

pub use forward::{
    decode_step, forward, reference_forward, AttentionMode, Capture, ForwardConfig, ForwardOutput,
};
pub use kv::{KvCache, KvEntry};
pub use model::{rms_norm, LayerWeights, Prompt, ToyModel};
pub use pe::{PeMode, PositionState};
pub use prefill::{decoupled_prefill, ExecutionLog, FixedVision, LatencyEstimate, SeededVision, VisionProducer};
pub use probe::early_exit_probe;
