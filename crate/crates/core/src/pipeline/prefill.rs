//! Two-lane prefill: the vision lane produces embeddings and the
//! injection-layer vision KV while the text lane runs the shallow layers.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layout::SequenceLayout;
use crate::numeric::{seeded_matrix, Matrix};
use crate::schedule::{CostModel, ModelShape};

use super::forward::{AttentionMode, ForwardConfig, ForwardOutput, Runner};
use super::model::{Prompt, ToyModel};
use super::pe::{PeMode, PositionState};

/// Opaque encoder + projector: one embedding row per vision token.
pub trait VisionProducer: Sync {
    fn produce(&self, layout: &SequenceLayout, hidden: usize) -> Result<Matrix>;
}

/// Hands out fixed rows.
#[derive(Debug, Clone)]
pub struct FixedVision(pub Matrix);

impl VisionProducer for FixedVision {
    fn produce(&self, layout: &SequenceLayout, hidden: usize) -> Result<Matrix> {
        if self.0.rows() != layout.num_vision() || self.0.cols() != hidden {
            return Err(Error::LengthMismatch {
                expected: layout.num_vision(),
                got: self.0.rows(),
            });
        }
        Ok(self.0.clone())
    }
}

/// Same rows as the vision block of [`Prompt::synthetic`] with this seed.
#[derive(Debug, Clone, Copy)]
pub struct SeededVision(pub u64);

impl VisionProducer for SeededVision {
    fn produce(&self, layout: &SequenceLayout, hidden: usize) -> Result<Matrix> {
        let all = seeded_matrix(layout.len(), hidden, self.0, 1.0)?;
        let rows: Vec<Vec<f64>> = layout.vision_tokens().map(|v| all.row(v).to_vec()).collect();
        Matrix::from_rows(&rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecutionLog {
    /// Work items of the vision lane, in order.
    pub vision_lane: Vec<String>,
    /// Text layers run while the vision lane was in flight.
    pub overlapped_text_layers: Vec<usize>,
    /// Layers run after the lanes joined.
    pub joined_layers: Vec<usize>,
    /// Live vision tokens per layer `1..=L`.
    pub vision_counts: Vec<usize>,
    pub filter_stages: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyEstimate {
    pub serial: f64,
    pub decoupled: f64,
}

impl ExecutionLog {
    /// Lane durations under a cost model, combined serially and overlapped.
    pub fn estimate(&self, shape: &ModelShape, cost: &CostModel) -> LatencyEstimate {
        let layer = |l: &usize| cost.layer_seconds(self.vision_counts[l - 1], shape);
        let text_lane: f64 = self.overlapped_text_layers.iter().map(layer).sum();
        let rest: f64 = self.joined_layers.iter().map(layer).sum();
        let overhead = self.filter_stages as f64 * cost.stage_overhead_seconds;
        LatencyEstimate {
            serial: cost.vision_path_seconds + text_lane + rest + overhead,
            decoupled: cost.vision_path_seconds.max(text_lane) + rest + overhead,
        }
    }
}

type VisionLaneOutput = (Matrix, Vec<(usize, Vec<f64>, Vec<f64>)>);

/// Runs the schedule in removal mode with the vision lane on its own thread.
/// The prompt's vision rows are ignored; `producer` supplies them.
pub fn decoupled_prefill(
    model: &ToyModel,
    prompt: &Prompt,
    cfg: &ForwardConfig,
    producer: &dyn VisionProducer,
) -> Result<(ForwardOutput, ExecutionLog)> {
    let sched = &cfg.schedule;
    let inject = sched.inject_layer;
    if inject <= 1 {
        return Err(Error::param("inject_layer", "decoupled prefill needs inject_layer > 1"));
    }
    if cfg.mode != AttentionMode::Removal {
        return Err(Error::param("mode", "decoupled prefill runs in removal mode"));
    }
    if cfg.pe == PeMode::Compacted && sched.filter_layers.contains(&inject) {
        return Err(Error::param(
            "pe",
            "compacted ids change at the injection layer, so its vision KV cannot be precomputed",
        ));
    }
    let mut run = Runner::new(model, prompt, cfg)?;
    let layout = &prompt.layout;
    let ids = PositionState::new(layout, cfg.pe);
    let hidden = model.hidden();

    let vision_lane = || -> Result<VisionLaneOutput> {
        let rows = producer.produce(layout, hidden)?;
        if rows.rows() != layout.num_vision() || rows.cols() != hidden {
            return Err(Error::LengthMismatch {
                expected: layout.num_vision(),
                got: rows.rows(),
            });
        }
        let kv = layout
            .vision_tokens()
            .enumerate()
            .map(|(r, v)| {
                let (k, val) = model.key_value(inject, &model.attn_input(inject, rows.row(r)), ids.id(v));
                (v, k, val)
            })
            .collect();
        Ok((rows, kv))
    };

    let mut overlapped = Vec::new();
    let (lane, text) = std::thread::scope(|s| {
        let handle = s.spawn(vision_lane);
        let mut text = Ok(());
        for l in 1..inject {
            text = run.step(l);
            if text.is_err() {
                break;
            }
            overlapped.push(l);
        }
        (handle.join(), text)
    });
    text?;
    let (rows, kv) = lane.map_err(|_| Error::Invariant("vision lane panicked".into()))??;

    let cache = run.cache_mut().expect("removal mode owns a cache");
    for (v, k, val) in kv {
        cache.write(inject, v, k, val)?;
    }
    run.set_vision_rows(rows);
    let mut joined = Vec::new();
    for l in inject..=model.num_layers() {
        run.step(l)?;
        joined.push(l);
    }
    let out = run.finish()?;
    let log = ExecutionLog {
        vision_lane: vec![
            "produce vision embeddings".to_string(),
            format!("project vision KV for layer {inject}"),
        ],
        overlapped_text_layers: overlapped,
        joined_layers: joined,
        vision_counts: out.vision_counts(),
        filter_stages: sched.filter_layers.len(),
    };
    Ok((out, log))
}
