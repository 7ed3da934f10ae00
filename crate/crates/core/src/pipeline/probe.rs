//! Early-exit probe: how much the final logits move when every vision token
//! is dropped from a given layer on.

use crate::error::Result;
use crate::numeric::norm;
use crate::schedule::PruneSchedule;

use super::forward::{forward, ForwardConfig};
use super::model::{Prompt, ToyModel};

/// `(exit layer, L2 distance of final logits from the full-vision run)`.
/// An exit of `L + 1` never drops anything.
pub fn early_exit_probe(model: &ToyModel, prompt: &Prompt, exits: &[usize]) -> Result<Vec<(usize, f64)>> {
    let layers = model.num_layers();
    let n_v = prompt.layout.num_vision();
    let reference = forward(model, prompt, &ForwardConfig::new(PruneSchedule::vanilla(n_v, layers)))?;
    exits
        .iter()
        .map(|&e| {
            let out = forward(model, prompt, &ForwardConfig::new(PruneSchedule::window(n_v, 1, e)))?;
            let diff: Vec<f64> = out
                .logits
                .iter()
                .zip(&reference.logits)
                .map(|(a, b)| a - b)
                .collect();
            Ok((e, norm(&diff)))
        })
        .collect()
}
