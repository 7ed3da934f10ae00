#![allow(dead_code)]

use vtdrop_core::layout::SequenceLayout;
use vtdrop_core::numeric::SeededRng;
use vtdrop_core::pipeline::{Prompt, ToyModel};
use vtdrop_core::schedule::{ModelShape, PruneSchedule};

pub struct Instance {
    pub model: ToyModel,
    pub prompt: Prompt,
    pub schedule: PruneSchedule,
}

/// Random strictly decreasing stages starting at `n_v`.
pub fn random_stages(rng: &mut SeededRng, n_v: usize, drops: usize) -> Vec<usize> {
    let mut stages = vec![n_v];
    for s in 0..drops {
        let prev = stages[s];
        let floor = drops - s;
        stages.push(rng.range(floor, prev - 1));
    }
    stages
}

/// Random schedule over `layers` with inject in the first half, up to three
/// filter layers and an optional exit.
pub fn random_schedule(rng: &mut SeededRng, n_v: usize, layers: usize, min_inject: usize) -> PruneSchedule {
    let inject = rng.range(min_inject, layers / 2);
    let exit = rng.range(inject + 2, layers + 1);
    let mut pool: Vec<usize> = (inject..exit).collect();
    rng.shuffle(&mut pool);
    let drops = rng.range(0, 3.min(pool.len()));
    let mut filters: Vec<usize> = pool[..drops].to_vec();
    filters.sort_unstable();
    PruneSchedule {
        inject_layer: inject,
        exit_layer: exit,
        filter_layers: filters,
        stage_counts: random_stages(rng, n_v, drops),
        n_v,
    }
}

pub fn random_layout(rng: &mut SeededRng, n_v: usize) -> SequenceLayout {
    let segments: Vec<usize> = (0..rng.range(1, 3)).map(|_| rng.range(2, 4)).collect();
    SequenceLayout::new(rng.range(1, 3), n_v, &segments).unwrap()
}

/// d in {32, 64}, L in {8, 12}, N_v in {8, 16}.
pub fn random_instance(seed: u64, min_inject: usize) -> Instance {
    let mut rng = SeededRng::new(seed);
    let d = [32, 64][rng.range(0, 1)];
    let layers = [8, 12][rng.range(0, 1)];
    let n_v = [8, 16][rng.range(0, 1)];
    let shape = ModelShape::new(layers, d, 2 * d, 4).unwrap();
    let model = ToyModel::new(shape, 17, seed).unwrap();
    let layout = random_layout(&mut rng, n_v);
    let prompt = Prompt::synthetic(layout, d, seed ^ 0xA5A5, seed ^ 0x5A5A).unwrap();
    let schedule = random_schedule(&mut rng, n_v, layers, min_inject);
    Instance { model, prompt, schedule }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
