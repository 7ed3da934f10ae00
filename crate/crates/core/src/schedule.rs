//! Per-layer vision-token budgets and the cost models built on them.
//!
//! Layers are 1-based. A [`PruneSchedule`] injects `n_v` vision tokens at
//! `inject_layer`, shrinks them to `stage_counts[s]` at each filter layer
//! and drops them all at `exit_layer` (`L + 1` means they never exit). A
//! filter layer already runs on the reduced set: selection happens between
//! layer `f - 1` and layer `f`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub layers: usize,
    pub hidden: usize,
    pub ffn: usize,
    pub heads: usize,
}

impl ModelShape {
    pub const MOBILELLAMA_2_7B: ModelShape = ModelShape {
        layers: 32,
        hidden: 2560,
        ffn: 6912,
        heads: 32,
    };
    pub const VICUNA_7B: ModelShape = ModelShape {
        layers: 32,
        hidden: 4096,
        ffn: 11008,
        heads: 32,
    };
    pub const VICUNA_13B: ModelShape = ModelShape {
        layers: 40,
        hidden: 5120,
        ffn: 13824,
        heads: 40,
    };

    pub fn new(layers: usize, hidden: usize, ffn: usize, heads: usize) -> Result<Self> {
        let shape = Self {
            layers,
            hidden,
            ffn,
            heads,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("layers", self.layers),
            ("hidden", self.hidden),
            ("ffn", self.ffn),
            ("heads", self.heads),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.hidden ({}) must be divisible by model.heads ({})",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Named shapes: `mobilellama-2.7b`, `llava-1.5-7b`, `llava-1.5-13b`.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "mobilellama-2.7b" | "llava-1.5-mobilellama-2.7b" | "2.7b" => {
                Some(Self::MOBILELLAMA_2_7B)
            }
            "llava-1.5-7b" | "vicuna-7b" | "7b" => Some(Self::VICUNA_7B),
            "llava-1.5-13b" | "vicuna-13b" | "13b" => Some(Self::VICUNA_13B),
            _ => None,
        }
    }

    pub const PRESET_NAMES: [&'static str; 3] = ["mobilellama-2.7b", "llava-1.5-7b", "llava-1.5-13b"];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSchedule {
    pub inject_layer: usize,
    pub exit_layer: usize,
    #[serde(default)]
    pub filter_layers: Vec<usize>,
    pub stage_counts: Vec<usize>,
    pub n_v: usize,
}

impl PruneSchedule {
    /// Vision tokens present on every layer, never pruned.
    pub fn vanilla(n_v: usize, layers: usize) -> Self {
        Self {
            inject_layer: 1,
            exit_layer: layers + 1,
            filter_layers: Vec::new(),
            stage_counts: vec![n_v],
            n_v,
        }
    }

    /// Late injection and early exit with no pruning in between.
    pub fn window(n_v: usize, inject_layer: usize, exit_layer: usize) -> Self {
        Self {
            inject_layer,
            exit_layer,
            filter_layers: Vec::new(),
            stage_counts: vec![n_v],
            n_v,
        }
    }

    /// The 7B configuration: inject at 9, exit at 25, filters {10, 14, 16, 18},
    /// stages 576 -> 256 -> 128 -> 64 -> 9 (63.97 tokens on average over 32 layers).
    pub fn reference_7b() -> Self {
        Self {
            inject_layer: 9,
            exit_layer: 25,
            filter_layers: vec![10, 14, 16, 18],
            stage_counts: vec![576, 256, 128, 64, 9],
            n_v: 576,
        }
    }

    /// Stages applied at evenly spaced layers across `[inject_layer, exit_layer)`.
    pub fn evenly_spaced(stages: &[usize], inject_layer: usize, exit_layer: usize) -> Result<Self> {
        let first = *stages.first().ok_or(Error::EmptyInput)?;
        let span = exit_layer.saturating_sub(inject_layer);
        let drops = stages.len() - 1;
        let filter_layers = (1..=drops)
            .map(|s| inject_layer + (s * span + (drops + 1) / 2) / (drops + 1))
            .collect();
        Ok(Self {
            inject_layer,
            exit_layer,
            filter_layers,
            stage_counts: stages.to_vec(),
            n_v: first,
        })
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        self.validate_layers(layers)?;
        self.validate_counts()
    }

    fn validate_layers(&self, layers: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Schedule(msg));
        if self.inject_layer < 1 {
            return bad("inject_layer must be >= 1".into());
        }
        if self.exit_layer > layers + 1 {
            return bad(format!(
                "exit_layer {} exceeds L + 1 = {}",
                self.exit_layer,
                layers + 1
            ));
        }
        if self.inject_layer > self.exit_layer {
            return bad(format!(
                "inject_layer {} must not exceed exit_layer {}",
                self.inject_layer, self.exit_layer
            ));
        }
        if self.filter_layers.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "filter_layers {:?} must be strictly increasing",
                self.filter_layers
            ));
        }
        if let (Some(&lo), Some(&hi)) = (self.filter_layers.first(), self.filter_layers.last()) {
            if lo < self.inject_layer {
                return bad(format!(
                    "min(filter_layers) = {lo} precedes inject_layer {}",
                    self.inject_layer
                ));
            }
            if hi >= self.exit_layer {
                return bad(format!(
                    "max(filter_layers) = {hi} must precede exit_layer {}",
                    self.exit_layer
                ));
            }
        }
        Ok(())
    }

    fn validate_counts(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Schedule(msg));
        if self.stage_counts.len() != self.filter_layers.len() + 1 {
            return bad(format!(
                "stage_counts has {} entries, expected |filter_layers| + 1 = {}",
                self.stage_counts.len(),
                self.filter_layers.len() + 1
            ));
        }
        if self.stage_counts[0] != self.n_v {
            return bad(format!(
                "stage_counts[0] = {} must equal n_v = {}",
                self.stage_counts[0], self.n_v
            ));
        }
        if self.stage_counts.windows(2).any(|w| w[0] <= w[1]) {
            return bad(format!(
                "stage_counts {:?} must be strictly decreasing",
                self.stage_counts
            ));
        }
        if self.stage_counts.last() == Some(&0) {
            return bad("stage counts must be positive".into());
        }
        Ok(())
    }

    /// Stage index in force at `layer`, or `None` where no vision token is alive.
    pub fn stage_at(&self, layer: usize) -> Option<usize> {
        if layer < self.inject_layer || layer >= self.exit_layer {
            return None;
        }
        Some(self.filter_layers.iter().filter(|&&f| f <= layer).count())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("schedule serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }
}

pub fn layer_token_counts(sched: &PruneSchedule, layers: usize) -> Result<Vec<usize>> {
    sched.validate(layers)?;
    Ok((1..=layers)
        .map(|l| sched.stage_at(l).map_or(0, |s| sched.stage_counts[s]))
        .collect())
}

pub fn average_tokens(counts: &[usize], layers: usize) -> f64 {
    counts.iter().sum::<usize>() as f64 / layers as f64
}

/// Fraction of vision tokens removed relative to keeping all `n_v` everywhere.
pub fn reduction(average: f64, n_v: usize) -> f64 {
    1.0 - average / n_v as f64
}

/// Vision-token FLOPs of one block: `4 n d^2 + 2 n^2 d + 3 n d m`.
pub fn layer_flops(n: usize, shape: &ModelShape) -> u128 {
    let (n, d, m) = (n as u128, shape.hidden as u128, shape.ffn as u128);
    4 * n * d * d + 2 * n * n * d + 3 * n * d * m
}

/// Sum of [`layer_flops`] over layers. Text tokens are not counted.
pub fn flops(counts: &[usize], shape: &ModelShape) -> u128 {
    counts.iter().map(|&n| layer_flops(n, shape)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayKind {
    Ed,
    Ged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayCurve {
    pub kind: DecayKind,
    /// Shape exponent; ignored by `Ed`.
    pub p: f64,
    pub r_end: f64,
}

impl DecayCurve {
    pub fn ed(r_end: f64) -> Self {
        Self {
            kind: DecayKind::Ed,
            p: 1.0,
            r_end,
        }
    }

    pub fn ged(p: f64, r_end: f64) -> Self {
        Self {
            kind: DecayKind::Ged,
            p,
            r_end,
        }
    }

    /// `r(t) = r_end^(t^p)`; `Ed` is the `p = 1` member.
    pub fn keep_ratio(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::param("t", format!("must lie in [0, 1], got {t}")));
        }
        if !(self.r_end > 0.0 && self.r_end <= 1.0) {
            return Err(Error::param("r_end", format!("must lie in (0, 1], got {}", self.r_end)));
        }
        let exponent = match self.kind {
            DecayKind::Ed => t,
            DecayKind::Ged => {
                if !(self.p > 0.0) {
                    return Err(Error::param("p", format!("must be positive, got {}", self.p)));
                }
                t.powf(self.p)
            }
        };
        Ok(self.r_end.powf(exponent))
    }

    /// Per-layer counts `max(1, round(n_v * r(t)))` with `t` spanning the
    /// live window `[inject_layer, exit_layer - 1]`.
    pub fn layer_counts(
        &self,
        n_v: usize,
        inject_layer: usize,
        exit_layer: usize,
        layers: usize,
    ) -> Result<Vec<usize>> {
        PruneSchedule::window(n_v, inject_layer, exit_layer).validate(layers)?;
        let last = exit_layer.saturating_sub(1);
        let width = last.saturating_sub(inject_layer);
        (1..=layers)
            .map(|l| {
                if l < inject_layer || l >= exit_layer {
                    return Ok(0);
                }
                let t = if width == 0 {
                    0.0
                } else {
                    (l - inject_layer) as f64 / width as f64
                };
                let r = self.keep_ratio(t)?;
                Ok(((n_v as f64 * r).round() as usize).max(1))
            })
            .collect()
    }
}

pub fn decay_keep_ratio(curve: &DecayCurve, t: f64) -> Result<f64> {
    curve.keep_ratio(t)
}

/// Layers covered by each stage of a schedule with the given boundaries.
fn stage_spans(inject_layer: usize, exit_layer: usize, filters: &[usize]) -> Vec<usize> {
    let mut bounds = Vec::with_capacity(filters.len() + 2);
    bounds.push(inject_layer);
    bounds.extend_from_slice(filters);
    bounds.push(exit_layer);
    bounds.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Searches concave stage counts whose per-layer average is within one
/// token of `target_avg`.
///
/// Each stage keeps at most half of the previous one. Intermediate stages
/// follow a geometric ratio `rho <= 1/2`, scanned on a fixed grid from 1/2
/// downward; the final stage absorbs the residual. The candidate closest to
/// the target wins, earlier (gentler) ratios winning ties.
pub fn schedule_from_budget(
    inject_layer: usize,
    exit_layer: usize,
    filters: &[usize],
    n_v: usize,
    target_avg: f64,
    layers: usize,
) -> Result<PruneSchedule> {
    if !(target_avg >= 0.0) || !target_avg.is_finite() {
        return Err(Error::param(
            "target_avg",
            format!("must be a nonnegative number, got {target_avg}"),
        ));
    }
    let probe = PruneSchedule {
        inject_layer,
        exit_layer,
        filter_layers: filters.to_vec(),
        stage_counts: Vec::new(),
        n_v,
    };
    probe.validate_layers(layers)?;

    let spans = stage_spans(inject_layer, exit_layer, filters);
    let stages = filters.len();
    let target_total = target_avg * layers as f64;
    let avg = |counts: &[usize]| {
        counts.iter().zip(&spans).map(|(c, s)| c * s).sum::<usize>() as f64 / layers as f64
    };

    // Smallest feasible chain ends at 1 and doubles backwards.
    let min_chain: Vec<usize> = std::iter::once(n_v)
        .chain((1..=stages).map(|s| 1usize << (stages - s)))
        .collect();
    let mut max_chain = vec![n_v];
    for s in 1..=stages {
        max_chain.push(max_chain[s - 1] / 2);
    }
    let (min_avg, max_avg) = (avg(&min_chain), avg(&max_chain));
    let infeasible = || Error::InfeasibleBudget {
        target: target_avg,
        min: min_avg,
        max: max_avg,
    };
    if stages > 0 && min_chain[1] > max_chain[1] {
        return Err(infeasible());
    }
    if target_avg < min_avg - 1.0 || target_avg > max_avg + 1.0 {
        return Err(infeasible());
    }
    if stages == 0 {
        return Ok(PruneSchedule {
            stage_counts: vec![n_v],
            ..probe
        });
    }

    const GRID: usize = 4000;
    let mut best: Option<(f64, Vec<usize>)> = None;
    for step in 0..GRID {
        let rho = 0.5 * (GRID - step) as f64 / GRID as f64;
        let mut counts = vec![n_v];
        for s in 1..stages {
            let prev = counts[s - 1];
            let want = (prev as f64 * rho).floor() as usize;
            counts.push(want.clamp(min_chain[s], prev / 2));
        }
        let partial: usize = counts.iter().zip(&spans).map(|(c, s)| c * s).sum();
        let last_span = spans[stages] as f64;
        let want = ((target_total - partial as f64) / last_span).round();
        let cap = counts[stages - 1] / 2;
        counts.push((want.max(1.0) as usize).min(cap));
        let err = (avg(&counts) - target_avg).abs();
        if best.as_ref().map_or(true, |(e, _)| err < *e) {
            best = Some((err, counts));
        }
    }
    match best {
        Some((err, counts)) if err <= 1.0 => Ok(PruneSchedule {
            stage_counts: counts,
            ..probe
        }),
        _ => Err(infeasible()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Sustained throughput applied to vision-token FLOPs.
    pub flops_per_second: f64,
    /// Fixed per-layer cost of the text stream.
    pub text_layer_seconds: f64,
    /// Vision encoder plus projector.
    pub vision_path_seconds: f64,
    /// Selection overhead paid once per filter stage.
    pub stage_overhead_seconds: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            flops_per_second: 120e12,
            text_layer_seconds: 0.6e-3,
            vision_path_seconds: 6.0e-3,
            stage_overhead_seconds: 0.4e-3,
        }
    }
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.flops_per_second > 0.0) {
            return Err(Error::Config("cost.flops_per_second must be positive".into()));
        }
        for (name, v) in [
            ("text_layer_seconds", self.text_layer_seconds),
            ("vision_path_seconds", self.vision_path_seconds),
            ("stage_overhead_seconds", self.stage_overhead_seconds),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("cost.{name} must be nonnegative")));
            }
        }
        Ok(())
    }

    pub fn layer_seconds(&self, vision_tokens: usize, shape: &ModelShape) -> f64 {
        self.text_layer_seconds + layer_flops(vision_tokens, shape) as f64 / self.flops_per_second
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrefillMode {
    Serial,
    Decoupled,
}

/// What the latency model needs from a schedule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefillPlan {
    pub counts: Vec<usize>,
    pub inject_layer: usize,
    pub filter_stages: usize,
}

impl PrefillPlan {
    pub fn from_schedule(sched: &PruneSchedule, layers: usize) -> Result<Self> {
        Ok(Self {
            counts: layer_token_counts(sched, layers)?,
            inject_layer: sched.inject_layer,
            filter_stages: sched.filter_layers.len(),
        })
    }
}

pub fn prefill_latency(
    plan: &PrefillPlan,
    shape: &ModelShape,
    cost: &CostModel,
    mode: PrefillMode,
) -> f64 {
    let split = plan.inject_layer.saturating_sub(1).min(plan.counts.len());
    let layer = |n: &usize| cost.layer_seconds(*n, shape);
    let shallow: f64 = plan.counts[..split].iter().map(layer).sum();
    let rest: f64 = plan.counts[split..].iter().map(layer).sum();
    let overhead = plan.filter_stages as f64 * cost.stage_overhead_seconds;
    match mode {
        PrefillMode::Serial => cost.vision_path_seconds + shallow + rest + overhead,
        PrefillMode::Decoupled => cost.vision_path_seconds.max(shallow) + rest + overhead,
    }
}
