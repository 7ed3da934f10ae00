//! Run configuration shared by every subcommand.
//!
//! A config is a TOML document whose sections mirror [`RunConfig`]. Command
//! line flags are applied on top of the file, and the merged config is
//! resolved (and thereby validated) before a command does any work.
//!
//! ```toml
//! [model]
//! preset = "llava-1.5-7b"
//!
//! [schedule]
//! inject_layer = 9
//! exit_layer = 25
//! filter_layers = [10, 14, 16, 18]
//! stage_counts = [576, 256, 128, 64, 9]
//! n_v = 576
//!
//! pe = "persistent"
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vtdrop_core::importance::{HeadReduce, SaliencyConfig, SoftmaxDomain, Strategy};
use vtdrop_core::layout::SequenceLayout;
use vtdrop_core::pipeline::{AttentionMode, PeMode};
use vtdrop_core::schedule::{schedule_from_budget, ModelShape, PruneSchedule};

/// Small shape used when a command runs the toy transformer.
pub const TOY_SHAPE: ModelShape = ModelShape {
    layers: 12,
    hidden: 64,
    ffn: 128,
    heads: 4,
};

/// Field-level validation failures, reported together.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub Vec<String>);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration:")?;
        for msg in &self.0 {
            write!(f, "\n  - {msg}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    /// `toy`, `mobilellama-2.7b`, `llava-1.5-7b` or `llava-1.5-13b`.
    pub preset: Option<String>,
    pub layers: Option<usize>,
    pub hidden: Option<usize>,
    pub ffn: Option<usize>,
    pub heads: Option<usize>,
    pub vocab: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    /// `vanilla`, `reference-7b` (alias `avg-64`).
    pub preset: Option<String>,
    /// TOML file holding a serialized schedule.
    pub file: Option<PathBuf>,
    /// Target average vision tokens per layer; stages are searched.
    pub budget: Option<f64>,
    pub inject_layer: Option<usize>,
    pub exit_layer: Option<usize>,
    pub filter_layers: Option<Vec<usize>>,
    pub stage_counts: Option<Vec<usize>>,
    pub n_v: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayoutSpec {
    pub system: usize,
    pub vision: usize,
    pub text: Vec<usize>,
}

impl Default for LayoutSpec {
    fn default() -> Self {
        Self {
            system: 4,
            vision: 64,
            text: vec![8, 6],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaliencySpec {
    pub strategy: String,
    pub domain: SoftmaxDomain,
    pub heads: HeadReduce,
    pub lambda: Option<f64>,
    pub rounds: Option<Vec<usize>>,
}

impl Default for SaliencySpec {
    fn default() -> Self {
        Self {
            strategy: Strategy::LastTokenNR.name().into(),
            domain: SoftmaxDomain::VisionOnly,
            heads: HeadReduce::Mean,
            lambda: None,
            rounds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub model: u64,
    pub prompt: u64,
    pub vision: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            model: 11,
            prompt: 12,
            vision: 13,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    /// CSV destination; `-` is stdout.
    pub csv: Option<PathBuf>,
    pub json: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub p: Vec<f64>,
    pub top_k: Vec<usize>,
    pub window: Vec<usize>,
    pub n_v: usize,
    /// Defaults to `1 / n_v`, i.e. one token at the end of the window.
    pub r_end: Option<f64>,
    pub steps: usize,
    pub inject_layer: Option<usize>,
    pub exit_layer: Option<usize>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            p: vec![0.25, 0.5, 1.0, 2.0],
            top_k: vec![5, 10, 20, 50, 100, 200],
            window: vec![4, 8],
            n_v: 576,
            r_end: None,
            steps: 100,
            inject_layer: None,
            exit_layer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub schedule: ScheduleSpec,
    pub layout: LayoutSpec,
    pub pe: String,
    /// `removal` or `masking`.
    pub attention: String,
    pub saliency: SaliencySpec,
    pub seeds: Seeds,
    pub output: OutputSpec,
    pub sweep: SweepSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            schedule: ScheduleSpec::default(),
            layout: LayoutSpec::default(),
            pe: "persistent".into(),
            attention: "removal".into(),
            saliency: SaliencySpec::default(),
            seeds: Seeds::default(),
            output: OutputSpec::default(),
            sweep: SweepSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(vec![format!("{}: {e}", path.display())]))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| ConfigError(vec![format!("{}: {}", path.display(), e.message())]))?;
        // Relative schedule files are relative to the config file.
        if let (Some(file), Some(dir)) = (cfg.schedule.file.as_mut(), path.parent()) {
            if file.is_relative() {
                *file = dir.join(&*file);
            }
        }
        Ok(cfg)
    }

    /// SHA-256 over the canonical JSON form, output paths excluded.
    pub fn hash(&self) -> String {
        let mut stripped = self.clone();
        stripped.output = OutputSpec::default();
        let json = serde_json::to_string(&stripped).expect("config serializes");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn shape(&self, default_preset: &str) -> Result<ModelShape, ConfigError> {
        let m = &self.model;
        let explicit = [m.layers, m.hidden, m.ffn, m.heads];
        let base = match (&m.preset, explicit.iter().all(Option::is_some)) {
            (Some(name), _) => Some(preset_shape(name).ok_or_else(|| {
                ConfigError(vec![format!(
                    "model.preset: unknown preset `{name}`; expected toy, {}",
                    ModelShape::PRESET_NAMES.join(", ")
                )])
            })?),
            (None, true) => None,
            (None, false) if explicit.iter().any(Option::is_some) => {
                let missing: Vec<String> = ["layers", "hidden", "ffn", "heads"]
                    .iter()
                    .zip(explicit)
                    .filter(|(_, v)| v.is_none())
                    .map(|(k, _)| format!("model.{k} is required without model.preset"))
                    .collect();
                return Err(ConfigError(missing));
            }
            (None, false) => Some(preset_shape(default_preset).expect("default preset exists")),
        };
        let pick = |v: Option<usize>, b: Option<usize>| v.or(b).unwrap_or(0);
        let shape = ModelShape {
            layers: pick(m.layers, base.map(|b| b.layers)),
            hidden: pick(m.hidden, base.map(|b| b.hidden)),
            ffn: pick(m.ffn, base.map(|b| b.ffn)),
            heads: pick(m.heads, base.map(|b| b.heads)),
        };
        shape.validate().map_err(|e| ConfigError(vec![e.to_string()]))?;
        Ok(shape)
    }

    pub fn vocab(&self) -> usize {
        self.model.vocab.unwrap_or(32)
    }

    /// The configured schedule, or `default` when the section is empty.
    pub fn schedule(
        &self,
        layers: usize,
        default: impl FnOnce() -> PruneSchedule,
    ) -> Result<PruneSchedule, ConfigError> {
        let s = &self.schedule;
        let inline = s.inject_layer.is_some()
            || s.exit_layer.is_some()
            || s.filter_layers.is_some()
            || s.stage_counts.is_some();
        let sources: Vec<&str> = [
            ("schedule.preset", s.preset.is_some()),
            ("schedule.file", s.file.is_some()),
            ("schedule.budget", s.budget.is_some()),
        ]
        .iter()
        .filter(|(_, on)| *on)
        .map(|(k, _)| *k)
        .collect();
        if sources.len() > 1 {
            return Err(ConfigError(vec![format!(
                "schedule: {} are mutually exclusive",
                sources.join(" and ")
            )]));
        }
        let sched = if let Some(name) = &s.preset {
            if s.stage_counts.is_some() || s.filter_layers.is_some() {
                return Err(ConfigError(vec![
                    "schedule.preset cannot be combined with filter_layers or stage_counts".into(),
                ]));
            }
            match name.as_str() {
                "vanilla" => PruneSchedule::vanilla(s.n_v.unwrap_or(576), layers),
                "reference-7b" | "avg-64" => PruneSchedule::reference_7b(),
                other => {
                    return Err(ConfigError(vec![format!(
                        "schedule.preset: unknown preset `{other}`; expected vanilla, reference-7b or avg-64"
                    )]))
                }
            }
        } else if let Some(file) = &s.file {
            if inline {
                return Err(ConfigError(vec![
                    "schedule.file cannot be combined with inline schedule fields".into(),
                ]));
            }
            let text = std::fs::read_to_string(file)
                .map_err(|e| ConfigError(vec![format!("schedule.file {}: {e}", file.display())]))?;
            PruneSchedule::from_toml(&text)
                .map_err(|e| ConfigError(vec![format!("schedule.file {}: {e}", file.display())]))?
        } else if let Some(target) = s.budget {
            if s.stage_counts.is_some() {
                return Err(ConfigError(vec![
                    "schedule.budget derives stage_counts; remove schedule.stage_counts".into(),
                ]));
            }
            let (inject, exit) = required_window(s)?;
            schedule_from_budget(
                inject,
                exit,
                s.filter_layers.as_deref().unwrap_or(&[]),
                s.n_v.unwrap_or(576),
                target,
                layers,
            )
            .map_err(|e| ConfigError(vec![format!("schedule.budget: {e}")]))?
        } else if inline {
            let (inject, exit) = required_window(s)?;
            let (stage_counts, n_v) = match (&s.stage_counts, s.n_v) {
                (Some(stages), n_v) => (stages.clone(), n_v.or(stages.first().copied()).unwrap_or(0)),
                (None, Some(n_v)) if s.filter_layers.as_ref().map_or(true, Vec::is_empty) => (vec![n_v], n_v),
                (None, _) => {
                    return Err(ConfigError(vec![
                        "schedule.stage_counts is required (or schedule.n_v for a window without filters)".into(),
                    ]))
                }
            };
            PruneSchedule {
                inject_layer: inject,
                exit_layer: exit,
                filter_layers: s.filter_layers.clone().unwrap_or_default(),
                stage_counts,
                n_v,
            }
        } else {
            default()
        };
        sched
            .validate(layers)
            .map_err(|e| ConfigError(vec![format!("schedule: {e}")]))?;
        Ok(sched)
    }

    pub fn pe(&self) -> Result<PeMode, ConfigError> {
        self.pe
            .parse()
            .map_err(|e: vtdrop_core::Error| ConfigError(vec![e.to_string()]))
    }

    pub fn attention_mode(&self) -> Result<AttentionMode, ConfigError> {
        match self.attention.as_str() {
            "removal" => Ok(AttentionMode::Removal),
            "masking" => Ok(AttentionMode::Masking),
            other => Err(ConfigError(vec![format!(
                "attention: unknown mode `{other}`; expected removal or masking"
            )])),
        }
    }

    pub fn saliency(&self) -> Result<SaliencyConfig, ConfigError> {
        let s = &self.saliency;
        let strategy: Strategy = s.strategy.parse().map_err(|_| {
            ConfigError(vec![format!(
                "saliency.strategy: unknown strategy `{}`; expected one of {}",
                s.strategy,
                Strategy::ALL.map(|s| s.name()).join(", ")
            )])
        })?;
        if let Some(l) = s.lambda {
            if !(l > 0.0 && l.is_finite()) {
                return Err(ConfigError(vec![format!(
                    "saliency.lambda must be positive, got {l}"
                )]));
            }
        }
        let mut cfg = SaliencyConfig::new(strategy);
        cfg.domain = s.domain;
        cfg.heads = s.heads;
        cfg.lambda = s.lambda;
        cfg.rounds = s.rounds.clone();
        Ok(cfg)
    }

    pub fn layout(&self) -> Result<SequenceLayout, ConfigError> {
        let l = &self.layout;
        SequenceLayout::new(l.system, l.vision, &l.text)
            .map_err(|e| ConfigError(vec![format!("layout: {e}")]))
    }

    /// Checks the sweep axes every sweep-driven command relies on.
    pub fn validate_sweep(&self) -> Result<(), ConfigError> {
        let s = &self.sweep;
        let mut errors = Vec::new();
        if s.p.is_empty() {
            errors.push("sweep.p must list at least one value".to_string());
        }
        for p in &s.p {
            if !(*p > 0.0 && p.is_finite()) {
                errors.push(format!("sweep.p: every p must be positive, got {p}"));
            }
        }
        if s.n_v == 0 {
            errors.push("sweep.n_v must be positive".into());
        }
        if s.steps < 2 {
            errors.push(format!("sweep.steps must be at least 2, got {}", s.steps));
        }
        if let Some(r) = s.r_end {
            if !(r > 0.0 && r <= 1.0) {
                errors.push(format!("sweep.r_end must lie in (0, 1], got {r}"));
            }
        }
        if s.top_k.contains(&0) {
            errors.push("sweep.top_k values must be positive".into());
        }
        if s.window.contains(&0) {
            errors.push("sweep.window values must be positive".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigError(errors))
        }
    }
}

fn required_window(s: &ScheduleSpec) -> Result<(usize, usize), ConfigError> {
    match (s.inject_layer, s.exit_layer) {
        (Some(i), Some(e)) => Ok((i, e)),
        (i, e) => Err(ConfigError(
            [("inject_layer", i.is_none()), ("exit_layer", e.is_none())]
                .iter()
                .filter(|(_, missing)| *missing)
                .map(|(k, _)| format!("schedule.{k} is required"))
                .collect(),
        )),
    }
}

pub fn preset_shape(name: &str) -> Option<ModelShape> {
    match name {
        "toy" => Some(TOY_SHAPE),
        other => ModelShape::preset(other),
    }
}
