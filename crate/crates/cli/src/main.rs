//! `vtdrop`: schedule planning, cost reports, trace metrics and invariant
//! checks for hierarchical vision-token dropping.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "vtdrop", version, about)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Write CSV here (`-` for stdout instead of the text table).
    #[arg(long, global = true)]
    csv: Option<PathBuf>,
    /// Write the JSON mirror here (`-` for stdout).
    #[arg(long, global = true)]
    json: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-layer vision tokens and FLOPs of a schedule.
    Flops(ScheduleArgs),
    /// Keep-ratio curves of the generalized exponential decay family.
    SweepGed(SweepGedArgs),
    /// Build a schedule for an average-token budget.
    SchedulePlan(PlanArgs),
    /// Layer-wise metric curves from trace files.
    Metrics(MetricsArgs),
    /// Run the toy transformer under a schedule.
    Simulate(SimulateArgs),
    /// Run the invariant checks and report pass/fail.
    Verify(VerifyArgs),
    /// Check trace files against the schema.
    ValidateTrace {
        #[arg(required = true)]
        traces: Vec<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct ScheduleArgs {
    /// Model shape preset: toy, mobilellama-2.7b, llava-1.5-7b, llava-1.5-13b.
    #[arg(long)]
    model: Option<String>,
    /// Schedule preset: vanilla, reference-7b, avg-64.
    #[arg(long)]
    preset: Option<String>,
    /// Schedule TOML file.
    #[arg(long)]
    schedule: Option<PathBuf>,
    /// Target average vision tokens per layer.
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long)]
    inject: Option<usize>,
    #[arg(long)]
    exit: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    filters: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    stages: Option<Vec<usize>>,
    #[arg(long)]
    n_v: Option<usize>,
}

impl ScheduleArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(m) = &self.model {
            cfg.model.preset = Some(m.clone());
        }
        let s = &mut cfg.schedule;
        set(&mut s.preset, self.preset.clone());
        set(&mut s.file, self.schedule.clone());
        set(&mut s.budget, self.budget);
        set(&mut s.inject_layer, self.inject);
        set(&mut s.exit_layer, self.exit);
        set(&mut s.filter_layers, self.filters.clone());
        set(&mut s.stage_counts, self.stages.clone());
        set(&mut s.n_v, self.n_v);
    }
}

fn set<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

fn replace<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Debug, Args)]
struct SweepGedArgs {
    /// Shape exponents (default 0.25,0.5,1,2).
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    p: Option<Vec<f64>>,
    #[arg(long)]
    n_v: Option<usize>,
    /// End keep ratio (default 1/n_v).
    #[arg(long)]
    r_end: Option<f64>,
    /// Grid intervals over t in [0, 1].
    #[arg(long)]
    steps: Option<usize>,
    /// Emit per-layer counts over this inject,exit window instead of a t grid.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    layers: Option<Vec<usize>>,
    #[arg(long)]
    model: Option<String>,
}

#[derive(Debug, Args)]
struct PlanArgs {
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// Choose filter layers from the ILVAS peaks of this trace.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Number of filter layers to keep when choosing from a trace.
    #[arg(long, default_value_t = 4)]
    max_filters: usize,
    /// Write the resulting schedule as TOML.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    SIntra,
    SCross,
    Ilvas,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    #[arg(required = true)]
    traces: Vec<PathBuf>,
    #[arg(long, value_enum)]
    which: Metric,
    /// Top-K values for ILVAS (default 5,10,20,50,100,200).
    #[arg(long, value_delimiter = ',')]
    top_k: Option<Vec<usize>>,
    /// Layer offsets for ILVAS (default 4,8).
    #[arg(long, value_delimiter = ',')]
    window: Option<Vec<usize>>,
    /// Average over offsets 1..=n instead of using n alone.
    #[arg(long)]
    aggregate: bool,
    /// Pick valleys instead of peaks.
    #[arg(long)]
    valleys: bool,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    schedule: ScheduleArgs,
    /// persistent, compacted, group or group:<offset>.
    #[arg(long)]
    pe: Option<String>,
    /// removal or masking.
    #[arg(long)]
    attention: Option<String>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    vision: Option<usize>,
    #[arg(long)]
    system: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    text: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Record text-query attention and write the trace here.
    #[arg(long)]
    trace_out: Option<PathBuf>,
    /// Also trace the prompt with vision rows from this seed, tagged as the
    /// mismatched half of a pair.
    #[arg(long, requires = "trace_out")]
    pair_with: Option<u64>,
    /// Run the vision path concurrently with the shallow text layers.
    #[arg(long)]
    decoupled: bool,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per randomized check.
    #[arg(long, default_value_t = 10)]
    instances: usize,
    /// Also run the geometry check under compacted ids (expected to fail).
    #[arg(long)]
    force_compacted: bool,
    /// Perturb the 7B FLOPs golden so its check must fail.
    #[arg(long)]
    corrupt_golden: bool,
}

fn run(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.output.csv, cli.csv.clone());
    set(&mut cfg.output.json, cli.json.clone());
    let report = match cli.command {
        Command::Flops(args) => {
            args.apply(&mut cfg);
            commands::flops(&cfg)?
        }
        Command::SweepGed(args) => {
            replace(&mut cfg.sweep.p, args.p);
            set(&mut cfg.sweep.r_end, args.r_end);
            if let Some(n) = args.n_v {
                cfg.sweep.n_v = n;
            }
            if let Some(s) = args.steps {
                cfg.sweep.steps = s;
            }
            if let Some(m) = args.model {
                cfg.model.preset = Some(m);
            }
            match args.layers.as_deref() {
                Some([inject, exit]) => {
                    cfg.sweep.inject_layer = Some(*inject);
                    cfg.sweep.exit_layer = Some(*exit);
                }
                Some(_) => return Err("--layers takes exactly two values: inject,exit".into()),
                None => {}
            }
            commands::sweep_ged(&cfg)?
        }
        Command::SchedulePlan(args) => {
            args.schedule.apply(&mut cfg);
            commands::schedule_plan(&cfg, args.trace.as_deref(), args.max_filters, args.out.as_deref())?
        }
        Command::Metrics(args) => {
            replace(&mut cfg.sweep.top_k, args.top_k);
            replace(&mut cfg.sweep.window, args.window);
            commands::metrics(&cfg, &args.traces, args.which, args.aggregate, args.valleys)?
        }
        Command::Simulate(args) => {
            args.schedule.apply(&mut cfg);
            if let Some(pe) = args.pe {
                cfg.pe = pe;
            }
            if let Some(a) = args.attention {
                cfg.attention = a;
            }
            if let Some(s) = args.strategy {
                cfg.saliency.strategy = s;
            }
            if let Some(v) = args.vision {
                cfg.layout.vision = v;
            }
            if let Some(s) = args.system {
                cfg.layout.system = s;
            }
            if let Some(t) = args.text {
                cfg.layout.text = t;
            }
            if let Some(seed) = args.seed {
                cfg.seeds.model = seed;
            }
            commands::simulate(&cfg, args.trace_out.as_deref(), args.pair_with, args.decoupled)?
        }
        Command::Verify(args) => {
            let outcome = commands::verify(&cfg, args.seed, args.instances, args.force_compacted, args.corrupt_golden);
            outcome
                .report
                .emit(cfg.output.csv.as_deref(), cfg.output.json.as_deref())?;
            if outcome.failures.is_empty() {
                return Ok(ExitCode::SUCCESS);
            }
            eprintln!("verification failed: {}", outcome.failures.join(", "));
            return Ok(ExitCode::FAILURE);
        }
        Command::ValidateTrace { traces } => commands::validate_traces(&cfg, &traces)?,
    };
    report.emit(cfg.output.csv.as_deref(), cfg.output.json.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
