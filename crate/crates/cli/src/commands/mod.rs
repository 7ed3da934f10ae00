//! Subcommand bodies. Each resolves its slice of the config up front and
//! returns a [`Report`].

mod verify;

use std::error::Error;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use vtdrop_core::metrics::{
    ilvas, pair_traces, s_cross, s_intra, select_filter_layers, strongest, Extremum, IlvasCurve, IlvasMode,
};
use vtdrop_core::pipeline::{decoupled_prefill, forward, Capture, FixedVision, ForwardConfig, Prompt, ToyModel};
use vtdrop_core::schedule::{
    average_tokens, flops as total_flops, layer_flops, layer_token_counts, reduction, CostModel, DecayCurve,
    PruneSchedule,
};
use vtdrop_core::trace::{read_traces, write_traces, LayerTrace, Modality, Pairing};

use crate::config::{ConfigError, RunConfig};
use crate::report::{num, Report};
use crate::Metric;

pub use verify::verify;

type CmdResult = Result<Report, Box<dyn Error>>;

const SCALE_MODEL: &str = "llava-1.5-7b";

fn tflops(f: u128) -> f64 {
    f as f64 / 1e12
}

fn schedule_summary(r: &mut Report, sched: &PruneSchedule, counts: &[usize]) {
    let layers = counts.len();
    let avg = average_tokens(counts, layers);
    r.note("inject_layer", sched.inject_layer.to_string());
    r.note("exit_layer", sched.exit_layer.to_string());
    r.note("filter_layers", format!("{:?}", sched.filter_layers));
    r.note("stage_counts", format!("{:?}", sched.stage_counts));
    r.note("average_tokens", format!("{avg:.3}"));
    r.note("reduction", format!("{:.1}%", 100.0 * reduction(avg, sched.n_v)));
}

pub fn flops(cfg: &RunConfig) -> CmdResult {
    let shape = cfg.shape(SCALE_MODEL)?;
    let sched = cfg.schedule(shape.layers, || PruneSchedule::vanilla(576, shape.layers))?;
    let counts = layer_token_counts(&sched, shape.layers)?;
    let mut r = Report::new(cfg.hash(), &["layer", "vision_tokens", "tflops"]);
    for (i, &n) in counts.iter().enumerate() {
        r.push(vec![(i + 1).to_string(), n.to_string(), num(tflops(layer_flops(n, &shape)))]);
    }
    let total = total_flops(&counts, &shape);
    let avg = average_tokens(&counts, shape.layers);
    r.push(vec!["total".into(), format!("{avg:.3}"), num(tflops(total))]);
    r.note("total", format!("{:.2} TFLOPs", tflops(total)));
    r.note("total_flops", total.to_string());
    schedule_summary(&mut r, &sched, &counts);
    Ok(r)
}

pub fn sweep_ged(cfg: &RunConfig) -> CmdResult {
    cfg.validate_sweep()?;
    let s = &cfg.sweep;
    let r_end = s.r_end.unwrap_or(1.0 / s.n_v as f64);
    let mut ps = s.p.clone();
    ps.sort_by(f64::total_cmp);
    ps.dedup();
    let mut columns = vec!["t".to_string(), "ed".to_string()];
    columns.extend(ps.iter().map(|p| format!("p={p}")));
    let cols: Vec<&str> = columns.iter().map(String::as_str).collect();

    if let (Some(inject), Some(exit)) = (s.inject_layer, s.exit_layer) {
        let layers = cfg.shape(SCALE_MODEL)?.layers;
        PruneSchedule::window(s.n_v, inject, exit)
            .validate(layers)
            .map_err(|e| ConfigError(vec![format!("sweep window: {e}")]))?;
        let counts = |c: DecayCurve| c.layer_counts(s.n_v, inject, exit, layers);
        let ed = counts(DecayCurve::ed(r_end))?;
        let curves: Vec<Vec<usize>> = ps
            .par_iter()
            .map(|&p| counts(DecayCurve::ged(p, r_end)))
            .collect::<Result<_, _>>()?;
        for w in curves.windows(2) {
            if let Some(l) = (0..layers).find(|&l| w[0][l] > w[1][l]) {
                return Err(format!("ordering violated at layer {}", l + 1).into());
            }
        }
        let mut cols = cols;
        cols[0] = "layer";
        let mut r = Report::new(cfg.hash(), &cols);
        for l in inject..exit {
            let mut row = vec![l.to_string(), ed[l - 1].to_string()];
            row.extend(curves.iter().map(|c| c[l - 1].to_string()));
            r.push(row);
        }
        r.note("ordering", "lower p keeps no more tokens than higher p at every layer");
        return Ok(r);
    }

    let grid: Vec<f64> = (0..=s.steps).map(|i| i as f64 / s.steps as f64).collect();
    let tokens = |c: DecayCurve| -> Result<Vec<f64>, vtdrop_core::Error> {
        grid.iter().map(|&t| Ok(s.n_v as f64 * c.keep_ratio(t)?)).collect()
    };
    let ed = tokens(DecayCurve::ed(r_end))?;
    let curves: Vec<Vec<f64>> = ps
        .par_iter()
        .map(|&p| tokens(DecayCurve::ged(p, r_end)))
        .collect::<Result<_, _>>()?;

    let interior = 1..s.steps;
    if r_end < 1.0 {
        for (w, pair) in curves.windows(2).zip(ps.windows(2)) {
            if let Some(i) = interior.clone().find(|&i| w[0][i] >= w[1][i]) {
                return Err(format!(
                    "ordering violated: p={} is not below p={} at t={}",
                    pair[0], pair[1], grid[i]
                )
                .into());
            }
        }
    }
    let end = s.n_v as f64 * r_end;
    for (p, c) in ps.iter().zip(&curves) {
        if (c[0] - s.n_v as f64).abs() > 1e-9 || (c[s.steps] - end).abs() > 1e-9 {
            return Err(format!("p={p}: endpoints {} -> {} not anchored", c[0], c[s.steps]).into());
        }
    }

    let mut r = Report::new(cfg.hash(), &cols);
    for (i, t) in grid.iter().enumerate() {
        let mut row = vec![format!("{t:.4}"), num(ed[i])];
        row.extend(curves.iter().map(|c| num(c[i])));
        r.push(row);
    }
    r.note(
        "ordering",
        format!("lower p strictly below higher p at all {} interior points", s.steps - 1),
    );
    r.note("endpoints", format!("{} -> {}", s.n_v, num(end)));
    if let Some(i) = ps.iter().position(|&p| p == 1.0) {
        let diff = curves[i]
            .iter()
            .zip(&ed)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        r.note("p=1 vs ed", format!("max abs diff {diff:.1e}"));
    }
    Ok(r)
}

fn read_all(paths: &[PathBuf]) -> Result<Vec<LayerTrace>, vtdrop_core::Error> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(read_traces(p).map_err(|e| with_path(e, p))?);
    }
    Ok(all)
}

fn with_path(e: vtdrop_core::Error, path: &Path) -> vtdrop_core::Error {
    match e {
        vtdrop_core::Error::Io(io) => {
            vtdrop_core::Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display())))
        }
        other => other,
    }
}

/// Longest run of consecutive layers in a curve.
fn longest_run(layers: &[usize]) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    let mut start = 0;
    for i in 0..layers.len() {
        if i > 0 && layers[i] != layers[i - 1] + 1 {
            start = i;
        }
        let (lo, hi) = (layers[start], layers[i]);
        if best.map_or(true, |(a, b)| hi - lo > b - a) {
            best = Some((lo, hi));
        }
    }
    best
}

/// ILVAS at every layer where it is defined for this `(n, k)`.
fn ilvas_points(traces: &[LayerTrace], n: usize, k: usize, mode: IlvasMode) -> Result<IlvasCurve, vtdrop_core::Error> {
    let layers = traces.first().map_or(0, LayerTrace::num_layers);
    let mut curve = IlvasCurve {
        layers: Vec::new(),
        scores: Vec::new(),
        window: n,
        top_k: k,
        mode,
    };
    for l in 1..=layers.saturating_sub(n) {
        let offsets: Vec<usize> = match mode {
            IlvasMode::Exact => vec![n],
            IlvasMode::Aggregate => (1..=n).collect(),
        };
        let mut total = 0.0;
        let mut defined = true;
        for &o in &offsets {
            match ilvas(traces, l, o, k) {
                Ok(v) => total += v,
                Err(vtdrop_core::Error::NotEnoughTokens { .. } | vtdrop_core::Error::MissingLayer { .. }) => {
                    defined = false;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if defined {
            curve.layers.push(l);
            curve.scores.push(total / offsets.len() as f64);
        }
    }
    Ok(curve)
}

/// Filter layers picked from a curve's longest contiguous stretch.
fn pick_filters(curve: &IlvasCurve, extremum: Extremum) -> Result<Vec<usize>, vtdrop_core::Error> {
    match longest_run(&curve.layers) {
        Some((lo, hi)) if hi >= lo + 2 => select_filter_layers(curve, lo, hi, extremum),
        _ => Ok(Vec::new()),
    }
}

pub fn metrics(cfg: &RunConfig, paths: &[PathBuf], which: Metric, aggregate: bool, valleys: bool) -> CmdResult {
    if which == Metric::Ilvas {
        cfg.validate_sweep()?;
    }
    let traces = read_all(paths)?;
    if traces.is_empty() {
        return Err("no trace records found".into());
    }
    match which {
        Metric::SIntra => {
            let modalities = [Modality::System, Modality::Visual, Modality::Textual];
            let curves: Vec<Option<Vec<Option<f64>>>> = modalities
                .iter()
                .map(|&m| match s_intra(&traces, m) {
                    Ok(c) => Ok(Some(c)),
                    Err(vtdrop_core::Error::ModalityAbsent(..)) => Ok(None),
                    Err(e) => Err(e),
                })
                .collect::<Result<_, _>>()?;
            let mut r = Report::new(cfg.hash(), &["from_layer", "to_layer", "system", "visual", "textual"]);
            let len = curves.iter().flatten().map(Vec::len).max().unwrap_or(0);
            for l in 0..len {
                let mut row = vec![l.to_string(), (l + 1).to_string()];
                for c in &curves {
                    row.push(c.as_ref().and_then(|c| c[l]).map(num).unwrap_or_default());
                }
                r.push(row);
            }
            r.note("samples", traces.len().to_string());
            Ok(r)
        }
        Metric::SCross => {
            let pairs = pair_traces(&traces)?;
            let curve = s_cross(&pairs)?;
            let mut r = Report::new(cfg.hash(), &["layer", "s_cross"]);
            for (l, v) in curve.iter().enumerate() {
                r.push(vec![l.to_string(), num(*v)]);
            }
            r.note("pairs", pairs.len().to_string());
            Ok(r)
        }
        Metric::Ilvas => {
            let mode = if aggregate { IlvasMode::Aggregate } else { IlvasMode::Exact };
            let extremum = if valleys { Extremum::Valleys } else { Extremum::Maxima };
            let mut grid: Vec<(usize, usize)> = cfg
                .sweep
                .top_k
                .iter()
                .flat_map(|&k| cfg.sweep.window.iter().map(move |&n| (k, n)))
                .collect();
            grid.sort_unstable();
            grid.dedup();
            let results: Vec<(usize, usize, IlvasCurve, Vec<usize>)> = grid
                .par_iter()
                .map(|&(k, n)| {
                    let curve = ilvas_points(&traces, n, k, mode)?;
                    let picked = pick_filters(&curve, extremum)?;
                    Ok((k, n, curve, picked))
                })
                .collect::<Result<_, vtdrop_core::Error>>()?;
            let mut r = Report::new(cfg.hash(), &["top_k", "window", "layer", "ilvas", "selected"]);
            for (k, n, curve, picked) in &results {
                for (l, v) in curve.layers.iter().zip(&curve.scores) {
                    let sel = if picked.contains(l) { "1" } else { "0" };
                    r.push(vec![k.to_string(), n.to_string(), l.to_string(), num(*v), sel.into()]);
                }
                let note = if curve.layers.is_empty() {
                    format!("no layer has {k} vision tokens live at l and l+{n}")
                } else {
                    format!("{picked:?}")
                };
                r.note(&format!("filters k={k} n={n}"), note);
            }
            Ok(r)
        }
    }
}

pub fn schedule_plan(cfg: &RunConfig, trace: Option<&Path>, max_filters: usize, out: Option<&Path>) -> CmdResult {
    let shape = cfg.shape(SCALE_MODEL)?;
    let s = &cfg.schedule;
    let mut cfg = cfg.clone();
    let mut chosen_from_trace = None;
    if let Some(path) = trace {
        if s.filter_layers.is_some() {
            return Err(ConfigError(vec!["--trace chooses filter layers; drop schedule.filter_layers".into()]).into());
        }
        let (Some(inject), Some(exit)) = (s.inject_layer, s.exit_layer) else {
            return Err(ConfigError(vec!["--trace needs schedule.inject_layer and schedule.exit_layer".into()]).into());
        };
        cfg.validate_sweep()?;
        let (k, n) = (cfg.sweep.top_k[0], cfg.sweep.window[0]);
        let traces = read_traces(path).map_err(|e| with_path(e, path))?;
        let mut curve = ilvas_points(&traces, n, k, IlvasMode::Exact)?;
        let keep: Vec<bool> = curve.layers.iter().map(|&l| l > inject && l < exit).collect();
        let mut it = keep.iter();
        curve.layers.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        curve.scores.retain(|_| *it.next().unwrap());
        let peaks = pick_filters(&curve, Extremum::Maxima)?;
        let filters = strongest(&curve, &peaks, max_filters, Extremum::Maxima);
        if filters.is_empty() {
            return Err(format!("no ILVAS peak with top-{k}, window {n} inside ({inject}, {exit})").into());
        }
        cfg.schedule.filter_layers = Some(filters.clone());
        chosen_from_trace = Some((k, n, filters));
    }
    let s = &cfg.schedule;
    if s.preset.is_none() && s.file.is_none() && s.budget.is_none() && s.stage_counts.is_none() {
        return Err(ConfigError(vec![
            "schedule-plan needs schedule.budget, schedule.stage_counts, schedule.preset or schedule.file".into(),
        ])
        .into());
    }
    let sched = cfg.schedule(shape.layers, || unreachable!("source checked above"))?;
    let counts = layer_token_counts(&sched, shape.layers)?;
    let mut r = Report::new(cfg.hash(), &["layer", "vision_tokens", "tflops"]);
    for (i, &n) in counts.iter().enumerate() {
        r.push(vec![(i + 1).to_string(), n.to_string(), num(tflops(layer_flops(n, &shape)))]);
    }
    schedule_summary(&mut r, &sched, &counts);
    r.note("total_flops", total_flops(&counts, &shape).to_string());
    if let Some((k, n, filters)) = chosen_from_trace {
        r.note("ilvas selection", format!("top-{k}, window {n} -> {filters:?}"));
    }
    if let Some(out) = out {
        std::fs::write(out, sched.to_toml())?;
        r.note("written", out.display().to_string());
    }
    Ok(r)
}

pub fn simulate(cfg: &RunConfig, trace_out: Option<&Path>, pair_with: Option<u64>, decoupled: bool) -> CmdResult {
    let shape = cfg.shape("toy")?;
    let layout = cfg.layout()?;
    let n_v = layout.num_vision();
    let mut cfg = cfg.clone();
    if cfg.schedule.n_v.is_none() && cfg.schedule.stage_counts.is_none() {
        cfg.schedule.n_v = Some(n_v);
    }
    let cfg = &cfg;
    let sched = cfg.schedule(shape.layers, || PruneSchedule::vanilla(n_v, shape.layers))?;
    let mut errors = Vec::new();
    if sched.n_v != n_v {
        errors.push(format!("schedule.n_v ({}) must equal layout.vision ({n_v})", sched.n_v));
    }
    let pe = cfg.pe();
    let mode = cfg.attention_mode();
    let saliency = cfg.saliency();
    for e in [pe.as_ref().err(), mode.as_ref().err(), saliency.as_ref().err()].into_iter().flatten() {
        errors.extend(e.0.iter().cloned());
    }
    if !errors.is_empty() {
        return Err(ConfigError(errors).into());
    }
    let planned = layer_token_counts(&sched, shape.layers)?;
    let mut fc = ForwardConfig::new(sched.clone());
    fc.pe = pe?;
    fc.mode = mode?;
    fc.saliency = saliency?;
    if trace_out.is_some() {
        fc.capture = Capture::TextQueries;
    }

    let model = ToyModel::new(shape, cfg.vocab(), cfg.seeds.model)?;
    let prompt = Prompt::synthetic(layout, shape.hidden, cfg.seeds.prompt, cfg.seeds.vision)?;
    let (out, log) = if decoupled {
        let (out, log) = decoupled_prefill(&model, &prompt, &fc, &FixedVision(prompt.vision_rows()?))?;
        (out, Some(log))
    } else {
        (forward(&model, &prompt, &fc)?, None)
    };

    let measured = out.vision_counts();
    let mut r = Report::new(cfg.hash(), &["layer", "planned", "vision_tokens", "live_tokens"]);
    for l in 1..=shape.layers {
        r.push(vec![
            l.to_string(),
            planned[l - 1].to_string(),
            measured[l - 1].to_string(),
            out.live[l].iter().filter(|&&b| b).count().to_string(),
        ]);
    }
    if measured != planned {
        return Err(format!("measured vision counts {measured:?} differ from plan {planned:?}").into());
    }
    r.note("average_vision_tokens", format!("{:.3}", out.average_vision_tokens()));
    let argmax = out
        .logits
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    r.note("next_token", argmax.to_string());
    for (l, sel) in &out.selections {
        r.note(&format!("survivors@{l}"), format!("{:?}", sel.survivors));
    }
    if let Some(log) = log {
        let est = log.estimate(&shape, &CostModel::default());
        r.note("overlapped_text_layers", format!("{:?}", log.overlapped_text_layers));
        r.note("latency_serial_s", format!("{:.6e}", est.serial));
        r.note("latency_decoupled_s", format!("{:.6e}", est.decoupled));
    }
    if let Some(path) = trace_out {
        let mut traces = vec![out.to_trace("sim")];
        if let Some(seed) = pair_with {
            let other = Prompt::synthetic(prompt.layout.clone(), shape.hidden, cfg.seeds.prompt, seed)?;
            let mut mis = forward(&model, &other, &fc)?.to_trace("sim-mismatched");
            traces[0].pairing = Some(Pairing::Reference);
            mis.pairing = Some(Pairing::Mismatched);
            for t in [&mut traces[0], &mut mis] {
                t.pair_id = Some("sim".into());
            }
            traces.push(mis);
        }
        write_traces(path, &traces)?;
        r.note("trace", path.display().to_string());
    }
    Ok(r)
}

pub fn validate_traces(cfg: &RunConfig, paths: &[PathBuf]) -> CmdResult {
    let mut r = Report::new(cfg.hash(), &["file", "sample_id", "layers", "tokens"]);
    for p in paths {
        for t in read_traces(p).map_err(|e| with_path(e, p))? {
            r.push(vec![
                p.display().to_string(),
                t.sample_id.clone(),
                t.num_layers().to_string(),
                t.tokens.len().to_string(),
            ]);
        }
    }
    Ok(r)
}
