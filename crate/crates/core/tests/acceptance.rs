//! Acceptance suite: one line per criterion, nonzero exit if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::{max_abs_diff, random_instance, random_schedule};
use vtdrop_core::dtopk::{keep_count_to_ratio, mask_gradients, select_exact, soft_mask, RankVariant};
use vtdrop_core::layout::SequenceLayout;
use vtdrop_core::metrics::{
    ilvas, ilvas_curve, pair_traces, s_cross, s_intra, select_filter_layers, strongest, Extremum, IlvasMode,
};
use vtdrop_core::numeric::SeededRng;
use vtdrop_core::oracle;
use vtdrop_core::pipeline::{
    decoupled_prefill, forward, AttentionMode, Capture, ForwardConfig, PeMode, PositionState, Prompt,
    SeededVision, ToyModel,
};
use vtdrop_core::schedule::{
    average_tokens, flops, layer_token_counts, prefill_latency, reduction, schedule_from_budget, CostModel,
    DecayCurve, ModelShape, PrefillMode, PrefillPlan, PruneSchedule,
};
use vtdrop_core::trace::{read_traces, write_traces, LayerTrace, Modality, Pairing};

const FLOPS_REL_TOL: f64 = 0.01;
const EQUIVALENCE_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-6;
const RATIO_GRAD_TOL: f64 = 1e-4;
const SCORE_JACOBIAN_TOL: f64 = 1e-3;
const LARGE_LAMBDA_TOL: f64 = 1e-3;
const ORACLE_TOL: f64 = 1e-12;
const ED_TOL: f64 = 1e-12;
const BUDGET_TOL: f64 = 1.0;

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn c1_flops_goldens() -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for (shape, want) in [
        (ModelShape::VICUNA_7B, 3.82e12),
        (ModelShape::VICUNA_13B, 7.44e12),
        (ModelShape::MOBILELLAMA_2_7B, 1.52e12),
    ] {
        let counts = vec![576; shape.layers];
        let got = flops(&counts, &shape) as f64;
        let rel = (got - want).abs() / want;
        worst = worst.max(rel);
        ensure(rel < FLOPS_REL_TOL, || format!("{shape:?}: {got:.4e} vs {want:.2e}"))?;
    }
    Ok(format!("max rel err {worst:.2e}"))
}

fn c2_budget_arithmetic() -> Result<String, String> {
    let mut shown = Vec::new();
    for (avg, pct) in [(80.0, "86.1"), (64.0, "88.9"), (48.0, "91.7")] {
        let got = format!("{:.1}", 100.0 * reduction(avg, 576));
        ensure(got == pct, || format!("avg {avg}: {got}% vs {pct}%"))?;
        shown.push(format!("{avg}->{got}%"));
    }
    Ok(shown.join(" "))
}

fn c3_prune_mask_equivalence() -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let inst = random_instance(1000 + seed, 1);
        let mut cfg = ForwardConfig::new(inst.schedule.clone());
        let removal = forward(&inst.model, &inst.prompt, &cfg).map_err(|e| e.to_string())?;
        cfg.mode = AttentionMode::Masking;
        let masking = forward(&inst.model, &inst.prompt, &cfg).map_err(|e| e.to_string())?;
        ensure(removal.live == masking.live, || format!("seed {seed}: live sets differ"))?;
        for l in 1..removal.hidden.len() {
            for t in (0..inst.prompt.layout.len()).filter(|&t| removal.live[l][t]) {
                worst = worst.max(max_abs_diff(removal.hidden[l].row(t), masking.hidden[l].row(t)));
            }
        }
        ensure(worst < EQUIVALENCE_TOL, || format!("seed {seed}: max abs diff {worst:e}"))?;
    }
    Ok(format!("20 instances, max abs diff {worst:.2e}"))
}

fn rel_inf(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    max_abs_diff(analytic, numeric) / scale
}

fn tie_free(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 / n as f64 + rng.uniform(0.0, 0.5 / n as f64)).collect();
    rng.shuffle(&mut v);
    v
}

fn c4_gradients() -> Result<String, String> {
    let mut rng = SeededRng::new(4);
    let mut worst_a: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.range(2, 64);
        let k = rng.range(1, n);
        let scores = tie_free(&mut rng, n);
        let a = keep_count_to_ratio(k, n).map_err(|e| e.to_string())?;
        let lambda = rng.uniform(n as f64 / 2.0, 2.0 * n as f64);
        let mask = soft_mask(&scores, a, lambda, RankVariant::Hard).map_err(|e| e.to_string())?;
        let g = mask_gradients(&mask);
        let plus = soft_mask(&scores, a + FD_STEP, lambda, RankVariant::Hard).unwrap();
        let minus = soft_mask(&scores, a - FD_STEP, lambda, RankVariant::Hard).unwrap();
        let fd: Vec<f64> = plus
            .soft_values
            .iter()
            .zip(&minus.soft_values)
            .map(|(p, m)| (p - m) / (2.0 * FD_STEP))
            .collect();
        worst_a = worst_a.max(rel_inf(&g.d_ratio, &fd));
    }
    ensure(worst_a < RATIO_GRAD_TOL, || format!("d/da rel err {worst_a:e}"))?;

    let mut worst_c: f64 = 0.0;
    for _ in 0..20 {
        let n = 8;
        let scores = tie_free(&mut rng, n);
        let variant = RankVariant::soft_for(n);
        let a = keep_count_to_ratio(rng.range(1, n), n).unwrap();
        let mask = soft_mask(&scores, a, n as f64, variant).unwrap();
        let g = mask_gradients(&mask);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for j in 0..n {
            let mut up = scores.clone();
            let mut down = scores.clone();
            up[j] += FD_STEP;
            down[j] -= FD_STEP;
            let p = soft_mask(&up, a, n as f64, variant).unwrap();
            let m = soft_mask(&down, a, n as f64, variant).unwrap();
            for i in 0..n {
                analytic.push(g.d_scores.get(i, j));
                numeric.push((p.soft_values[i] - m.soft_values[i]) / (2.0 * FD_STEP));
            }
        }
        worst_c = worst_c.max(rel_inf(&analytic, &numeric));
    }
    ensure(worst_c < SCORE_JACOBIAN_TOL, || format!("d/dc rel err {worst_c:e}"))?;
    Ok(format!("d/da rel err {worst_a:.2e}, d/dc rel err {worst_c:.2e}"))
}

fn c5_count_exactness() -> Result<String, String> {
    let mut rng = SeededRng::new(5);
    let mut cases = 0;
    for n in 1..=64 {
        let scores = tie_free(&mut rng, n);
        for k in 1..=n {
            let a = keep_count_to_ratio(k, n).map_err(|e| e.to_string())?;
            let mask = soft_mask(&scores, a, n as f64, RankVariant::Hard).map_err(|e| e.to_string())?;
            ensure(mask.kept() == k, || format!("n={n} k={k}: kept {}", mask.kept()))?;
            let exact = select_exact(&mask, k).map_err(|e| e.to_string())?;
            let hard: Vec<usize> = (0..n).filter(|&i| mask.hard_keep[i]).collect();
            ensure(exact == hard, || format!("n={n} k={k}: exact selection differs from threshold"))?;
            cases += 1;
        }
    }
    Ok(format!("{cases} (n, k) cases"))
}

fn c6_large_lambda() -> Result<String, String> {
    let mut rng = SeededRng::new(6);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.range(1, 64);
        let scores = tie_free(&mut rng, n);
        let a = keep_count_to_ratio(rng.range(1, n), n).unwrap();
        let mask = soft_mask(&scores, a, 1e4 * n as f64, RankVariant::Hard).unwrap();
        for (s, &h) in mask.soft_values.iter().zip(&mask.hard_keep) {
            worst = worst.max((s - if h { 1.0 } else { 0.0 }).abs());
        }
    }
    ensure(worst < LARGE_LAMBDA_TOL, || format!("max |soft - hard| {worst:e}"))?;

    let scores = tie_free(&mut rng, 576);
    let a = keep_count_to_ratio(64, 576).unwrap();
    ensure(a == 512.5 / 576.0, || format!("a = {a}"))?;
    let mask = soft_mask(&scores, a, 576.0, RankVariant::Hard).unwrap();
    ensure(mask.kept() == 64, || format!("default lambda kept {}", mask.kept()))?;
    let mut by_score: Vec<usize> = (0..576).collect();
    by_score.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    // The top ranks sit ~63 temperatures above the threshold, where the
    // sigmoid rounds to exactly 1.0; strictness is checked below that.
    ensure(
        by_score.windows(2).all(|w| {
            let (lo, hi) = (mask.soft_values[w[0]], mask.soft_values[w[1]]);
            lo < hi || (lo == 1.0 && hi == 1.0)
        }),
        || "default-lambda soft values not monotone in score".into(),
    )?;
    Ok(format!("max |soft - hard| {worst:.2e}; lambda = N_v = 576 keeps 64"))
}

fn pairwise(ids: &[usize], live: &[bool]) -> Vec<i64> {
    let alive: Vec<usize> = (0..live.len()).filter(|&t| live[t]).collect();
    alive
        .iter()
        .flat_map(|&a| alive.iter().map(move |&b| ids[a] as i64 - ids[b] as i64))
        .collect()
}

fn c7_pe_geometry() -> Result<String, String> {
    let mut rng = SeededRng::new(7);
    let mut events = 0;
    let mut compacted_violations = 0;
    let mut prefix_cases = 0;
    for _ in 0..200 {
        let n_v = rng.range(2, 16);
        let layout = SequenceLayout::new(rng.range(0, 3), n_v, &[rng.range(1, 4)]).unwrap();
        let vision: Vec<usize> = layout.vision_tokens().collect();
        let mut keep = vision.clone();
        rng.shuffle(&mut keep);
        keep.truncate(rng.range(0, n_v - 1));
        keep.sort_unstable();
        let live = vec![true; layout.len()];
        let mut persistent = PositionState::new(&layout, PeMode::Persistent);
        let before = persistent.ids().to_vec();
        let after_live = persistent.apply_prune(&layout, &live, &keep).map_err(|e| e.to_string())?;
        ensure(
            pairwise(&before, &after_live) == pairwise(persistent.ids(), &after_live),
            || "persistent ids changed a pairwise difference".into(),
        )?;
        events += 1;

        let pruned: Vec<usize> = vision.iter().copied().filter(|v| !keep.contains(v)).collect();
        let non_suffix = pruned.iter().any(|&p| keep.iter().any(|&s| s > p));
        // Renumbering only bends geometry across a gap with live tokens on
        // both sides; a pruned prefix of the whole sequence shifts everything.
        let interior = pruned
            .iter()
            .any(|&p| (0..p).any(|t| after_live[t]) && (p + 1..layout.len()).any(|t| after_live[t]));
        let mut compacted = PositionState::new(&layout, PeMode::Compacted);
        compacted.apply_prune(&layout, &live, &keep).map_err(|e| e.to_string())?;
        let preserved = pairwise(&before, &after_live) == pairwise(compacted.ids(), &after_live);
        ensure(preserved != interior, || {
            format!("compacted geometry preserved={preserved} after pruning {pruned:?} keeping {keep:?}")
        })?;
        if non_suffix && interior {
            compacted_violations += 1;
        }
        if non_suffix && !interior {
            prefix_cases += 1;
        }
    }
    Ok(format!(
        "persistent preserved {events}/{events}; compacted violated all {compacted_violations} interior non-suffix prunes (expected), {prefix_cases} whole-sequence prefix prunes shift uniformly"
    ))
}

fn traced(seed: u64, vision_seed: u64) -> (LayerTrace, usize) {
    let inst = random_instance(seed, 1);
    let layout = inst.prompt.layout.clone();
    let prompt = Prompt::synthetic(layout, inst.model.hidden(), seed, vision_seed).unwrap();
    let mut cfg = ForwardConfig::new(inst.schedule.clone());
    cfg.capture = Capture::TextQueries;
    let out = forward(&inst.model, &prompt, &cfg).unwrap();
    (out.to_trace(format!("s{seed:03}")), inst.model.num_layers())
}

fn c8_metric_oracles() -> Result<String, String> {
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    for seed in 0..20u64 {
        let base = 800 + seed;
        let (mut mis, layers) = traced(base, 1);
        let (mut reference, _) = traced(base, 2);
        mis.pairing = Some(Pairing::Mismatched);
        reference.pairing = Some(Pairing::Reference);
        mis.pair_id = Some(format!("p{seed}"));
        reference.pair_id = Some(format!("p{seed}"));
        reference.sample_id.push_str("-ref");
        let both = vec![mis.clone(), reference.clone()];

        for modality in [Modality::System, Modality::Visual, Modality::Textual] {
            let got = s_intra(&both, modality).map_err(|e| e.to_string())?;
            let want = oracle::s_intra(&both, modality);
            ensure(got.len() == want.len(), || "s_intra length".into())?;
            for (g, w) in got.iter().zip(&want) {
                match (g, w) {
                    (Some(g), Some(w)) => {
                        ensure((-1.0..=1.0).contains(g), || format!("s_intra {g} out of range"))?;
                        worst = worst.max((g - w).abs());
                    }
                    (None, None) => {}
                    _ => return Err(format!("s_intra definedness differs for {modality:?}")),
                }
            }
        }
        let pairs = pair_traces(&both).map_err(|e| e.to_string())?;
        let got = s_cross(&pairs).map_err(|e| e.to_string())?;
        for (g, w) in got.iter().zip(oracle::s_cross(&pairs)) {
            ensure((-1.0..=1.0).contains(g), || format!("s_cross {g} out of range"))?;
            worst = worst.max((g - w).abs());
        }

        let live_at = |l: usize| mis.layers[l].live.as_ref().unwrap().clone();
        for l in 1..layers {
            for n in 1..=(layers - l) {
                let common = mis
                    .tokens_of(Modality::Visual)
                    .filter(|&v| live_at(l)[v] && live_at(l + n)[v])
                    .count();
                if common == 0 {
                    continue;
                }
                let k = 1 + (seed as usize + l) % common;
                let g = ilvas(&[mis.clone()], l, n, k).map_err(|e| e.to_string())?;
                let w = oracle::ilvas(&[mis.clone()], l, n, k);
                ensure((-1.0..=1.0).contains(&g), || format!("ilvas {g} out of range"))?;
                worst = worst.max((g - w).abs());
            }
        }
        checks += 1;
        ensure(worst < ORACLE_TOL, || format!("seed {seed}: max abs diff {worst:e}"))?;
    }
    Ok(format!("{checks} trace pairs, max abs diff {worst:.2e}"))
}

fn c9_ged_family() -> Result<String, String> {
    let r_end = 1.0 / 576.0;
    for p in [0.1, 0.25, 0.5, 1.0, 2.0, 4.0] {
        let c = DecayCurve::ged(p, r_end);
        ensure(c.keep_ratio(0.0).unwrap() == 1.0, || format!("p={p}: r(0) != 1"))?;
        let end = c.keep_ratio(1.0).unwrap();
        ensure((end - r_end).abs() < 1e-15, || format!("p={p}: r(1) = {end}"))?;
    }
    let ed = DecayCurve::ed(r_end);
    let one = DecayCurve::ged(1.0, r_end);
    let half = DecayCurve::ged(0.5, r_end);
    let mut worst: f64 = 0.0;
    let mut below = 0;
    for i in 0..=100 {
        let t = i as f64 / 100.0;
        let e = ed.keep_ratio(t).unwrap();
        worst = worst.max((one.keep_ratio(t).unwrap() - e).abs());
        if (1..100).contains(&i) && half.keep_ratio(t).unwrap() < e {
            below += 1;
        }
    }
    ensure(worst < ED_TOL, || format!("p=1 vs ED max diff {worst:e}"))?;
    ensure(below == 99, || format!("p=0.5 below ED at {below}/99 interior points"))?;
    Ok(format!("p=1 vs ED {worst:.1e}; p=0.5 below ED at 99/99"))
}

fn c10_decoupled_prefill() -> Result<String, String> {
    for seed in 0..10 {
        let inst = random_instance(2000 + seed, 2);
        let cfg = ForwardConfig::new(inst.schedule.clone());
        let (out, _) = decoupled_prefill(&inst.model, &inst.prompt, &cfg, &SeededVision((2000 + seed) ^ 0x5A5A))
            .map_err(|e| e.to_string())?;
        let want = forward(&inst.model, &inst.prompt, &cfg).map_err(|e| e.to_string())?;
        ensure(out.hidden == want.hidden && out.logits == want.logits, || {
            format!("seed {seed}: decoupled output differs")
        })?;
    }
    let mut rng = SeededRng::new(10);
    let shape = ModelShape::VICUNA_7B;
    for i in 0..100 {
        let cost = CostModel {
            flops_per_second: rng.uniform(1e12, 1e15),
            text_layer_seconds: rng.uniform(0.0, 5e-3),
            vision_path_seconds: rng.uniform(0.0, 5e-2),
            stage_overhead_seconds: rng.uniform(0.0, 2e-3),
        };
        let sched = random_schedule(&mut rng, 576, 32, 1);
        let plan = PrefillPlan::from_schedule(&sched, 32).map_err(|e| e.to_string())?;
        let serial = prefill_latency(&plan, &shape, &cost, PrefillMode::Serial);
        let decoupled = prefill_latency(&plan, &shape, &cost, PrefillMode::Decoupled);
        ensure(decoupled <= serial, || format!("cost model {i}: {decoupled} > {serial}"))?;
    }
    Ok("10/10 bit-identical; decoupled <= serial for 100/100 cost models".into())
}

fn c11_end_to_end() -> Result<String, String> {
    let (layers, n_v, target) = (32, 576, 64.0);
    let shape = ModelShape::new(layers, 32, 64, 4).map_err(|e| e.to_string())?;
    let model = ToyModel::new(shape, 32, 11).map_err(|e| e.to_string())?;
    let layout = SequenceLayout::new(4, n_v, &[8, 6]).map_err(|e| e.to_string())?;
    let prompt = Prompt::synthetic(layout, 32, 12, 13).map_err(|e| e.to_string())?;

    let mut probe = ForwardConfig::new(PruneSchedule::window(n_v, 9, 25));
    probe.capture = Capture::TextQueries;
    let out = forward(&model, &prompt, &probe).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("trace.jsonl");
    write_traces(&path, &[out.to_trace("e2e")]).map_err(|e| e.to_string())?;
    let traces = read_traces(&path).map_err(|e| e.to_string())?;

    let (lo, hi) = (10, 20);
    let curve = ilvas_curve(&traces, lo, hi, 4, 50, IlvasMode::Exact).map_err(|e| e.to_string())?;
    let peaks = select_filter_layers(&curve, lo, hi, Extremum::Maxima).map_err(|e| e.to_string())?;
    let filters = strongest(&curve, &peaks, 4, Extremum::Maxima);
    ensure(!filters.is_empty(), || "no filter layer selected".into())?;
    let sched = schedule_from_budget(9, 25, &filters, n_v, target, layers).map_err(|e| e.to_string())?;
    let planned = average_tokens(&layer_token_counts(&sched, layers).map_err(|e| e.to_string())?, layers);
    let run = forward(&model, &prompt, &ForwardConfig::new(sched.clone())).map_err(|e| e.to_string())?;
    let measured = run.average_vision_tokens();
    ensure((measured - target).abs() <= BUDGET_TOL, || {
        format!("average {measured} vs target {target} (stages {:?})", sched.stage_counts)
    })?;
    ensure(measured == planned, || format!("measured {measured} vs planned {planned}"))?;
    Ok(format!(
        "filters {filters:?}, stages {:?}, average {measured:.3}",
        sched.stage_counts
    ))
}

fn main() {
    let checks: [(&str, Check); 11] = [
        ("FLOPs goldens", c1_flops_goldens),
        ("budget arithmetic", c2_budget_arithmetic),
        ("prune/mask equivalence", c3_prune_mask_equivalence),
        ("DTop-K gradient check", c4_gradients),
        ("DTop-K count exactness", c5_count_exactness),
        ("large-lambda consistency", c6_large_lambda),
        ("RoPE/PE geometry", c7_pe_geometry),
        ("metric oracles", c8_metric_oracles),
        ("GED family", c9_ged_family),
        ("decoupled-prefill equality", c10_decoupled_prefill),
        ("end-to-end loop", c11_end_to_end),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {:>2} PASS  {name} ({secs:.2}s): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name} ({secs:.2}s): {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
