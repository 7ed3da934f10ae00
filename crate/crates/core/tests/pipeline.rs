mod common;

use common::{max_abs_diff, random_instance};
use vtdrop_core::importance::{SaliencyConfig, Strategy};
use vtdrop_core::layout::SequenceLayout;
use vtdrop_core::numeric::{seeded_matrix, Matrix};
use vtdrop_core::pipeline::{
    decode_step, decoupled_prefill, early_exit_probe, forward, reference_forward, AttentionMode, Capture,
    ForwardConfig, PeMode, Prompt, SeededVision, ToyModel,
};
use vtdrop_core::schedule::{prefill_latency, CostModel, ModelShape, PrefillMode, PrefillPlan, PruneSchedule};
use vtdrop_core::trace::{read_traces_from, write_traces_to};

fn small() -> (ToyModel, Prompt) {
    let shape = ModelShape::new(6, 32, 64, 4).unwrap();
    let model = ToyModel::new(shape, 13, 7).unwrap();
    let layout = SequenceLayout::new(2, 8, &[3, 2]).unwrap();
    let prompt = Prompt::synthetic(layout, 32, 1, 2).unwrap();
    (model, prompt)
}

fn reference_schedule() -> PruneSchedule {
    PruneSchedule {
        inject_layer: 2,
        exit_layer: 6,
        filter_layers: vec![3, 4],
        stage_counts: vec![8, 4, 2],
        n_v: 8,
    }
}

#[test]
fn vanilla_matches_plain_transformer_bit_exactly() {
    let (model, prompt) = small();
    let out = forward(&model, &prompt, &ForwardConfig::new(PruneSchedule::vanilla(8, 6))).unwrap();
    let (hidden, logits) = reference_forward(&model, &prompt).unwrap();
    assert_eq!(out.hidden, hidden);
    assert_eq!(out.logits, logits);
    let mut masked = ForwardConfig::new(PruneSchedule::vanilla(8, 6));
    masked.mode = AttentionMode::Masking;
    assert_eq!(forward(&model, &prompt, &masked).unwrap().hidden, hidden);
}

#[test]
fn inject_at_first_layer_without_filters_is_standard_forward() {
    let (model, prompt) = small();
    let out = forward(&model, &prompt, &ForwardConfig::new(PruneSchedule::window(8, 1, 7))).unwrap();
    assert_eq!(out.logits, reference_forward(&model, &prompt).unwrap().1);
}

#[test]
fn layer_counts_follow_schedule() {
    let (model, prompt) = small();
    let out = forward(&model, &prompt, &ForwardConfig::new(reference_schedule())).unwrap();
    assert_eq!(out.vision_counts(), vec![0, 8, 4, 2, 2, 0]);
    let layout = &prompt.layout;
    for v in layout.vision_tokens() {
        let alive: Vec<bool> = out.live[2..].iter().map(|l| l[v]).collect();
        assert!(alive.windows(2).all(|w| w[0] || !w[1]), "liveness of {v} not monotone");
    }
    for t in layout.text_tokens() {
        assert!(out.live.iter().all(|l| l[t]));
    }
}

#[test]
fn removal_and_masking_agree_on_survivors() {
    for seed in 0..10 {
        let inst = random_instance(seed, 1);
        for pe in [PeMode::Persistent, PeMode::Compacted, PeMode::Group { offset: 1000 }] {
            let mut cfg = ForwardConfig::new(inst.schedule.clone());
            cfg.pe = pe;
            let removal = forward(&inst.model, &inst.prompt, &cfg).unwrap();
            cfg.mode = AttentionMode::Masking;
            let masking = forward(&inst.model, &inst.prompt, &cfg).unwrap();
            assert_eq!(removal.live, masking.live);
            for l in 1..removal.hidden.len() {
                for t in (0..inst.prompt.layout.len()).filter(|&t| removal.live[l][t]) {
                    let d = max_abs_diff(removal.hidden[l].row(t), masking.hidden[l].row(t));
                    assert!(d < 1e-6, "seed {seed} {pe:?} layer {l} token {t}: {d}");
                }
            }
        }
    }
}

#[test]
fn shallow_text_states_match_a_text_only_run() {
    for seed in 0..5 {
        let inst = random_instance(seed, 2);
        let out = forward(&inst.model, &inst.prompt, &ForwardConfig::new(inst.schedule.clone())).unwrap();
        let text_only = inst.prompt.text_only().unwrap();
        let (reference, _) = reference_forward(&inst.model, &text_only).unwrap();
        let kept: Vec<usize> = (0..inst.prompt.layout.len())
            .filter(|&t| !inst.prompt.layout.is_vision(t))
            .collect();
        for l in 1..inst.schedule.inject_layer {
            for (r, &t) in kept.iter().enumerate() {
                assert_eq!(out.hidden[l].row(t), reference[l].row(r), "seed {seed} layer {l}");
            }
        }
    }
}

#[test]
fn surviving_vision_kv_is_never_recomputed() {
    let (model, prompt) = small();
    let sched = reference_schedule();
    let out = forward(&model, &prompt, &ForwardConfig::new(sched.clone())).unwrap();
    let cache = out.cache.as_ref().unwrap();
    let survivors = &out.selections.last().unwrap().1.survivors;
    let inject = sched.inject_layer;
    let ids = out.pe_state.ids();
    for &v in survivors {
        let entry = cache.get(inject, v).unwrap();
        let normed = model.attn_input(inject, prompt.embeddings.row(v));
        let (k, val) = model.key_value(inject, &normed, ids[v]);
        assert_eq!(entry.key, k);
        assert_eq!(entry.value, val);
        assert!(entry.active);
    }
    for v in prompt.layout.vision_tokens() {
        for l in sched.exit_layer..=6 {
            assert!(cache.get(l, v).is_none(), "token {v} has KV past the exit");
        }
        if !survivors.contains(&v) {
            assert!(cache.active(5, prompt.layout.len() - 1).all(|(t, _)| t != v), "pruned token {v} still active");
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let inst = random_instance(3, 1);
    let cfg = ForwardConfig::new(inst.schedule.clone());
    let a = forward(&inst.model, &inst.prompt, &cfg).unwrap();
    let b = forward(&inst.model, &inst.prompt, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn auxiliary_pass_does_not_perturb_main_pass() {
    let (model, prompt) = small();
    let plain = ForwardConfig::new(PruneSchedule::window(8, 2, 7));
    let mut probed = plain.clone();
    probed.probe_layers = vec![2, 3, 5];
    let a = forward(&model, &prompt, &plain).unwrap();
    let b = forward(&model, &prompt, &probed).unwrap();
    assert_eq!(a.hidden, b.hidden);
    assert_eq!(a.logits, b.logits);
    assert_eq!(b.selections.len(), 3);
    assert!(a.selections.is_empty());
}

#[test]
fn train_mode_scales_survivors() {
    let (model, prompt) = small();
    let mut cfg = ForwardConfig::new(reference_schedule());
    let infer = forward(&model, &prompt, &cfg).unwrap();
    cfg.train = true;
    let train = forward(&model, &prompt, &cfg).unwrap();
    assert_eq!(infer.hidden[2], train.hidden[2]);
    assert_ne!(infer.hidden[3], train.hidden[3]);
    let (_, sel) = &train.selections[0];
    for &s in &sel.survivors {
        let w = sel.soft_value(s).unwrap();
        assert!(w > 0.5 && w < 1.0);
    }
}

#[test]
fn decoupled_prefill_equals_forward() {
    for seed in 0..5 {
        let inst = random_instance(seed, 2);
        let cfg = ForwardConfig::new(inst.schedule.clone());
        let producer = SeededVision(seed ^ 0x5A5A);
        let (out, log) = decoupled_prefill(&inst.model, &inst.prompt, &cfg, &producer).unwrap();
        let want = forward(&inst.model, &inst.prompt, &cfg).unwrap();
        assert_eq!(out.hidden, want.hidden, "seed {seed}");
        assert_eq!(out.logits, want.logits, "seed {seed}");
        assert_eq!(out.live, want.live);
        assert_eq!(out.positions, want.positions);
        assert_eq!(out.selections, want.selections);
        // The vision lane also projects tokens that a filter at the injection
        // layer drops at once; those rows exist but stay inactive.
        let (a, b) = (out.cache.unwrap(), want.cache.unwrap());
        assert_eq!(a.active_entries(), b.active_entries());
        let inject = inst.schedule.inject_layer;
        assert_eq!(log.overlapped_text_layers, (1..inject).collect::<Vec<_>>());
    }
}

#[test]
fn decoupled_prefill_ignores_prompt_vision_rows() {
    let (model, prompt) = small();
    let cfg = ForwardConfig::new(reference_schedule());
    let rows = seeded_matrix(8, 32, 99, 1.0).unwrap();
    let blank = prompt.with_vision_rows(&Matrix::zeros(8, 32)).unwrap();
    let (out, _) =
        decoupled_prefill(&model, &blank, &cfg, &vtdrop_core::pipeline::FixedVision(rows.clone())).unwrap();
    let want = forward(&model, &prompt.with_vision_rows(&rows).unwrap(), &cfg).unwrap();
    assert_eq!(out, want);
}

#[test]
fn minimal_overlap_window_and_latency_wiring() {
    let (model, prompt) = small();
    let cfg = ForwardConfig::new(reference_schedule());
    let (_, log) = decoupled_prefill(&model, &prompt, &cfg, &SeededVision(2)).unwrap();
    assert_eq!(log.overlapped_text_layers, vec![1]);

    let shape = ModelShape::VICUNA_7B;
    let cost = CostModel::default();
    let est = log.estimate(&shape, &cost);
    let plan = PrefillPlan::from_schedule(&reference_schedule(), 6).unwrap();
    assert_eq!(est.serial, prefill_latency(&plan, &shape, &cost, PrefillMode::Serial));
    assert_eq!(est.decoupled, prefill_latency(&plan, &shape, &cost, PrefillMode::Decoupled));
    assert!(est.decoupled <= est.serial);
}

#[test]
fn decoupled_prefill_preconditions() {
    let (model, prompt) = small();
    let early = ForwardConfig::new(PruneSchedule::window(8, 1, 7));
    assert!(decoupled_prefill(&model, &prompt, &early, &SeededVision(2)).is_err());
    let mut masked = ForwardConfig::new(reference_schedule());
    masked.mode = AttentionMode::Masking;
    assert!(decoupled_prefill(&model, &prompt, &masked, &SeededVision(2)).is_err());
}

#[test]
fn decode_matches_forward_on_extended_prompt() {
    let (model, prompt) = small();
    for pe in [PeMode::Persistent, PeMode::Group { offset: 500 }] {
        let mut cfg = ForwardConfig::new(reference_schedule());
        cfg.pe = pe;
        let mut prefill = forward(&model, &prompt, &cfg).unwrap();
        let next = seeded_matrix(1, 32, 4242, 1.0).unwrap();
        let logits = decode_step(&model, &mut prefill, next.row(0)).unwrap();

        let layout = SequenceLayout::new(2, 8, &[3, 3]).unwrap();
        let mut rows: Vec<Vec<f64>> = prompt.embeddings.iter_rows().map(<[f64]>::to_vec).collect();
        rows.push(next.row(0).to_vec());
        let extended = Prompt::new(layout, Matrix::from_rows(&rows).unwrap()).unwrap();
        cfg.forced_survivors = Some(prefill.selections.iter().map(|(_, s)| s.survivors.clone()).collect());
        let full = forward(&model, &extended, &cfg).unwrap();
        assert_eq!(logits, full.logits, "{pe:?}");
    }
}

#[test]
fn early_exit_probe_on_vision_decaying_model() {
    let shape = ModelShape::new(8, 32, 64, 4).unwrap();
    let model = ToyModel::new(shape, 13, 21).unwrap().with_vision_decay(1.5);
    let layout = SequenceLayout::new(2, 8, &[4]).unwrap();
    let prompt = Prompt::synthetic(layout, 32, 5, 6).unwrap();
    let exits: Vec<usize> = (1..=9).collect();
    let div = early_exit_probe(&model, &prompt, &exits).unwrap();
    assert_eq!(div.last().unwrap(), &(9, 0.0));
    for w in div.windows(2) {
        assert!(w[0].1 >= w[1].1, "divergence rises from exit {} to {}: {div:?}", w[0].0, w[1].0);
    }
    assert!(div[0].1 > 0.0);
}

#[test]
fn persistent_ids_preserve_rope_geometry_compacted_do_not() {
    let (model, prompt) = small();
    let mut cfg = ForwardConfig::new(reference_schedule());
    let out = forward(&model, &prompt, &cfg).unwrap();
    let diffs = |ids: &[usize], live: &[bool]| -> Vec<i64> {
        let alive: Vec<usize> = (0..live.len()).filter(|&t| live[t]).collect();
        let mut d = Vec::new();
        for &a in &alive {
            for &b in &alive {
                d.push(ids[a] as i64 - ids[b] as i64);
            }
        }
        d
    };
    for l in 3..=4 {
        let after = &out.live[l];
        assert_eq!(diffs(&out.positions[l - 1], after), diffs(&out.positions[l], after));
    }
    cfg.pe = PeMode::Compacted;
    let out = forward(&model, &prompt, &cfg).unwrap();
    let after = &out.live[3];
    assert_ne!(diffs(&out.positions[2], after), diffs(&out.positions[3], after));
}

#[test]
fn emitted_trace_round_trips() {
    let (model, prompt) = small();
    let mut cfg = ForwardConfig::new(reference_schedule());
    cfg.capture = Capture::TextQueries;
    let out = forward(&model, &prompt, &cfg).unwrap();
    let trace = out.to_trace("s0");
    let mut buf = Vec::new();
    write_traces_to(&mut buf, &[trace.clone()]).unwrap();
    let back = read_traces_from(buf.as_slice(), std::path::Path::new("mem")).unwrap();
    assert_eq!(back.len(), 1);
    assert_eq!(back[0].tokens, trace.tokens);
    assert_eq!(back[0].attention_layers(), (1..=6).collect::<Vec<_>>());
    for (a, b) in back[0].layers.iter().zip(&trace.layers) {
        assert_eq!(a.live, b.live);
        let d = max_abs_diff(a.hidden.data(), b.hidden.data());
        assert!(d < 1e-5 * (1.0 + b.hidden.data().iter().fold(0.0f64, |m, x| m.max(x.abs()))));
    }
}

#[test]
fn every_strategy_runs_end_to_end() {
    let (model, prompt) = small();
    for s in Strategy::ALL {
        let mut cfg = ForwardConfig::new(reference_schedule());
        cfg.saliency = SaliencyConfig::new(s);
        let out = forward(&model, &prompt, &cfg).unwrap();
        assert_eq!(out.selections.len(), 2, "{s:?}");
    }
}

#[test]
fn schedule_model_mismatch_is_rejected() {
    let (model, prompt) = small();
    assert!(forward(&model, &prompt, &ForwardConfig::new(PruneSchedule::vanilla(8, 7))).is_err());
    assert!(forward(&model, &prompt, &ForwardConfig::new(PruneSchedule::vanilla(9, 6))).is_err());
}
