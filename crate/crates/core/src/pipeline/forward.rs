//! Scheduled forward pass.
//!
//! Layers `1..inject_layer` see only system and text tokens. At
//! `inject_layer` the vision rows enter as their embeddings. At the start of
//! every filter layer an auxiliary attention pass scores the live vision
//! tokens and the survivors are chosen by [`score_and_select`]. From
//! `exit_layer` on no vision token is live.
//!
//! In [`AttentionMode::Removal`] a layer only computes live rows and reads
//! keys from a write-once [`KvCache`]. In [`AttentionMode::Masking`] every
//! row is computed over every causal key and dead keys get an additive
//! `-inf` logit; a dead query still sees itself so its row stays defined. Live rows agree across the two
//! modes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::{score_and_select, select_from_scores, HeadStates, SaliencyConfig, Selection};
use crate::layout::SequenceLayout;
use crate::numeric::{dot, norm, softmax, Matrix};
use crate::schedule::PruneSchedule;
use crate::trace::{AttentionRecord, LayerRecord, LayerTrace, Modality};

use super::kv::KvCache;
use super::model::{Prompt, ToyModel};
use super::pe::{PeMode, PositionState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    #[default]
    Removal,
    Masking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capture {
    #[default]
    None,
    /// Attention rows of every live text query, per head.
    TextQueries,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardConfig {
    pub schedule: PruneSchedule,
    pub saliency: SaliencyConfig,
    pub pe: PeMode,
    pub mode: AttentionMode,
    /// Scale surviving vision rows by their soft mask value.
    pub train: bool,
    pub capture: Capture,
    /// Layers where the auxiliary pass runs without pruning.
    pub probe_layers: Vec<usize>,
    /// Replays survivors per filter layer instead of taking the top-k.
    pub forced_survivors: Option<Vec<Vec<usize>>>,
}

impl ForwardConfig {
    pub fn new(schedule: PruneSchedule) -> Self {
        Self {
            schedule,
            saliency: SaliencyConfig::default(),
            pe: PeMode::Persistent,
            mode: AttentionMode::Removal,
            train: false,
            capture: Capture::None,
            probe_layers: Vec::new(),
            forced_survivors: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub layout: SequenceLayout,
    /// `hidden[0]` is the embeddings, `hidden[l]` the output of layer `l`.
    /// Rows of tokens not live at `l` are zero in removal mode.
    pub hidden: Vec<Matrix>,
    pub live: Vec<Vec<bool>>,
    /// Position ids in effect at each layer; index 0 is the input assignment.
    pub positions: Vec<Vec<usize>>,
    /// Logits of the final token.
    pub logits: Vec<f64>,
    pub selections: Vec<(usize, Selection)>,
    pub attention: Vec<Option<AttentionRecord>>,
    pub cache: Option<KvCache>,
    pub pe_state: PositionState,
}

impl ForwardOutput {
    pub fn vision_counts(&self) -> Vec<usize> {
        self.live[1..]
            .iter()
            .map(|live| self.layout.vision_tokens().filter(|&v| live[v]).count())
            .collect()
    }

    pub fn average_vision_tokens(&self) -> f64 {
        let c = self.vision_counts();
        c.iter().sum::<usize>() as f64 / c.len() as f64
    }

    pub fn to_trace(&self, sample_id: impl Into<String>) -> LayerTrace {
        LayerTrace {
            sample_id: sample_id.into(),
            tokens: self.layout.tokens().to_vec(),
            pairing: None,
            pair_id: None,
            layers: self
                .hidden
                .iter()
                .zip(&self.live)
                .zip(&self.attention)
                .map(|((h, live), att)| LayerRecord {
                    hidden: h.clone(),
                    live: Some(live.clone()),
                    attention: att.clone(),
                })
                .collect(),
        }
    }
}

/// Softmax attention of one query over `(key, value, logit bias)` triples,
/// per head. Returns the concatenated head outputs and each head's weights.
pub(crate) fn attend(
    head_dim: usize,
    q: &[f64],
    keys: &[(&[f64], &[f64], f64)],
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let heads = q.len() / head_dim;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut out = vec![0.0; q.len()];
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let span = h * head_dim..(h + 1) * head_dim;
        let logits: Vec<f64> = keys
            .iter()
            .map(|(k, _, bias)| dot(&q[span.clone()], &k[span.clone()]) * scale + bias)
            .collect();
        let p = softmax(&logits, None)?;
        for ((_, v, _), &w) in keys.iter().zip(&p) {
            for c in span.clone() {
                out[c] += w * v[c];
            }
        }
        probs.push(p);
    }
    Ok((out, probs))
}

pub(crate) struct Runner<'a> {
    model: &'a ToyModel,
    prompt: &'a Prompt,
    cfg: &'a ForwardConfig,
    state: PositionState,
    hidden: Matrix,
    live: Vec<bool>,
    cache: Option<KvCache>,
    filter_index: usize,
    vision_rows: Option<Matrix>,
    out_hidden: Vec<Matrix>,
    out_live: Vec<Vec<bool>>,
    out_positions: Vec<Vec<usize>>,
    out_attention: Vec<Option<AttentionRecord>>,
    selections: Vec<(usize, Selection)>,
}

impl<'a> Runner<'a> {
    pub(crate) fn new(model: &'a ToyModel, prompt: &'a Prompt, cfg: &'a ForwardConfig) -> Result<Self> {
        let layout = &prompt.layout;
        let sched = &cfg.schedule;
        let layers = model.num_layers();
        sched.validate(layers)?;
        if sched.n_v != layout.num_vision() {
            return Err(Error::Schedule(format!(
                "schedule expects {} vision tokens, layout has {}",
                sched.n_v,
                layout.num_vision()
            )));
        }
        if prompt.embeddings.cols() != model.hidden() {
            return Err(Error::LengthMismatch {
                expected: model.hidden(),
                got: prompt.embeddings.cols(),
            });
        }
        match layout.tokens().last() {
            Some(t) if t.modality == Modality::Textual => {}
            _ => return Err(Error::param("layout", "the final token must be textual")),
        }
        if let Some(forced) = &cfg.forced_survivors {
            if forced.len() != sched.filter_layers.len() {
                return Err(Error::LengthMismatch {
                    expected: sched.filter_layers.len(),
                    got: forced.len(),
                });
            }
        }
        let n = layout.len();
        let live0: Vec<bool> = (0..n)
            .map(|t| !layout.is_vision(t) || sched.inject_layer == 1)
            .collect();
        let state = PositionState::new(layout, cfg.pe);
        let mut hidden = prompt.embeddings.clone();
        if cfg.mode == AttentionMode::Removal {
            zero_dead(&mut hidden, &live0);
        }
        Ok(Self {
            model,
            prompt,
            cfg,
            out_positions: vec![state.ids().to_vec()],
            state,
            out_hidden: vec![hidden.clone()],
            hidden,
            out_live: vec![live0],
            live: (0..n).map(|t| !layout.is_vision(t)).collect(),
            cache: (cfg.mode == AttentionMode::Removal).then(|| KvCache::new(layers, n)),
            filter_index: 0,
            vision_rows: None,
            out_attention: vec![None],
            selections: Vec::new(),
        })
    }

    pub(crate) fn cache_mut(&mut self) -> Option<&mut KvCache> {
        self.cache.as_mut()
    }

    /// Vision rows to inject in place of the prompt's, in vision order.
    pub(crate) fn set_vision_rows(&mut self, rows: Matrix) {
        self.vision_rows = Some(rows);
    }

    pub(crate) fn step(&mut self, l: usize) -> Result<()> {
        let sched = &self.cfg.schedule;
        let layout = &self.prompt.layout;
        if l == sched.inject_layer {
            for (r, v) in layout.vision_tokens().enumerate() {
                self.live[v] = true;
                let row = match &self.vision_rows {
                    Some(m) => m.row(r),
                    None => self.prompt.embeddings.row(v),
                };
                self.hidden.row_mut(v).copy_from_slice(row);
            }
        }
        if sched.filter_layers.contains(&l) {
            let keep = sched.stage_counts[self.filter_index + 1];
            let mut sel = self.select(l, keep)?;
            if let Some(forced) = &self.cfg.forced_survivors {
                let mut f = forced[self.filter_index].clone();
                f.sort_unstable();
                sel.survivors = f;
            }
            self.filter_index += 1;
            self.prune(l, &sel.survivors)?;
            if self.cfg.train {
                for &s in &sel.survivors {
                    let w = sel.soft_value(s).expect("survivor is a candidate");
                    self.hidden.row_mut(s).iter_mut().for_each(|x| *x *= w);
                }
            }
            self.selections.push((l, sel));
        } else if self.cfg.probe_layers.contains(&l) && self.live_vision().next().is_some() {
            let n = self.live_vision().count();
            let sel = self.select(l, n)?;
            self.selections.push((l, sel));
        }
        if l == sched.exit_layer {
            self.prune(l, &[])?;
        }
        let att = match self.cfg.mode {
            AttentionMode::Removal => self.layer_removal(l)?,
            AttentionMode::Masking => self.layer_masking(l)?,
        };
        self.out_hidden.push(self.hidden.clone());
        self.out_live.push(self.live.clone());
        self.out_positions.push(self.state.ids().to_vec());
        self.out_attention.push(att);
        Ok(())
    }

    fn live_vision(&self) -> impl Iterator<Item = usize> + '_ {
        self.prompt.layout.vision_tokens().filter(|&v| self.live[v])
    }

    fn prune(&mut self, l: usize, survivors: &[usize]) -> Result<()> {
        let after = self.state.apply_prune(&self.prompt.layout, &self.live, survivors)?;
        for t in 0..after.len() {
            if self.live[t] && !after[t] {
                if let Some(c) = self.cache.as_mut() {
                    c.deactivate(t, l);
                }
                if self.cfg.mode == AttentionMode::Removal {
                    self.hidden.row_mut(t).iter_mut().for_each(|x| *x = 0.0);
                }
            }
        }
        self.live = after;
        Ok(())
    }

    /// Auxiliary pass: layer-`l` queries and keys of the live rows, kept
    /// apart from the main attention.
    fn select(&self, l: usize, keep: usize) -> Result<Selection> {
        let n = self.prompt.layout.len();
        let (mut qs, mut ks) = (vec![None; n], vec![None; n]);
        let mut norms = vec![0.0; n];
        for t in (0..n).filter(|&t| self.live[t]) {
            let row = self.hidden.row(t);
            let normed = self.model.attn_input(l, row);
            let pos = self.state.id(t);
            qs[t] = Some(self.model.query(l, &normed, pos));
            ks[t] = Some(self.model.key_value(l, &normed, pos).0);
            norms[t] = norm(row);
        }
        let heads = self.model.shape.heads;
        let head_dim = self.model.shape.head_dim();
        let q = HeadStates { heads, head_dim, rows: qs };
        let k = HeadStates { heads, head_dim, rows: ks };
        if self.cfg.forced_survivors.is_some() {
            let candidates: Vec<usize> = self.live_vision().collect();
            let scores = crate::importance::saliency(
                &q,
                &k,
                &self.prompt.layout,
                &self.live,
                &norms,
                &self.cfg.saliency,
            )?;
            return select_from_scores(&candidates, &scores, keep, &self.cfg.saliency);
        }
        score_and_select(&q, &k, &self.prompt.layout, &self.live, &norms, &self.cfg.saliency, keep)
    }

    fn key_bias(&self, l: usize, t: usize) -> f64 {
        if self.prompt.layout.is_vision(t) {
            self.model.vision_key_bias[l]
        } else {
            0.0
        }
    }

    fn capture(&self, t: usize) -> bool {
        self.cfg.capture == Capture::TextQueries && self.prompt.layout.is_text(t)
    }

    fn layer_removal(&mut self, l: usize) -> Result<Option<AttentionRecord>> {
        let model = self.model;
        let n = self.prompt.layout.len();
        let rows: Vec<usize> = (0..n).filter(|&t| self.live[t]).collect();
        let normed: Vec<Vec<f64>> = rows.iter().map(|&t| model.attn_input(l, self.hidden.row(t))).collect();
        let cache = self.cache.as_mut().expect("removal mode owns a cache");
        for (&t, x) in rows.iter().zip(&normed) {
            if !cache.contains(l, t) {
                let (k, v) = model.key_value(l, x, self.state.id(t));
                cache.write(l, t, k, v)?;
            }
        }
        let cache = self.cache.as_ref().expect("removal mode owns a cache");
        let mut next = Matrix::zeros(n, model.hidden());
        let mut recorder = Recorder::new(model.shape.heads, n);
        for (&i, x) in rows.iter().zip(&normed) {
            let q = model.query(l, x, self.state.id(i));
            let keys: Vec<(usize, (&[f64], &[f64], f64))> = cache
                .active(l, i)
                .map(|(j, e)| (j, (e.key.as_slice(), e.value.as_slice(), self.key_bias(l, j))))
                .collect();
            let triples: Vec<_> = keys.iter().map(|(_, k)| *k).collect();
            let (heads_out, probs) = attend(model.shape.head_dim(), &q, &triples)?;
            if self.capture(i) {
                recorder.push(i, keys.iter().map(|(j, _)| *j), &probs);
            }
            next.row_mut(i)
                .copy_from_slice(&model.finish_row(l, self.hidden.row(i), &heads_out));
        }
        self.hidden = next;
        recorder.finish()
    }

    fn layer_masking(&mut self, l: usize) -> Result<Option<AttentionRecord>> {
        let model = self.model;
        let n = self.prompt.layout.len();
        let mut keys = Vec::with_capacity(n);
        let mut queries = Vec::with_capacity(n);
        for t in 0..n {
            let x = model.attn_input(l, self.hidden.row(t));
            let pos = self.state.id(t);
            keys.push(model.key_value(l, &x, pos));
            queries.push(model.query(l, &x, pos));
        }
        let mut next = Matrix::zeros(n, model.hidden());
        let mut recorder = Recorder::new(model.shape.heads, n);
        for i in 0..n {
            let triples: Vec<(&[f64], &[f64], f64)> = (0..=i)
                .map(|j| {
                    let bias = if self.live[j] || j == i {
                        self.key_bias(l, j)
                    } else {
                        f64::NEG_INFINITY
                    };
                    (keys[j].0.as_slice(), keys[j].1.as_slice(), bias)
                })
                .collect();
            let (heads_out, probs) = attend(model.shape.head_dim(), &queries[i], &triples)?;
            if self.live[i] && self.capture(i) {
                recorder.push(i, 0..=i, &probs);
            }
            next.row_mut(i)
                .copy_from_slice(&model.finish_row(l, self.hidden.row(i), &heads_out));
        }
        self.hidden = next;
        recorder.finish()
    }

    pub(crate) fn finish(self) -> Result<ForwardOutput> {
        let last = self.hidden.rows() - 1;
        let logits = self.model.logits(self.hidden.row(last));
        Ok(ForwardOutput {
            layout: self.prompt.layout.clone(),
            hidden: self.out_hidden,
            live: self.out_live,
            positions: self.out_positions,
            logits,
            selections: self.selections,
            attention: self.out_attention,
            cache: self.cache,
            pe_state: self.state,
        })
    }
}

fn zero_dead(m: &mut Matrix, live: &[bool]) {
    for (t, &alive) in live.iter().enumerate() {
        if !alive {
            m.row_mut(t).iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

struct Recorder {
    queries: Vec<usize>,
    rows: Vec<Vec<Vec<f64>>>,
    n: usize,
}

impl Recorder {
    fn new(heads: usize, n: usize) -> Self {
        Self {
            queries: Vec::new(),
            rows: vec![Vec::new(); heads],
            n,
        }
    }

    fn push(&mut self, query: usize, keys: impl Iterator<Item = usize> + Clone, probs: &[Vec<f64>]) {
        self.queries.push(query);
        for (h, p) in probs.iter().enumerate() {
            let mut row = vec![0.0; self.n];
            for (j, w) in keys.clone().zip(p) {
                row[j] = *w;
            }
            self.rows[h].push(row);
        }
    }

    fn finish(self) -> Result<Option<AttentionRecord>> {
        if self.queries.is_empty() {
            return Ok(None);
        }
        let heads = self.rows.iter().map(|r| Matrix::from_rows(r)).collect::<Result<_>>()?;
        Ok(Some(AttentionRecord {
            queries: self.queries,
            heads,
        }))
    }
}

pub fn forward(model: &ToyModel, prompt: &Prompt, cfg: &ForwardConfig) -> Result<ForwardOutput> {
    let mut run = Runner::new(model, prompt, cfg)?;
    for l in 1..=model.num_layers() {
        run.step(l)?;
    }
    run.finish()
}

/// Plain causal pass over every token with the layout's position ids.
/// Returns the hidden states per layer (0 = embeddings) and the final logits.
pub fn reference_forward(model: &ToyModel, prompt: &Prompt) -> Result<(Vec<Matrix>, Vec<f64>)> {
    let n = prompt.layout.len();
    let ids = prompt.layout.persistent_ids();
    let mut h = prompt.embeddings.clone();
    let mut all = vec![h.clone()];
    for l in 1..=model.num_layers() {
        let normed: Vec<Vec<f64>> = h.iter_rows().map(|r| model.attn_input(l, r)).collect();
        let kv: Vec<(Vec<f64>, Vec<f64>)> = (0..n).map(|t| model.key_value(l, &normed[t], ids[t])).collect();
        let mut next = Matrix::zeros(n, model.hidden());
        for i in 0..n {
            let q = model.query(l, &normed[i], ids[i]);
            let triples: Vec<(&[f64], &[f64], f64)> = (0..=i)
                .map(|j| {
                    let bias = if prompt.layout.is_vision(j) {
                        model.vision_key_bias[l]
                    } else {
                        0.0
                    };
                    (kv[j].0.as_slice(), kv[j].1.as_slice(), bias)
                })
                .collect();
            let (heads_out, _) = attend(model.shape.head_dim(), &q, &triples)?;
            next.row_mut(i).copy_from_slice(&model.finish_row(l, h.row(i), &heads_out));
        }
        h = next;
        all.push(h.clone());
    }
    let logits = model.logits(h.row(n - 1));
    Ok((all, logits))
}

/// One autoregressive step on top of a removal-mode prefill: appends a text
/// token, writes its KV on every layer and returns its logits. Vision rows
/// that were pruned or exited stay inactive.
pub fn decode_step(model: &ToyModel, prefill: &mut ForwardOutput, embedding: &[f64]) -> Result<Vec<f64>> {
    if embedding.len() != model.hidden() {
        return Err(Error::LengthMismatch {
            expected: model.hidden(),
            got: embedding.len(),
        });
    }
    let prompt_len = prefill.layout.len();
    let cache = prefill
        .cache
        .as_mut()
        .ok_or_else(|| Error::param("prefill", "decoding needs a removal-mode prefill"))?;
    let pos = prefill.pe_state.append_text();
    let t = cache.push_token();
    let mut h = embedding.to_vec();
    for l in 1..=model.num_layers() {
        let x = model.attn_input(l, &h);
        let (k, v) = model.key_value(l, &x, pos);
        cache.write(l, t, k, v)?;
        let q = model.query(l, &x, pos);
        let triples: Vec<(&[f64], &[f64], f64)> = cache
            .active(l, t)
            .map(|(j, e)| {
                let bias = if j < prompt_len && prefill.layout.is_vision(j) {
                    model.vision_key_bias[l]
                } else {
                    0.0
                };
                (e.key.as_slice(), e.value.as_slice(), bias)
            })
            .collect();
        let (heads_out, _) = attend(model.shape.head_dim(), &q, &triples)?;
        h = model.finish_row(l, &h, &heads_out);
    }
    Ok(model.logits(&h))
}
