//! Representational probes over layer traces and the filter-layer selector.
//!
//! * [`s_intra`]: per modality, mean cosine between a token's states at
//!   consecutive layers, averaged over tokens and then samples.
//! * [`s_cross`]: cosine between the mean-pooled instruction representation
//!   of a sample paired with a mismatched image and the same instruction
//!   paired with the reference image.
//! * [`ilvas`]: agreement of the per-head attention received by the top-K
//!   vision tokens at layer `l` and at layer `l + n`.
//!
//! Samples are always reduced in sorted `sample_id` order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::cosine;
use crate::trace::{LayerTrace, Modality, Pairing};

fn sorted(traces: &[LayerTrace]) -> Vec<&LayerTrace> {
    let mut v: Vec<&LayerTrace> = traces.iter().collect();
    v.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    v
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    (count > 0).then(|| sum / count as f64)
}

/// One entry per transition `l -> l + 1`, `l = 0..L`. Transitions where no
/// token of the modality is live on both sides (in any sample) are `None`.
pub fn s_intra(traces: &[LayerTrace], modality: Modality) -> Result<Vec<Option<f64>>> {
    let traces = sorted(traces);
    let first = traces.first().ok_or(Error::EmptyInput)?;
    let layers = first.num_layers();
    for t in &traces {
        if t.tokens_of(modality).next().is_none() {
            return Err(Error::ModalityAbsent(modality, t.sample_id.clone()));
        }
        if t.num_layers() != layers {
            return Err(Error::LengthMismatch {
                expected: layers,
                got: t.num_layers(),
            });
        }
    }
    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        let mut per_sample = Vec::with_capacity(traces.len());
        for t in &traces {
            let (a, b) = (&t.layers[l], &t.layers[l + 1]);
            let cosines: Result<Vec<f64>> = t
                .tokens_of(modality)
                .filter(|&i| a.is_live(i) && b.is_live(i))
                .map(|i| cosine(a.hidden.row(i), b.hidden.row(i)))
                .collect();
            if let Some(m) = mean(cosines?.into_iter()) {
                per_sample.push(m);
            }
        }
        out.push(mean(per_sample.into_iter()));
    }
    Ok(out)
}

/// Mean of the live instruction (textual) token states at layer `l`.
pub fn instruction_representation(trace: &LayerTrace, l: usize) -> Result<Vec<f64>> {
    let rec = trace.layer(l)?;
    let ids: Vec<usize> = trace
        .tokens_of(Modality::Textual)
        .filter(|&i| rec.is_live(i))
        .collect();
    if ids.is_empty() {
        return Err(Error::ModalityAbsent(Modality::Textual, trace.sample_id.clone()));
    }
    let mut pooled = vec![0.0; rec.hidden.cols()];
    for &i in &ids {
        for (p, v) in pooled.iter_mut().zip(rec.hidden.row(i)) {
            *p += v;
        }
    }
    let inv = 1.0 / ids.len() as f64;
    pooled.iter_mut().for_each(|p| *p *= inv);
    Ok(pooled)
}

/// Groups traces into `(mismatched, reference)` pairs by `pair_id`.
pub fn pair_traces(traces: &[LayerTrace]) -> Result<Vec<(LayerTrace, LayerTrace)>> {
    let mut ids: Vec<&str> = traces.iter().filter_map(|t| t.pair_id.as_deref()).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut pairs = Vec::with_capacity(ids.len());
    for id in ids {
        let find = |p: Pairing| {
            let hits: Vec<&LayerTrace> = traces
                .iter()
                .filter(|t| t.pair_id.as_deref() == Some(id) && t.pairing == Some(p))
                .collect();
            match hits.as_slice() {
                [one] => Ok((*one).clone()),
                _ => Err(Error::param(
                    "pairing",
                    format!("pair `{id}` needs exactly one {p:?} trace, found {}", hits.len()),
                )),
            }
        };
        pairs.push((find(Pairing::Mismatched)?, find(Pairing::Reference)?));
    }
    if pairs.is_empty() {
        return Err(Error::param("pairing", "no traces carry a pair_id"));
    }
    Ok(pairs)
}

/// One entry per layer `0..=L`.
pub fn s_cross(pairs: &[(LayerTrace, LayerTrace)]) -> Result<Vec<f64>> {
    let mut pairs: Vec<&(LayerTrace, LayerTrace)> = pairs.iter().collect();
    pairs.sort_by(|a, b| a.0.sample_id.cmp(&b.0.sample_id));
    let first = pairs.first().ok_or(Error::EmptyInput)?;
    let layers = first.0.num_layers();
    for (mis, reference) in &pairs {
        for (t, want) in [(mis, Pairing::Mismatched), (reference, Pairing::Reference)] {
            if t.pairing.map_or(false, |p| p != want) {
                return Err(Error::param(
                    "pairing",
                    format!("trace `{}` is tagged {:?}, expected {want:?}", t.sample_id, t.pairing),
                ));
            }
        }
        let a = mis.tokens_of(Modality::Textual).count();
        let b = reference.tokens_of(Modality::Textual).count();
        if a != b {
            return Err(Error::SpanMismatch(a, b));
        }
        for t in [mis, reference] {
            if t.num_layers() != layers {
                return Err(Error::LengthMismatch {
                    expected: layers,
                    got: t.num_layers(),
                });
            }
        }
    }
    (0..=layers)
        .map(|l| {
            let mut total = 0.0;
            for (mis, reference) in &pairs {
                total += cosine(
                    &instruction_representation(mis, l)?,
                    &instruction_representation(reference, l)?,
                )?;
            }
            Ok(total / pairs.len() as f64)
        })
        .collect()
}

/// Per vision token live at `l`: the length-H vector of mean attention it
/// receives from the recorded textual queries in each head.
pub fn received_attention(trace: &LayerTrace, l: usize) -> Result<Vec<(usize, Vec<f64>)>> {
    let rec = trace.layer(l)?;
    let att = trace.attention(l)?;
    let text_rows: Vec<usize> = att
        .queries
        .iter()
        .enumerate()
        .filter(|(_, &q)| trace.tokens[q].modality == Modality::Textual)
        .map(|(r, _)| r)
        .collect();
    if text_rows.is_empty() {
        return Err(Error::MissingLayer {
            layer: l,
            what: "textual attention queries",
        });
    }
    let inv = 1.0 / text_rows.len() as f64;
    Ok(trace
        .tokens_of(Modality::Visual)
        .filter(|&i| rec.is_live(i))
        .map(|i| {
            let per_head = att
                .heads
                .iter()
                .map(|h| text_rows.iter().map(|&r| h.get(r, i)).sum::<f64>() * inv)
                .collect();
            (i, per_head)
        })
        .collect())
}

fn ilvas_single(trace: &LayerTrace, l: usize, n: usize, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::param("K", "must be positive"));
    }
    let here = received_attention(trace, l)?;
    let later = received_attention(trace, l + n)?;
    let mut candidates: Vec<(usize, &Vec<f64>, &Vec<f64>, f64)> = here
        .iter()
        .filter_map(|(i, a)| {
            later.iter().find(|(j, _)| j == i).map(|(_, b)| {
                let key = a.iter().sum::<f64>() / a.len() as f64;
                (*i, a, b, key)
            })
        })
        .collect();
    if candidates.len() < k {
        return Err(Error::NotEnoughTokens {
            k,
            live: candidates.len(),
        });
    }
    candidates.sort_by(|x, y| y.3.total_cmp(&x.3).then(x.0.cmp(&y.0)));
    let mut total = 0.0;
    for (_, a, b, _) in candidates.iter().take(k) {
        total += cosine(a, b)?;
    }
    Ok(total / k as f64)
}

/// ILVAS(l, l + n, K), averaged over samples. Candidates are the vision
/// tokens live at both layers; the top K by head-mean received attention at
/// layer `l` are scored.
pub fn ilvas(traces: &[LayerTrace], l: usize, n: usize, k: usize) -> Result<f64> {
    let traces = sorted(traces);
    if traces.is_empty() {
        return Err(Error::EmptyInput);
    }
    if n == 0 {
        return Err(Error::param("n", "window must be positive"));
    }
    let mut total = 0.0;
    for t in &traces {
        total += ilvas_single(t, l, n, k)?;
    }
    Ok(total / traces.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IlvasMode {
    /// Exactly `(l, l + n)`.
    Exact,
    /// Mean over offsets `1..=n`.
    Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlvasCurve {
    pub layers: Vec<usize>,
    pub scores: Vec<f64>,
    pub window: usize,
    pub top_k: usize,
    pub mode: IlvasMode,
}

impl IlvasCurve {
    pub fn score_at(&self, layer: usize) -> Option<f64> {
        self.layers
            .iter()
            .position(|&l| l == layer)
            .map(|i| self.scores[i])
    }
}

/// Curve over every `l` in `[lo, hi]` whose partner layer(s) have attention.
pub fn ilvas_curve(
    traces: &[LayerTrace],
    lo: usize,
    hi: usize,
    n: usize,
    k: usize,
    mode: IlvasMode,
) -> Result<IlvasCurve> {
    let first = traces.first().ok_or(Error::EmptyInput)?;
    let recorded = first.attention_layers();
    let has = |l: usize| recorded.binary_search(&l).is_ok();
    let mut layers = Vec::new();
    let mut scores = Vec::new();
    for l in lo..=hi {
        let ready = match mode {
            IlvasMode::Exact => has(l) && has(l + n),
            IlvasMode::Aggregate => has(l) && (1..=n).all(|o| has(l + o)),
        };
        if !ready {
            continue;
        }
        let score = match mode {
            IlvasMode::Exact => ilvas(traces, l, n, k)?,
            IlvasMode::Aggregate => {
                let mut s = 0.0;
                for o in 1..=n {
                    s += ilvas(traces, l, o, k)?;
                }
                s / n as f64
            }
        };
        layers.push(l);
        scores.push(score);
    }
    Ok(IlvasCurve {
        layers,
        scores,
        window: n,
        top_k: k,
        mode,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Extremum {
    #[default]
    Maxima,
    Valleys,
}

/// Local extrema of the curve inside `[lo, hi]`.
///
/// Interior plateaus count when both neighbors are strictly lower (higher,
/// for valleys) and report their leftmost layer. A boundary plateau counts
/// when it beats its single inner neighbor.
pub fn select_filter_layers(
    curve: &IlvasCurve,
    lo: usize,
    hi: usize,
    extremum: Extremum,
) -> Result<Vec<usize>> {
    if hi < lo + 2 {
        return Err(Error::WindowTooShort { lo, hi });
    }
    let sign = match extremum {
        Extremum::Maxima => 1.0,
        Extremum::Valleys => -1.0,
    };
    let values: Vec<f64> = (lo..=hi)
        .map(|l| {
            curve.score_at(l).map(|v| sign * v).ok_or(Error::MissingLayer {
                layer: l,
                what: "ILVAS score",
            })
        })
        .collect::<Result<_>>()?;

    // Runs of equal values: (start, end) inclusive indices into `values`.
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for i in 0..values.len() {
        match runs.last_mut() {
            Some((_, end)) if values[*end] == values[i] => *end = i,
            _ => runs.push((i, i)),
        }
    }
    let mut picked = Vec::new();
    for (r, &(start, _)) in runs.iter().enumerate() {
        let v = values[start];
        let left = r.checked_sub(1).map(|p| values[runs[p].0]);
        let right = runs.get(r + 1).map(|n| values[n.0]);
        let is_peak = match (left, right) {
            (Some(a), Some(b)) => v > a && v > b,
            (None, Some(b)) => v > b,
            (Some(a), None) => v > a,
            (None, None) => false,
        };
        if is_peak {
            picked.push(lo + start);
        }
    }
    Ok(picked)
}

/// Keeps the `limit` highest-scoring layers (in layer order).
pub fn strongest(curve: &IlvasCurve, layers: &[usize], limit: usize, extremum: Extremum) -> Vec<usize> {
    let sign = if extremum == Extremum::Maxima { 1.0 } else { -1.0 };
    let mut ranked: Vec<(usize, f64)> = layers
        .iter()
        .map(|&l| (l, sign * curve.score_at(l).unwrap_or(f64::NEG_INFINITY)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out: Vec<usize> = ranked.into_iter().take(limit).map(|(l, _)| l).collect();
    out.sort_unstable();
    out
}
