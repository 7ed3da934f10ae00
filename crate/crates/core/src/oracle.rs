//! Slow reference implementations written as plain loops.
//!
//! They share no code with the production paths beyond the data types and
//! exist to cross-check them in tests and in `vtdrop verify`.

use crate::importance::{HeadReduce, SaliencyConfig, SoftmaxDomain, Strategy};
use crate::layout::SequenceLayout;
use crate::trace::{LayerTrace, Modality};

fn cos(u: &[f64], v: &[f64]) -> f64 {
    let mut uv = 0.0;
    let mut uu = 0.0;
    let mut vv = 0.0;
    for i in 0..u.len() {
        uv += u[i] * v[i];
        uu += u[i] * u[i];
        vv += v[i] * v[i];
    }
    uv / (uu.sqrt() * vv.sqrt())
}

fn live(trace: &LayerTrace, l: usize, t: usize) -> bool {
    match &trace.layers[l].live {
        Some(v) => v[t],
        None => true,
    }
}

fn by_id(traces: &[LayerTrace]) -> Vec<&LayerTrace> {
    let mut v: Vec<&LayerTrace> = traces.iter().collect();
    v.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    v
}

pub fn s_intra(traces: &[LayerTrace], modality: Modality) -> Vec<Option<f64>> {
    let traces = by_id(traces);
    let layers = traces[0].layers.len() - 1;
    let mut out = Vec::new();
    for l in 0..layers {
        let mut sample_sum = 0.0;
        let mut samples = 0;
        for t in &traces {
            let mut sum = 0.0;
            let mut count = 0;
            for tok in &t.tokens {
                if tok.modality == modality && live(t, l, tok.index) && live(t, l + 1, tok.index) {
                    sum += cos(t.layers[l].hidden.row(tok.index), t.layers[l + 1].hidden.row(tok.index));
                    count += 1;
                }
            }
            if count > 0 {
                sample_sum += sum / count as f64;
                samples += 1;
            }
        }
        out.push(if samples > 0 {
            Some(sample_sum / samples as f64)
        } else {
            None
        });
    }
    out
}

fn pooled_text(trace: &LayerTrace, l: usize) -> Vec<f64> {
    let d = trace.layers[l].hidden.cols();
    let mut acc = vec![0.0; d];
    let mut count = 0;
    for tok in &trace.tokens {
        if tok.modality == Modality::Textual && live(trace, l, tok.index) {
            let row = trace.layers[l].hidden.row(tok.index);
            for c in 0..d {
                acc[c] += row[c];
            }
            count += 1;
        }
    }
    acc.iter().map(|a| a * (1.0 / count as f64)).collect()
}

/// Pairs are `(mismatched, reference)`.
pub fn s_cross(pairs: &[(LayerTrace, LayerTrace)]) -> Vec<f64> {
    let mut pairs: Vec<&(LayerTrace, LayerTrace)> = pairs.iter().collect();
    pairs.sort_by(|a, b| a.0.sample_id.cmp(&b.0.sample_id));
    let layers = pairs[0].0.layers.len() - 1;
    (0..=layers)
        .map(|l| {
            let mut total = 0.0;
            for (m, r) in &pairs {
                total += cos(&pooled_text(m, l), &pooled_text(r, l));
            }
            total / pairs.len() as f64
        })
        .collect()
}

fn received(trace: &LayerTrace, l: usize, token: usize) -> Vec<f64> {
    let att = trace.layers[l].attention.as_ref().expect("attention recorded");
    let mut out = Vec::new();
    for head in &att.heads {
        let mut sum = 0.0;
        let mut count = 0;
        for (r, &q) in att.queries.iter().enumerate() {
            if trace.tokens[q].modality == Modality::Textual {
                sum += head.get(r, token);
                count += 1;
            }
        }
        out.push(sum / count as f64);
    }
    out
}

pub fn ilvas(traces: &[LayerTrace], l: usize, n: usize, k: usize) -> f64 {
    let traces = by_id(traces);
    let mut total = 0.0;
    for t in &traces {
        let mut cand: Vec<(usize, f64)> = Vec::new();
        for tok in &t.tokens {
            if tok.modality == Modality::Visual && live(t, l, tok.index) && live(t, l + n, tok.index) {
                let a = received(t, l, tok.index);
                cand.push((tok.index, a.iter().sum::<f64>() / a.len() as f64));
            }
        }
        // Selection sort: highest mean first, lower index on ties.
        let mut chosen = Vec::new();
        for _ in 0..k {
            let mut best: Option<usize> = None;
            for (i, c) in cand.iter().enumerate() {
                if chosen.contains(&c.0) {
                    continue;
                }
                best = match best {
                    Some(b) if cand[b].1 > c.1 || (cand[b].1 == c.1 && cand[b].0 < c.0) => Some(b),
                    _ => Some(i),
                };
            }
            chosen.push(cand[best.expect("enough candidates")].0);
        }
        let mut s = 0.0;
        for &tok in &chosen {
            s += cos(&received(t, l, tok), &received(t, l + n, tok));
        }
        total += s / k as f64;
    }
    total / traces.len() as f64
}

/// Saliency from fully materialized per-head attention matrices.
/// `q` and `k` are `tokens x (heads * head_dim)`; dead tokens are ignored.
pub fn saliency(
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    heads: usize,
    layout: &SequenceLayout,
    live_tokens: &[bool],
    hidden_norms: &[f64],
    cfg: &SaliencyConfig,
) -> Vec<f64> {
    let n = layout.len();
    let hd = q[0].len() / heads;
    let allowed = |i: usize, j: usize| {
        j <= i
            && live_tokens[j]
            && match cfg.domain {
                SoftmaxDomain::VisionOnly => layout.is_vision(j),
                SoftmaxDomain::CausalFull => true,
            }
    };
    // att[h][i][j]
    let mut att = vec![vec![vec![0.0; n]; n]; heads];
    for h in 0..heads {
        for i in 0..n {
            if !live_tokens[i] || !(0..n).any(|j| allowed(i, j)) {
                continue;
            }
            let mut logits = vec![f64::NEG_INFINITY; n];
            for j in 0..n {
                if allowed(i, j) {
                    let mut s = 0.0;
                    for c in h * hd..(h + 1) * hd {
                        s += q[i][c] * k[j][c];
                    }
                    logits[j] = s / (hd as f64).sqrt();
                }
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|x| (x - m).exp()).sum();
            for j in 0..n {
                att[h][i][j] = (logits[j] - m).exp() / z;
            }
        }
    }
    let text: Vec<usize> = (0..n).filter(|&t| layout.is_text(t) && live_tokens[t]).collect();
    let queries: Vec<usize> = match cfg.strategy {
        Strategy::LastToken1R => vec![*text.last().expect("text token")],
        Strategy::LastTokenNR | Strategy::LastTokenNRL2 => match &cfg.rounds {
            Some(r) => r.clone(),
            None => text
                .iter()
                .copied()
                .filter(|&t| t + 1 >= n || !layout.is_text(t + 1) || layout.tokens()[t + 1].segment != layout.tokens()[t].segment)
                .collect(),
        },
        Strategy::AllToken | Strategy::AllTokenL2 => text.clone(),
    };
    let l2 = matches!(cfg.strategy, Strategy::LastTokenNRL2 | Strategy::AllTokenL2);
    let norm_total: f64 = queries.iter().map(|&i| hidden_norms[i]).sum();
    let vision: Vec<usize> = (0..n).filter(|&t| layout.is_vision(t) && live_tokens[t]).collect();
    let mut out = vec![0.0; vision.len()];
    for &i in &queries {
        let w = if l2 {
            hidden_norms[i] / norm_total
        } else {
            1.0 / queries.len() as f64
        };
        for (slot, &v) in vision.iter().enumerate() {
            let per_head = match cfg.heads {
                HeadReduce::Mean => (0..heads).map(|h| att[h][i][v]).sum::<f64>() / heads as f64,
                HeadReduce::Max => (0..heads).map(|h| att[h][i][v]).fold(f64::NEG_INFINITY, f64::max),
            };
            out[slot] += w * per_head;
        }
    }
    out
}

/// Top `keep` positions by score, lower position first on ties, returned in
/// ascending order.
pub fn top_k(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut out = idx[..keep].to_vec();
    out.sort_unstable();
    out
}
