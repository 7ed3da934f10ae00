//! Vision-token saliency from a side attention pass.
//!
//! Saliency is read from text-query rows of an attention computed apart from
//! the main one, so the main pass keeps its full-sequence shape. A strategy
//! picks the query set and how rows are weighted:
//!
//! | strategy            | queries                                  | weights          |
//! |---------------------|------------------------------------------|------------------|
//! | `LastToken1R`       | final live text token                    | 1                |
//! | `LastTokenNR`       | configured rounds, or each segment's end | uniform          |
//! | `LastTokenNRL2`     | as above                                 | `‖h_q‖` normalized |
//! | `AllToken`          | every live text token                    | uniform          |
//! | `AllTokenL2`        | every live text token                    | `‖h_q‖` normalized |
//!
//! Each query row is a per-head softmax (over live vision keys, or over all
//! causal live keys), reduced over heads first and then over queries.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dtopk::{keep_count_to_ratio, select_exact, soft_mask, RankVariant, SoftMask};
use crate::error::{Error, Result};
use crate::layout::SequenceLayout;
use crate::numeric::{dot, softmax};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    #[serde(rename = "last-token-1r")]
    LastToken1R,
    #[serde(rename = "last-token-nr")]
    LastTokenNR,
    #[serde(rename = "last-token-nr-l2")]
    LastTokenNRL2,
    AllToken,
    #[serde(rename = "all-token-l2")]
    AllTokenL2,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::LastToken1R,
        Strategy::LastTokenNR,
        Strategy::LastTokenNRL2,
        Strategy::AllToken,
        Strategy::AllTokenL2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::LastToken1R => "last-token-1r",
            Strategy::LastTokenNR => "last-token-nr",
            Strategy::LastTokenNRL2 => "last-token-nr-l2",
            Strategy::AllToken => "all-token",
            Strategy::AllTokenL2 => "all-token-l2",
        }
    }

    /// Row label as printed in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Strategy::LastToken1R => "Last token (1-rounds)",
            Strategy::LastTokenNR => "Last token (n-rounds)",
            Strategy::LastTokenNRL2 => "Last token (n-rounds, L2 norm)",
            Strategy::AllToken => "All token",
            Strategy::AllTokenL2 => "All token (L2 norm)",
        }
    }

    fn l2_weighted(self) -> bool {
        matches!(self, Strategy::LastTokenNRL2 | Strategy::AllTokenL2)
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .to_ascii_lowercase()
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect();
        let found = match key.as_str() {
            "lasttoken1r" | "lasttoken1rounds" => Strategy::LastToken1R,
            "lasttokennr" | "lasttokennrounds" => Strategy::LastTokenNR,
            "lasttokennrl2" | "lasttokennroundsl2norm" | "lasttokennrl2norm" => Strategy::LastTokenNRL2,
            "alltoken" => Strategy::AllToken,
            "alltokenl2" | "alltokenl2norm" => Strategy::AllTokenL2,
            _ => {
                return Err(Error::param(
                    "strategy",
                    format!(
                        "unknown saliency strategy `{s}`; expected one of {}",
                        Strategy::ALL.map(Strategy::name).join(", ")
                    ),
                ))
            }
        };
        Ok(found)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxDomain {
    #[default]
    VisionOnly,
    CausalFull,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadReduce {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyConfig {
    pub strategy: Strategy,
    /// Explicit query positions for the n-rounds strategies.
    #[serde(default)]
    pub rounds: Option<Vec<usize>>,
    #[serde(default)]
    pub domain: SoftmaxDomain,
    #[serde(default)]
    pub heads: HeadReduce,
    /// Gate temperature; `None` uses the candidate count.
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub rank: RankVariant,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        Self::new(Strategy::LastTokenNR)
    }
}

impl SaliencyConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            rounds: None,
            domain: SoftmaxDomain::VisionOnly,
            heads: HeadReduce::Mean,
            lambda: None,
            rank: RankVariant::Hard,
        }
    }
}

/// Per-token projected states, heads concatenated. Dead tokens are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadStates {
    pub heads: usize,
    pub head_dim: usize,
    pub rows: Vec<Option<Vec<f64>>>,
}

impl HeadStates {
    pub fn head(&self, token: usize, h: usize) -> Option<&[f64]> {
        self.rows[token]
            .as_deref()
            .map(|r| &r[h * self.head_dim..(h + 1) * self.head_dim])
    }
}

/// Queries a strategy reads from, with their aggregation weights.
pub fn query_set(
    layout: &SequenceLayout,
    live: &[bool],
    hidden_norms: &[f64],
    cfg: &SaliencyConfig,
) -> Result<Vec<(usize, f64)>> {
    let live_text: Vec<usize> = layout.text_tokens().filter(|&t| live[t]).collect();
    let queries: Vec<usize> = match cfg.strategy {
        Strategy::LastToken1R => live_text.last().copied().into_iter().collect(),
        Strategy::LastTokenNR | Strategy::LastTokenNRL2 => match &cfg.rounds {
            Some(r) => {
                for &q in r {
                    if q >= layout.len() || !layout.is_text(q) || !live[q] {
                        return Err(Error::param(
                            "rounds",
                            format!("query position {q} is not a live text token"),
                        ));
                    }
                }
                r.clone()
            }
            None => layout.segment_ends().into_iter().filter(|&t| live[t]).collect(),
        },
        Strategy::AllToken | Strategy::AllTokenL2 => live_text,
    };
    if queries.is_empty() {
        return Err(Error::EmptyQuerySet);
    }
    let weights: Vec<f64> = if cfg.strategy.l2_weighted() {
        let norms: Vec<f64> = queries.iter().map(|&q| hidden_norms[q]).collect();
        let total: f64 = norms.iter().sum();
        if !(total > 0.0) {
            return Err(Error::ZeroNorm);
        }
        norms.iter().map(|n| n / total).collect()
    } else {
        vec![1.0 / queries.len() as f64; queries.len()]
    };
    Ok(queries.into_iter().zip(weights).collect())
}

/// Saliency of each live vision token, in sequence order.
pub fn saliency(
    q: &HeadStates,
    k: &HeadStates,
    layout: &SequenceLayout,
    live: &[bool],
    hidden_norms: &[f64],
    cfg: &SaliencyConfig,
) -> Result<Vec<f64>> {
    let vision: Vec<usize> = layout.vision_tokens().filter(|&t| live[t]).collect();
    if vision.is_empty() {
        return Err(Error::NoVisionTokens);
    }
    let queries = query_set(layout, live, hidden_norms, cfg)?;
    let scale = 1.0 / (q.head_dim as f64).sqrt();
    let mut scores = vec![0.0; vision.len()];
    for &(qi, weight) in &queries {
        let keys: Vec<usize> = match cfg.domain {
            SoftmaxDomain::VisionOnly => vision.iter().copied().filter(|&j| j <= qi).collect(),
            SoftmaxDomain::CausalFull => (0..=qi).filter(|&j| live[j]).collect(),
        };
        let mut reduced = vec![
            match cfg.heads {
                HeadReduce::Mean => 0.0,
                HeadReduce::Max => f64::NEG_INFINITY,
            };
            vision.len()
        ];
        for h in 0..q.heads {
            let qv = q.head(qi, h).ok_or_else(|| missing_state("query", qi))?;
            let logits = keys
                .iter()
                .map(|&j| {
                    k.head(j, h)
                        .map(|kv| dot(qv, kv) * scale)
                        .ok_or_else(|| missing_state("key", j))
                })
                .collect::<Result<Vec<f64>>>()?;
            let probs = softmax(&logits, None)?;
            for (slot, &v) in vision.iter().enumerate() {
                let p = keys.iter().position(|&j| j == v).map_or(0.0, |pos| probs[pos]);
                match cfg.heads {
                    HeadReduce::Mean => reduced[slot] += p / q.heads as f64,
                    HeadReduce::Max => reduced[slot] = reduced[slot].max(p),
                }
            }
        }
        for (s, r) in scores.iter_mut().zip(&reduced) {
            *s += weight * r;
        }
    }
    Ok(scores)
}

fn missing_state(what: &str, token: usize) -> Error {
    Error::Invariant(format!("no {what} state for live token {token}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Live vision tokens before the event, in sequence order.
    pub candidates: Vec<usize>,
    pub mask: SoftMask,
    /// Surviving token indices, in sequence order.
    pub survivors: Vec<usize>,
}

impl Selection {
    /// Soft gate value of a surviving token.
    pub fn soft_value(&self, token: usize) -> Option<f64> {
        self.candidates
            .iter()
            .position(|&c| c == token)
            .map(|i| self.mask.soft_values[i])
    }
}

/// Gate the candidates by their scores and keep exactly `keep` of them.
pub fn select_from_scores(
    candidates: &[usize],
    scores: &[f64],
    keep: usize,
    cfg: &SaliencyConfig,
) -> Result<Selection> {
    if candidates.len() != scores.len() {
        return Err(Error::LengthMismatch {
            expected: candidates.len(),
            got: scores.len(),
        });
    }
    let n = candidates.len();
    if keep > n {
        return Err(Error::KeepCountOutOfRange { k: keep, n });
    }
    let ratio = keep_count_to_ratio(keep, n)?;
    let lambda = cfg.lambda.unwrap_or(n as f64);
    let mask = soft_mask(scores, ratio, lambda, cfg.rank)?;
    let survivors = select_exact(&mask, keep)?
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    Ok(Selection {
        candidates: candidates.to_vec(),
        mask,
        survivors,
    })
}

pub fn score_and_select(
    q: &HeadStates,
    k: &HeadStates,
    layout: &SequenceLayout,
    live: &[bool],
    hidden_norms: &[f64],
    cfg: &SaliencyConfig,
    keep: usize,
) -> Result<Selection> {
    let candidates: Vec<usize> = layout.vision_tokens().filter(|&t| live[t]).collect();
    if keep > candidates.len() {
        return Err(Error::KeepCountOutOfRange {
            k: keep,
            n: candidates.len(),
        });
    }
    let scores = saliency(q, k, layout, live, hidden_norms, cfg)?;
    select_from_scores(&candidates, &scores, keep, cfg)
}
