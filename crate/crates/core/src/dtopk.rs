//! Differentiable top-k selection.
//!
//! Scores are mapped to normalized ranks `c'_i = |{j : c_i >= c_j}| / n`,
//! then through a sigmoid gate `1 / (1 + exp(-lambda (c'_i - a)))` with a
//! pruning ratio `a` and temperature `lambda`. The forward pass keeps tokens
//! whose gate exceeds one half.
//!
//! Two rank variants exist. [`RankVariant::Hard`] is the counting rank; its
//! gradient with respect to the scores is zero and only `a` is learnable.
//! [`RankVariant::Soft`] replaces the off-diagonal indicators with
//! `sigmoid((c_i - c_j) / tau)` so score gradients exist. The diagonal term
//! stays at 1 in both variants, which makes the soft rank converge to the
//! hard one as `tau -> 0` on tie-free input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RankVariant {
    Hard,
    Soft { tau: f64 },
}

impl RankVariant {
    /// Soft ranks with `tau = 1/n`.
    pub fn soft_for(n: usize) -> Self {
        RankVariant::Soft {
            tau: 1.0 / n.max(1) as f64,
        }
    }
}

impl Default for RankVariant {
    fn default() -> Self {
        RankVariant::Hard
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(i) = scores.iter().position(|c| !c.is_finite()) {
        return Err(Error::param("scores", format!("non-finite score at index {i}")));
    }
    Ok(())
}

pub fn normalized_rank(scores: &[f64], variant: RankVariant) -> Result<Vec<f64>> {
    check_scores(scores)?;
    let n = scores.len() as f64;
    match variant {
        RankVariant::Hard => {
            let mut sorted = scores.to_vec();
            sorted.sort_by(f64::total_cmp);
            Ok(scores
                .iter()
                .map(|c| sorted.partition_point(|s| s <= c) as f64 / n)
                .collect())
        }
        RankVariant::Soft { tau } => {
            if !(tau > 0.0) {
                return Err(Error::param("tau", format!("must be positive, got {tau}")));
            }
            Ok(scores
                .iter()
                .enumerate()
                .map(|(i, ci)| {
                    let cross: f64 = scores
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != i)
                        .map(|(_, cj)| sigmoid((ci - cj) / tau))
                        .sum();
                    (1.0 + cross) / n
                })
                .collect())
        }
    }
}

/// Output of the gate for one candidate set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftMask {
    pub scores: Vec<f64>,
    pub ranks: Vec<f64>,
    pub soft_values: Vec<f64>,
    pub hard_keep: Vec<bool>,
    pub ratio: f64,
    pub lambda: f64,
    pub variant: RankVariant,
}

impl SoftMask {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.hard_keep.iter().filter(|&&k| k).count()
    }
}

pub fn soft_mask(scores: &[f64], ratio: f64, lambda: f64, variant: RankVariant) -> Result<SoftMask> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::param("a", format!("must lie in [0, 1), got {ratio}")));
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::param("lambda", format!("must be positive, got {lambda}")));
    }
    let ranks = normalized_rank(scores, variant)?;
    let soft_values: Vec<f64> = ranks.iter().map(|r| sigmoid(lambda * (r - ratio))).collect();
    let hard_keep = soft_values.iter().map(|&s| s > 0.5).collect();
    Ok(SoftMask {
        scores: scores.to_vec(),
        ranks,
        soft_values,
        hard_keep,
        ratio,
        lambda,
        variant,
    })
}

/// Ratio `a` for which exactly `k` of `n` distinct hard ranks exceed `a`:
/// `(n - k)/n + 1/(2n)`, halfway between two rank levels.
pub fn keep_count_to_ratio(k: usize, n: usize) -> Result<f64> {
    if k == 0 || k > n {
        return Err(Error::KeepCountOutOfRange { k, n });
    }
    Ok((2 * (n - k) + 1) as f64 / (2 * n) as f64)
}

/// Indices of exactly `k` survivors in ascending index order.
///
/// Candidates are ordered by rank (descending) with the lower index winning
/// ties, so an all-equal score vector keeps the first `k` tokens.
pub fn select_exact(mask: &SoftMask, k: usize) -> Result<Vec<usize>> {
    let n = mask.len();
    if k > n {
        return Err(Error::KeepCountOutOfRange { k, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| mask.ranks[j].total_cmp(&mask.ranks[i]).then(i.cmp(&j)));
    let mut keep: Vec<usize> = order.into_iter().take(k).collect();
    keep.sort_unstable();
    Ok(keep)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskGradients {
    /// `d soft_i / d a`.
    pub d_ratio: Vec<f64>,
    /// `d soft_i / d c_j` at row `i`, column `j`. All zero for hard ranks.
    pub d_scores: Matrix,
}

pub fn mask_gradients(mask: &SoftMask) -> MaskGradients {
    let n = mask.len();
    let slope: Vec<f64> = mask
        .soft_values
        .iter()
        .map(|s| mask.lambda * s * (1.0 - s))
        .collect();
    let d_ratio = slope.iter().map(|g| -g).collect();
    let mut d_scores = Matrix::zeros(n, n);
    if let RankVariant::Soft { tau } = mask.variant {
        let inv_n = 1.0 / n as f64;
        for i in 0..n {
            let row = d_scores.row_mut(i);
            let mut diag = 0.0;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let s = sigmoid((mask.scores[i] - mask.scores[j]) / tau);
                let ds = s * (1.0 - s) / tau * inv_n;
                row[j] = -slope[i] * ds;
                diag += ds;
            }
            row[i] = slope[i] * diag;
        }
    }
    MaskGradients { d_ratio, d_scores }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::SeededRng;
    use proptest::prelude::*;

    fn brute_rank(c: &[f64]) -> Vec<f64> {
        c.iter()
            .map(|ci| c.iter().filter(|cj| ci >= cj).count() as f64 / c.len() as f64)
            .collect()
    }

    #[test]
    fn hard_rank_examples() {
        let c = [0.1, 0.4, 0.2, 0.3];
        assert_eq!(brute_rank(&c), vec![0.25, 1.0, 0.5, 0.75]);
        assert_eq!(normalized_rank(&c, RankVariant::Hard).unwrap(), vec![0.25, 1.0, 0.5, 0.75]);
        assert_eq!(
            normalized_rank(&[5.0, 5.0, 5.0], RankVariant::Hard).unwrap(),
            vec![1.0, 1.0, 1.0]
        );
        assert!(matches!(normalized_rank(&[], RankVariant::Hard), Err(Error::EmptyInput)));
    }

    #[test]
    fn soft_rank_limit() {
        let r = normalized_rank(&[0.0, 1.0], RankVariant::Soft { tau: 1e-4 }).unwrap();
        assert!((r[0] - 0.5).abs() < 1e-6);
        assert!((r[1] - 1.0).abs() < 1e-6);
        assert!(normalized_rank(&[0.0], RankVariant::Soft { tau: 0.0 }).is_err());
    }

    #[test]
    fn mask_examples() {
        let m = soft_mask(&[0.1, 0.4, 0.2, 0.3], 0.5, 576.0, RankVariant::Hard).unwrap();
        assert_eq!(m.hard_keep, vec![false, true, false, true]);

        let at = soft_mask(&[1.0, 2.0], 0.5, 10.0, RankVariant::Hard).unwrap();
        assert_eq!(at.soft_values[0], 0.5);
        let g = mask_gradients(&at);
        assert_eq!(g.d_ratio[0], -10.0 / 4.0);
    }

    #[test]
    fn mask_rejects_bad_parameters() {
        assert!(soft_mask(&[1.0], 1.0, 1.0, RankVariant::Hard).is_err());
        assert!(soft_mask(&[1.0], -0.1, 1.0, RankVariant::Hard).is_err());
        assert!(soft_mask(&[1.0], 0.5, 0.0, RankVariant::Hard).is_err());
    }

    #[test]
    fn keep_ratio_examples() {
        let n = 4;
        assert!(keep_count_to_ratio(n, n).unwrap() < 1.0 / n as f64);
        let a = keep_count_to_ratio(2, 4).unwrap();
        assert_eq!(a, 0.625);
        let kept: Vec<f64> = [0.25, 1.0, 0.5, 0.75].into_iter().filter(|r| *r > a).collect();
        assert_eq!(kept, vec![1.0, 0.75]);
        assert_eq!(keep_count_to_ratio(64, 576).unwrap(), 512.5 / 576.0);
        assert!(keep_count_to_ratio(5, 4).is_err());
        assert!(keep_count_to_ratio(0, 4).is_err());
    }

    #[test]
    fn keep_ratio_on_576_distinct_scores() {
        let mut rng = SeededRng::new(576);
        let scores: Vec<f64> = (0..576).map(|_| rng.unit()).collect();
        let a = keep_count_to_ratio(64, 576).unwrap();
        let m = soft_mask(&scores, a, 576.0, RankVariant::Hard).unwrap();
        assert_eq!(m.kept(), 64);
    }

    #[test]
    fn exact_selection_tie_rule() {
        let m = soft_mask(&[1.0; 6], keep_count_to_ratio(2, 6).unwrap(), 6.0, RankVariant::Hard)
            .unwrap();
        assert_eq!(select_exact(&m, 2).unwrap(), vec![0, 1]);
        let m = soft_mask(&[0.3, 0.9, 0.1, 0.9], 0.1, 4.0, RankVariant::Hard).unwrap();
        assert_eq!(select_exact(&m, 1).unwrap(), vec![1]);
        assert_eq!(select_exact(&m, 3).unwrap(), vec![0, 1, 3]);
    }

    #[test]
    fn hard_variant_has_no_score_gradient() {
        let m = soft_mask(&[0.3, 0.1, 0.7], 0.4, 3.0, RankVariant::Hard).unwrap();
        assert!(mask_gradients(&m).d_scores.data().iter().all(|&v| v == 0.0));
    }

    fn distinct_scores() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::btree_set(-1000i32..1000, 2..24)
            .prop_map(|s| s.into_iter().map(|v| v as f64 / 100.0).collect::<Vec<_>>())
            .prop_shuffle()
    }

    proptest! {
        #[test]
        fn permutation_equivariance(scores in distinct_scores(), seed in any::<u64>(), a in 0.0f64..0.99) {
            let n = scores.len();
            let mut perm: Vec<usize> = (0..n).collect();
            SeededRng::new(seed).shuffle(&mut perm);
            let permuted: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
            let m = soft_mask(&scores, a, n as f64, RankVariant::Hard).unwrap();
            let p = soft_mask(&permuted, a, n as f64, RankVariant::Hard).unwrap();
            for (slot, &src) in perm.iter().enumerate() {
                prop_assert_eq!(p.soft_values[slot], m.soft_values[src]);
                prop_assert_eq!(p.hard_keep[slot], m.hard_keep[src]);
            }
        }

        #[test]
        fn monotone_in_score(scores in distinct_scores(), a in 0.0f64..0.99) {
            for variant in [RankVariant::Hard, RankVariant::soft_for(scores.len())] {
                let m = soft_mask(&scores, a, scores.len() as f64, variant).unwrap();
                for i in 0..scores.len() {
                    for j in 0..scores.len() {
                        if scores[i] > scores[j] {
                            prop_assert!(m.soft_values[i] > m.soft_values[j]);
                        }
                    }
                }
            }
        }

        #[test]
        fn shift_invariance(scores in distinct_scores(), shift in -100.0f64..100.0, k in 1usize..24) {
            let n = scores.len();
            let k = k.min(n);
            let a = keep_count_to_ratio(k, n).unwrap();
            let shifted: Vec<f64> = scores.iter().map(|c| c + shift).collect();
            let m = soft_mask(&scores, a, n as f64, RankVariant::Hard).unwrap();
            let s = soft_mask(&shifted, a, n as f64, RankVariant::Hard).unwrap();
            prop_assert_eq!(&m.ranks, &s.ranks);
            prop_assert_eq!(&m.hard_keep, &s.hard_keep);
            prop_assert_eq!(m.kept(), k);
        }

        #[test]
        fn hard_keep_matches_rank_threshold(scores in distinct_scores(), a in 0.0f64..0.99, lambda in 0.5f64..5000.0) {
            let m = soft_mask(&scores, a, lambda, RankVariant::Hard).unwrap();
            for i in 0..scores.len() {
                if (m.ranks[i] - a).abs() * lambda > 1e-9 {
                    prop_assert_eq!(m.hard_keep[i], m.ranks[i] > a);
                }
            }
        }
    }
}
