//! Fairness and retrieval metrics.
//!
//! Logarithms are natural throughout (KL divergence and MaxSkew are in nats).

use std::collections::BTreeMap;

use serde::Serialize;

use crate::augment::AttributeSpace;
use crate::error::{BendError, Result};
use crate::vector::{self, Embedding, NORM_EPS};

/// Base of every logarithm reported by this crate.
pub const LOG_BASE: &str = "e";

/// A probability distribution over the values of one attribute.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributeDistribution {
    values: Vec<String>,
    probs: Vec<f64>,
}

impl AttributeDistribution {
    /// Probabilities must lie in `[0, 1]` and sum to `1 +- 1e-9`.
    pub fn new(values: Vec<String>, probs: Vec<f64>) -> Result<Self> {
        if values.len() != probs.len() || values.is_empty() {
            return Err(BendError::InvalidDistribution(format!(
                "{} values but {} probabilities",
                values.len(),
                probs.len()
            )));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(BendError::InvalidDistribution(format!(
                "probability {p} outside [0, 1]"
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(BendError::InvalidDistribution(format!(
                "probabilities sum to {total}"
            )));
        }
        Ok(AttributeDistribution { values, probs })
    }

    /// Reads a `{value: probability}` map; keys must match `space` exactly.
    pub fn from_map(space: &AttributeSpace, map: &BTreeMap<String, f64>) -> Result<Self> {
        if let Some(k) = map.keys().find(|k| space.index_of(k).is_none()) {
            return Err(BendError::UnknownLabel {
                attribute: space.name().to_owned(),
                label: k.clone(),
            });
        }
        let probs = space
            .values()
            .iter()
            .map(|v| {
                map.get(v).copied().ok_or_else(|| {
                    BendError::InvalidDistribution(format!("no probability for value {v:?}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(space.values().to_vec(), probs)
    }

    /// Normalized counts.
    pub fn from_counts(values: Vec<String>, counts: &[usize]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(BendError::EmptyRetrieval);
        }
        let probs = counts.iter().map(|&c| c as f64 / total as f64).collect();
        Self::new(values, probs)
    }

    pub fn values(&self) -> &[String] {
        &self.values
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn get(&self, value: &str) -> Option<f64> {
        self.values
            .iter()
            .position(|v| v == value)
            .map(|i| self.probs[i])
    }

    pub fn to_map(&self) -> BTreeMap<String, f64> {
        self.values.iter().cloned().zip(self.probs.iter().copied()).collect()
    }

    fn check_against(&self, prior: &AttributeDistribution) -> Result<()> {
        if self.values != prior.values {
            return Err(BendError::InvalidDistribution(format!(
                "value sets differ: {:?} vs {:?}",
                self.values, prior.values
            )));
        }
        for (v, (&p, &q)) in self.values.iter().zip(self.probs.iter().zip(&prior.probs)) {
            if p > 0.0 && q == 0.0 {
                return Err(BendError::SupportViolation(v.clone()));
            }
        }
        Ok(())
    }
}

/// Largest gap between per-group mean cosine distances to `z`.
///
/// With two groups this is `|E d(z, m | a1) - E d(z, m | a2)|`; with more it
/// is the maximum over all pairs, i.e. `max - min` of the group means.
pub fn ccf_distance<G: AsRef<[f64]>>(z: &Embedding, groups: &[Vec<G>]) -> Result<f64> {
    let zn = z.norm();
    if zn <= NORM_EPS {
        return Err(BendError::ZeroVector {
            norm: zn,
            eps: NORM_EPS,
        });
    }
    if groups.len() < 2 {
        return Err(BendError::Config("CCF distance needs at least two groups".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (g, members) in groups.iter().enumerate() {
        if members.is_empty() {
            return Err(BendError::EmptyGroup(format!("group {g}")));
        }
        let mut total = 0.0;
        for m in members {
            let m = m.as_ref();
            vector::check_dim(z.dim(), m.len())?;
            let mn = vector::norm(m);
            if mn <= NORM_EPS {
                return Err(BendError::ZeroVector {
                    norm: mn,
                    eps: NORM_EPS,
                });
            }
            total += 1.0 - vector::dot(z.as_slice(), m) / (zn * mn);
        }
        let mean = total / members.len() as f64;
        lo = lo.min(mean);
        hi = hi.max(mean);
    }
    Ok(hi - lo)
}

/// `KL(retrieved || prior)` in nats, with `0 ln 0 = 0`.
pub fn kl_divergence(retrieved: &AttributeDistribution, prior: &AttributeDistribution) -> Result<f64> {
    retrieved.check_against(prior)?;
    Ok(retrieved
        .probs
        .iter()
        .zip(&prior.probs)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (p / q).ln())
        .sum())
}

/// `max_a ln(retrieved(a) / prior(a))` over values that were retrieved at all.
pub fn max_skew(retrieved: &AttributeDistribution, prior: &AttributeDistribution) -> Result<f64> {
    retrieved.check_against(prior)?;
    retrieved
        .probs
        .iter()
        .zip(&prior.probs)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| (p / q).ln())
        .reduce(f64::max)
        .ok_or(BendError::EmptyRetrieval)
}

/// ROC AUC from the Mann-Whitney rank-sum statistic with average ranks for
/// ties, so a tied positive/negative pair counts one half.
pub fn roc_auc(scored: &[(f64, bool)]) -> Option<f64> {
    let n_pos = scored.iter().filter(|s| s.1).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].0.total_cmp(&scored[b].0));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scored[order[j + 1]].0 == scored[order[i]].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        let pos_in_run = order[i..=j].iter().filter(|&&k| scored[k].1).count();
        pos_rank_sum += avg * pos_in_run as f64;
        i = j + 1;
    }
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Minimum per-group AUC; every group needs both labels.
pub fn worst_group_auc<S: AsRef<str>>(groups: &[(S, Vec<(f64, bool)>)]) -> Result<f64> {
    if groups.is_empty() {
        return Err(BendError::EmptySet("no groups for AUC"));
    }
    groups
        .iter()
        .map(|(name, scored)| {
            roc_auc(scored).ok_or_else(|| BendError::DegenerateGroup(name.as_ref().to_owned()))
        })
        .try_fold(f64::INFINITY, |acc, auc| auc.map(|a| acc.min(a)))
}

/// Fraction of retrieved records carrying each value. `labels` are value
/// indices into `space`.
pub fn empirical_distribution(
    labels: impl IntoIterator<Item = usize>,
    space: &AttributeSpace,
) -> Result<AttributeDistribution> {
    let mut counts = vec![0usize; space.len()];
    for l in labels {
        *counts.get_mut(l).ok_or_else(|| BendError::UnknownLabel {
            attribute: space.name().to_owned(),
            label: format!("#{l}"),
        })? += 1;
    }
    AttributeDistribution::from_counts(space.values().to_vec(), &counts)
}

/// Mean and dispersion of one metric over folds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (n - 1); zero for a single fold.
    pub std_dev: f64,
    /// `std_dev / sqrt(n)`.
    pub std_err: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Option<Summary> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std_dev = if n > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Summary {
            mean,
            std_dev,
            std_err: std_dev / (n as f64).sqrt(),
            n,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(p: &[f64]) -> AttributeDistribution {
        let values = (0..p.len()).map(|i| format!("v{i}")).collect();
        AttributeDistribution::new(values, p.to_vec()).unwrap()
    }

    fn e(v: &[f64]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn ccf_examples() {
        let g = vec![vec![vec![1.0, 0.0, 0.0]], vec![vec![0.0, 1.0, 0.0]]];
        assert_eq!(ccf_distance(&e(&[0.0, 0.0, 1.0]), &g).unwrap(), 0.0);
        assert_eq!(ccf_distance(&e(&[1.0, 0.0, 0.0]), &g).unwrap(), 1.0);
        let empty: Vec<Vec<Vec<f64>>> = vec![vec![vec![1.0, 0.0]], vec![]];
        assert!(matches!(
            ccf_distance(&e(&[1.0, 0.0]), &empty),
            Err(BendError::EmptyGroup(_))
        ));
    }

    #[test]
    fn ccf_takes_widest_pair() {
        let g = vec![
            vec![vec![1.0, 0.0]],
            vec![vec![0.0, 1.0]],
            vec![vec![-1.0, 0.0]],
        ];
        assert_eq!(ccf_distance(&e(&[1.0, 0.0]), &g).unwrap(), 2.0);
    }

    #[test]
    fn kl_examples() {
        let half = dist(&[0.5, 0.5]);
        assert_eq!(kl_divergence(&half, &half).unwrap(), 0.0);
        let expected = 0.6 * 1.2f64.ln() + 0.4 * 0.8f64.ln();
        let kl = kl_divergence(&dist(&[0.6, 0.4]), &half).unwrap();
        assert!((kl - expected).abs() < 1e-15);
        assert!((kl - 0.020136).abs() < 1e-6);
        let kl = kl_divergence(&dist(&[1.0, 0.0]), &half).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn skew_examples() {
        let half = dist(&[0.5, 0.5]);
        assert_eq!(max_skew(&half, &half).unwrap(), 0.0);
        assert!((max_skew(&dist(&[0.6, 0.4]), &half).unwrap() - 1.2f64.ln()).abs() < 1e-15);
        assert!((max_skew(&dist(&[1.0, 0.0]), &half).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn support_violation() {
        let prior = dist(&[1.0, 0.0]);
        let r = dist(&[0.5, 0.5]);
        assert!(matches!(kl_divergence(&r, &prior), Err(BendError::SupportViolation(v)) if v == "v1"));
        assert!(matches!(max_skew(&r, &prior), Err(BendError::SupportViolation(_))));
    }

    #[test]
    fn distribution_validation() {
        assert!(AttributeDistribution::new(vec!["a".into(), "b".into()], vec![0.5, 0.6]).is_err());
        assert!(AttributeDistribution::new(vec!["a".into()], vec![0.5, 0.5]).is_err());
        let g = AttributeSpace::gender();
        let m: BTreeMap<String, f64> = [("male".into(), 0.4), ("female".into(), 0.6)].into();
        assert_eq!(AttributeDistribution::from_map(&g, &m).unwrap().probs(), &[0.4, 0.6]);
        let bad: BTreeMap<String, f64> = [("male".into(), 0.4), ("other".into(), 0.6)].into();
        assert!(AttributeDistribution::from_map(&g, &bad).is_err());
    }

    #[test]
    fn auc_examples() {
        let one = vec![(0.9, true), (0.8, true), (0.7, false), (0.1, false)];
        assert_eq!(worst_group_auc(&[("g", one.clone())]).unwrap(), 1.0);
        assert_eq!(worst_group_auc(&[("g", vec![(0.5, true), (0.5, false)])]).unwrap(), 0.5);
        let second = vec![(0.8, true), (0.8, false), (0.1, false)];
        assert_eq!(roc_auc(&second), Some(0.75));
        assert_eq!(worst_group_auc(&[("a", one), ("b", second)]).unwrap(), 0.75);
        assert!(matches!(
            worst_group_auc(&[("only-pos", vec![(0.5, true)])]),
            Err(BendError::DegenerateGroup(g)) if g == "only-pos"
        ));
    }

    #[test]
    fn empirical_examples() {
        let g = AttributeSpace::gender();
        let labels = std::iter::repeat_n(0, 300).chain(std::iter::repeat_n(1, 200));
        assert_eq!(empirical_distribution(labels, &g).unwrap().probs(), &[0.6, 0.4]);
        assert_eq!(empirical_distribution([0, 0], &g).unwrap().probs(), &[1.0, 0.0]);
        let three = AttributeSpace::with_defaults("x", ["a", "b", "c"]).unwrap();
        let labels = [0, 0, 1, 1, 1, 2, 2, 2, 2, 2];
        assert_eq!(empirical_distribution(labels, &three).unwrap().probs(), &[0.2, 0.3, 0.5]);
        assert!(matches!(
            empirical_distribution(std::iter::empty(), &g),
            Err(BendError::EmptyRetrieval)
        ));
    }

    #[test]
    fn summary_stats() {
        let s = Summary::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std_dev, 1.0);
        assert!((s.std_err - 1.0 / 3f64.sqrt()).abs() < 1e-15);
        assert_eq!(Summary::of(&[4.0]).unwrap().std_dev, 0.0);
        assert!(Summary::of(&[]).is_none());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn simplex(k: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(0.01f64..1.0, k).prop_map(|w| {
                let s: f64 = w.iter().sum();
                w.into_iter().map(|x| x / s).collect()
            })
        }

        fn fix(p: Vec<f64>) -> AttributeDistribution {
            // re-close the sum after division rounding
            let mut p = p;
            let last = p.len() - 1;
            p[last] = 1.0 - p[..last].iter().sum::<f64>();
            dist(&p)
        }

        /// Pairwise count: positives beating negatives, ties worth a half.
        fn brute_auc(s: &[(f64, bool)]) -> Option<f64> {
            let pos: Vec<f64> = s.iter().filter(|x| x.1).map(|x| x.0).collect();
            let neg: Vec<f64> = s.iter().filter(|x| !x.1).map(|x| x.0).collect();
            if pos.is_empty() || neg.is_empty() {
                return None;
            }
            let mut wins = 0.0;
            for p in &pos {
                for n in &neg {
                    if p > n {
                        wins += 1.0;
                    } else if p == n {
                        wins += 0.5;
                    }
                }
            }
            Some(wins / (pos.len() * neg.len()) as f64)
        }

        proptest! {
            #[test]
            fn kl_and_skew_signs(
                (p, q) in (2usize..6).prop_flat_map(|k| (simplex(k), simplex(k)))
            ) {
                let (p, q) = (fix(p), fix(q));
                prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-12);
                prop_assert!(kl_divergence(&p, &p).unwrap().abs() <= 1e-12);
                if p != q {
                    prop_assert!(max_skew(&p, &q).unwrap() >= 0.0);
                }
            }

            #[test]
            fn auc_matches_pair_counting(
                s in prop::collection::vec(((0u8..12).prop_map(|x| f64::from(x) / 10.0), any::<bool>()), 1..50)
            ) {
                prop_assert_eq!(roc_auc(&s), brute_auc(&s));
            }
        }
    }
}
