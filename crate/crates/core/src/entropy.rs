//! Label entropy, k-NN local purity and the combined pattern score.
//!
//! Each pattern is scored as `alpha * info_gain + (1 - alpha) * pnl_norm`, where
//! `info_gain = h_global - h_local`. `h_local` is the Shannon entropy (nats) of
//! labels among the pattern's k nearest L1 neighbors, `h_global` the entropy of
//! labels over the whole pool, and `pnl_norm` a global min-max rescale of the
//! raw excursion.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pattern::{Label, Pattern, FEATURE_DIM};

#[derive(Debug, Error, PartialEq)]
pub enum EntropyError {
    #[error("not a probability distribution (sum = {sum})")]
    NotADistribution { sum: f64 },
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("k = {k} must satisfy 1 <= k < {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("no patterns to score")]
    EmptyInput,
    #[error("alpha = {0} outside [0, 1]")]
    InvalidAlpha(f64),
    #[error("pattern index {0} out of range")]
    UnknownPattern(usize),
}

/// `-sum p ln p` in nats, with `0 ln 0 = 0`.
pub fn shannon_entropy(probabilities: &[f64]) -> Result<f64, EntropyError> {
    let sum: f64 = probabilities.iter().sum();
    if probabilities.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(EntropyError::NotADistribution { sum });
    }
    let s: f64 = probabilities.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum();
    // 0.0 - s, not -s: a pure distribution should give +0, never -0
    Ok(0.0 - s)
}

/// Entropy of the empirical distribution given by `counts`.
pub fn count_entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let probs: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    // counts always form a distribution up to rounding
    shannon_entropy(&probs).unwrap_or(0.0)
}

pub fn label_entropy<'a>(labels: impl IntoIterator<Item = &'a Label>) -> f64 {
    let mut counts = [0usize; 2];
    for l in labels {
        counts[*l as usize] += 1;
    }
    count_entropy(&counts)
}

/// Manhattan distance, accumulated in index order.
pub fn l1_distance(a: &[f64], b: &[f64]) -> Result<f64, EntropyError> {
    if a.len() != b.len() {
        return Err(EntropyError::DimensionMismatch(a.len(), b.len()));
    }
    Ok(l1(a, b))
}

#[inline]
pub(crate) fn l1(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += (x - y).abs();
    }
    acc
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub k: usize,
    pub alpha: f64,
    /// Divide information gain by `h_global` before blending.
    pub normalize_ig: bool,
    /// z-score each feature dimension before the neighbor search.
    pub standardize: bool,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig { k: 25, alpha: 0.8, normalize_ig: false, standardize: false }
    }
}

impl ScoringConfig {
    pub fn validate(&self, n: usize) -> Result<(), EntropyError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(EntropyError::InvalidAlpha(self.alpha));
        }
        if self.k == 0 || self.k >= n {
            return Err(EntropyError::KTooLarge { k: self.k, n });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPattern {
    pub pattern: Pattern,
    pub h_local: f64,
    pub info_gain: f64,
    pub pnl_norm: f64,
    pub score: f64,
}

/// The ranking order: score descending, then `h_local` ascending, then id.
pub fn score_order(a: &ScoredPattern, b: &ScoredPattern) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.h_local.total_cmp(&b.h_local))
        .then(a.pattern.id.cmp(&b.pattern.id))
}

/// Indices of the `k` nearest points to `points[query]` (itself excluded),
/// ordered by `(distance, id)`.
///
/// Uses a partial selection; `ids` breaks ties at equal distance.
pub fn nearest_neighbors(
    query: usize,
    points: &[&[f64]],
    ids: &[u64],
    k: usize,
) -> Result<Vec<usize>, EntropyError> {
    let n = points.len();
    if query >= n {
        return Err(EntropyError::UnknownPattern(query));
    }
    if k == 0 || k >= n {
        return Err(EntropyError::KTooLarge { k, n });
    }
    let q = points[query];
    let mut cand: Vec<(f64, u64, usize)> = points
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != query)
        .map(|(j, p)| (l1(q, p), ids[j], j))
        .collect();
    let cmp = |a: &(f64, u64, usize), b: &(f64, u64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, cmp);
        cand.truncate(k);
    }
    cand.sort_unstable_by(cmp);
    Ok(cand.into_iter().map(|(_, _, j)| j).collect())
}

/// Entropy of the labels among the `k` nearest neighbors of `all[index]`.
pub fn local_entropy(index: usize, all: &[Pattern], k: usize) -> Result<f64, EntropyError> {
    let points: Vec<&[f64]> = all.iter().map(|p| &p.features[..]).collect();
    let ids: Vec<u64> = all.iter().map(|p| p.id).collect();
    let nn = nearest_neighbors(index, &points, &ids, k)?;
    Ok(label_entropy(nn.iter().map(|&j| &all[j].label)))
}

/// Per-dimension z-scores; constant dimensions become zero.
pub fn standardize(patterns: &[Pattern]) -> Vec<[f64; FEATURE_DIM]> {
    let n = patterns.len() as f64;
    let mut mean = [0.0; FEATURE_DIM];
    for p in patterns {
        for (m, v) in mean.iter_mut().zip(&p.features) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut sd = [0.0; FEATURE_DIM];
    for p in patterns {
        for d in 0..FEATURE_DIM {
            sd[d] += (p.features[d] - mean[d]).powi(2);
        }
    }
    sd.iter_mut().for_each(|s| *s = (*s / n).sqrt());
    patterns
        .iter()
        .map(|p| {
            let mut z = [0.0; FEATURE_DIM];
            for d in 0..FEATURE_DIM {
                z[d] = if sd[d] > 0.0 { (p.features[d] - mean[d]) / sd[d] } else { 0.0 };
            }
            z
        })
        .collect()
}

fn local_entropies(
    points: &[&[f64]],
    ids: &[u64],
    labels: &[Label],
    k: usize,
) -> Result<Vec<f64>, EntropyError> {
    let one = |i: usize| -> Result<f64, EntropyError> {
        let nn = nearest_neighbors(i, points, ids, k)?;
        Ok(label_entropy(nn.iter().map(|&j| &labels[j])))
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..points.len()).into_par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..points.len()).map(one).collect()
    }
}

/// Scores every pattern and returns them in [`score_order`].
pub fn score_all(
    patterns: &[Pattern],
    cfg: &ScoringConfig,
) -> Result<Vec<ScoredPattern>, EntropyError> {
    if patterns.is_empty() {
        return Err(EntropyError::EmptyInput);
    }
    cfg.validate(patterns.len())?;

    let labels: Vec<Label> = patterns.iter().map(|p| p.label).collect();
    let ids: Vec<u64> = patterns.iter().map(|p| p.id).collect();
    let h_global = label_entropy(&labels);

    let z;
    let points: Vec<&[f64]> = if cfg.standardize {
        z = standardize(patterns);
        z.iter().map(|v| &v[..]).collect()
    } else {
        patterns.iter().map(|p| &p.features[..]).collect()
    };
    let h_local = local_entropies(&points, &ids, &labels, cfg.k)?;

    let (lo, hi) = patterns
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.pnl_raw), hi.max(p.pnl_raw)));

    let mut scored: Vec<ScoredPattern> = patterns
        .iter()
        .zip(h_local)
        .map(|(p, h)| {
            let mut info_gain = h_global - h;
            if cfg.normalize_ig {
                info_gain = if h_global > 0.0 { info_gain / h_global } else { 0.0 };
            }
            let pnl_norm = if hi > lo { (p.pnl_raw - lo) / (hi - lo) } else { 1.0 };
            ScoredPattern {
                pattern: p.clone(),
                h_local: h,
                info_gain,
                pnl_norm,
                score: cfg.alpha * info_gain + (1.0 - cfg.alpha) * pnl_norm,
            }
        })
        .collect();
    scored.sort_by(score_order);
    Ok(scored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn pat(id: u64, x: f64, label: Label, pnl: f64) -> Pattern {
        let mut features = [0.0; FEATURE_DIM];
        features[0] = x;
        Pattern {
            id,
            origin: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap(),
            features,
            label,
            pnl_raw: pnl,
        }
    }

    #[test]
    fn entropy_reference_values() {
        assert_eq!(shannon_entropy(&[1.0]).unwrap(), 0.0);
        assert!((shannon_entropy(&[0.5, 0.5]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        // -(0.8 ln 0.8 + 0.2 ln 0.2)
        assert!((shannon_entropy(&[0.8, 0.2]).unwrap() - 0.500_402_423_538_188_4).abs() < 1e-12);
        assert_eq!(shannon_entropy(&[0.0, 1.0]).unwrap(), 0.0);
        assert!(shannon_entropy(&[1.0]).unwrap().is_sign_positive());
    }

    #[test]
    fn entropy_rejects_non_distributions() {
        assert!(matches!(
            shannon_entropy(&[0.5, 0.6]),
            Err(EntropyError::NotADistribution { sum }) if (sum - 1.1).abs() < 1e-12
        ));
        assert!(shannon_entropy(&[1.5, -0.5]).is_err());
        assert!(shannon_entropy(&[]).is_err());
        assert!(shannon_entropy(&[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(l1_distance(&[0.0, 0.0], &[1.0, -1.0]).unwrap(), 2.0);
        assert_eq!(l1_distance(&[0.0], &[1.0, 2.0]), Err(EntropyError::DimensionMismatch(1, 2)));
    }

    #[test]
    fn local_entropy_neighborhoods() {
        // query at 0; four neighbors nearby, one far Sell
        let mk = |labels: [Label; 4]| {
            let mut v = vec![pat(0, 0.0, Label::Buy, 20.0)];
            for (i, l) in labels.iter().enumerate() {
                v.push(pat(i as u64 + 1, 1.0 + i as f64, *l, 20.0));
            }
            v.push(pat(9, 100.0, Label::Sell, 20.0));
            v
        };
        use Label::*;
        assert_eq!(local_entropy(0, &mk([Buy, Buy, Buy, Buy]), 4).unwrap(), 0.0);
        let h = local_entropy(0, &mk([Buy, Sell, Buy, Sell]), 4).unwrap();
        assert!((h - std::f64::consts::LN_2).abs() < 1e-15);
        let h = local_entropy(0, &mk([Buy, Sell, Buy, Buy]), 4).unwrap();
        // -(0.75 ln 0.75 + 0.25 ln 0.25)
        assert!((h - 0.562_335_144_618_808_6).abs() < 1e-12);
    }

    #[test]
    fn k_too_large() {
        let v = vec![pat(0, 0.0, Label::Buy, 1.0), pat(1, 1.0, Label::Sell, 1.0)];
        assert_eq!(local_entropy(0, &v, 2), Err(EntropyError::KTooLarge { k: 2, n: 2 }));
        assert_eq!(local_entropy(0, &v, 0), Err(EntropyError::KTooLarge { k: 0, n: 2 }));
    }

    #[test]
    fn ties_break_on_lower_id() {
        // ids 5 and 3 both at distance 1; k = 1 must pick id 3
        let v = [pat(0, 0.0, Label::Buy, 1.0), pat(5, 1.0, Label::Buy, 1.0), pat(3, -1.0, Label::Sell, 1.0)];
        let pts: Vec<&[f64]> = v.iter().map(|p| &p.features[..]).collect();
        let ids: Vec<u64> = v.iter().map(|p| p.id).collect();
        assert_eq!(nearest_neighbors(0, &pts, &ids, 1).unwrap(), vec![2]);
        assert_eq!(nearest_neighbors(0, &pts, &ids, 2).unwrap(), vec![2, 1]);
    }

    #[test]
    fn empty_input() {
        assert_eq!(score_all(&[], &ScoringConfig::default()), Err(EntropyError::EmptyInput));
    }

    #[test]
    fn pure_neighborhood_with_median_pnl() {
        use Label::*;
        // Two tight pure clusters far apart, balanced labels, pnl 10/15/20 per cluster.
        let v = vec![
            pat(0, 0.0, Buy, 10.0),
            pat(1, 0.1, Buy, 15.0),
            pat(2, 0.2, Buy, 20.0),
            pat(3, 100.0, Sell, 10.0),
            pat(4, 100.1, Sell, 15.0),
            pat(5, 100.2, Sell, 20.0),
        ];
        let cfg = ScoringConfig { k: 2, alpha: 0.8, ..Default::default() };
        let s = score_all(&v, &cfg).unwrap();
        let mid = s.iter().find(|s| s.pattern.id == 1).unwrap();
        assert_eq!(mid.h_local, 0.0);
        assert_eq!(mid.info_gain, std::f64::consts::LN_2);
        assert_eq!(mid.pnl_norm, 0.5);
        // 0.8 * ln 2 + 0.2 * 0.5
        assert!((mid.score - 0.654_517_744_447_956_2).abs() < 1e-12);
        assert_eq!(s[0].pattern.id, 2);
        assert_eq!(s[1].pattern.id, 5);
    }

    #[test]
    fn degenerate_pnl_maps_to_one() {
        let v = vec![pat(0, 0.0, Label::Buy, 7.0), pat(1, 1.0, Label::Sell, 7.0), pat(2, 2.0, Label::Buy, 7.0)];
        let s = score_all(&v, &ScoringConfig { k: 1, ..Default::default() }).unwrap();
        assert!(s.iter().all(|s| s.pnl_norm == 1.0));
    }

    #[test]
    fn alpha_extremes_rank_by_one_term() {
        use Label::*;
        let v: Vec<Pattern> = (0..12)
            .map(|i| {
                let label = if (i * 7) % 3 == 0 { Sell } else { Buy };
                pat(i, (i as f64 * 1.7) % 5.0, label, 15.0 + (i as f64 * 3.1) % 11.0)
            })
            .collect();
        let s = score_all(&v, &ScoringConfig { k: 3, alpha: 1.0, ..Default::default() }).unwrap();
        assert!(s.windows(2).all(|w| w[0].h_local <= w[1].h_local));
        let s = score_all(&v, &ScoringConfig { k: 3, alpha: 0.0, ..Default::default() }).unwrap();
        assert!(s.windows(2).all(|w| w[0].pattern.pnl_raw >= w[1].pattern.pnl_raw));
    }

    #[test]
    fn normalized_ig_divides_by_global() {
        use Label::*;
        let v = vec![pat(0, 0.0, Buy, 1.0), pat(1, 0.1, Buy, 2.0), pat(2, 9.0, Sell, 3.0), pat(3, 9.1, Sell, 4.0)];
        let s = score_all(&v, &ScoringConfig { k: 1, normalize_ig: true, ..Default::default() }).unwrap();
        assert!(s.iter().all(|s| (s.info_gain - 1.0).abs() < 1e-15));
    }

    #[test]
    fn standardize_constant_dims_are_zero() {
        let v = vec![pat(0, 1.0, Label::Buy, 1.0), pat(1, 3.0, Label::Sell, 1.0)];
        let z = standardize(&v);
        assert_eq!(z[0][0], -1.0);
        assert_eq!(z[1][0], 1.0);
        assert!(z.iter().all(|r| r[1..].iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn invalid_alpha() {
        let v = vec![pat(0, 0.0, Label::Buy, 1.0), pat(1, 1.0, Label::Sell, 1.0)];
        let cfg = ScoringConfig { k: 1, alpha: 1.5, ..Default::default() };
        assert_eq!(score_all(&v, &cfg), Err(EntropyError::InvalidAlpha(1.5)));
    }
}
