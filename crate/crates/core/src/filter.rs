//! Greedy construction of cross-class separated Buy/Sell pattern sets.
//!
//! Patterns are visited in ranking order. A Buy is admitted iff it is at least
//! `theta` (L1) away from every Sell admitted so far, and symmetrically for
//! Sells. Same-label proximity never blocks admission, and rejected patterns
//! impose no constraint on later ones.

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::{l1, score_order, ScoredPattern, ScoringConfig};
use crate::pattern::{Label, Pattern};
use crate::stats::quantile_sorted;

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error("input is not in ranking order at position {position}")]
    UnsortedInput { position: usize },
    #[error("theta must be positive and finite, got {0}")]
    InvalidTheta(f64),
    #[error("cannot derive theta: {0}")]
    NoCrossPairs(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub theta: f64,
    pub scoring: ScoringConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub pattern: ScoredPattern,
    /// First admitted opposite-label pattern found within `theta`.
    pub blocked_by: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub raw_buys: usize,
    pub raw_sells: usize,
    pub kept_buys: usize,
    pub kept_sells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredLibrary {
    pub buys: Vec<ScoredPattern>,
    pub sells: Vec<ScoredPattern>,
    pub rejected: Vec<Rejection>,
    pub config: FilterConfig,
    pub provenance: Provenance,
    /// Earliest and latest origin among the raw patterns.
    pub training_span: Option<(NaiveDateTime, NaiveDateTime)>,
}

impl FilteredLibrary {
    pub fn is_empty(&self) -> bool {
        self.buys.is_empty() && self.sells.is_empty()
    }

    pub fn admitted(&self) -> impl Iterator<Item = &ScoredPattern> {
        self.buys.iter().chain(&self.sells)
    }

    pub fn side(&self, label: Label) -> &[ScoredPattern] {
        match label {
            Label::Buy => &self.buys,
            Label::Sell => &self.sells,
        }
    }
}

fn check_sorted(scored: &[ScoredPattern]) -> Result<(), FilterError> {
    match scored
        .windows(2)
        .position(|w| score_order(&w[0], &w[1]) != std::cmp::Ordering::Less)
    {
        Some(i) => Err(FilterError::UnsortedInput { position: i + 1 }),
        None => Ok(()),
    }
}

/// Runs the admission loop over `scored`, which must already be ranked.
pub fn filter(scored: &[ScoredPattern], cfg: &FilterConfig) -> Result<FilteredLibrary, FilterError> {
    if !(cfg.theta > 0.0 && cfg.theta.is_finite()) {
        return Err(FilterError::InvalidTheta(cfg.theta));
    }
    check_sorted(scored)?;

    let mut buys: Vec<ScoredPattern> = Vec::new();
    let mut sells: Vec<ScoredPattern> = Vec::new();
    let mut rejected = Vec::new();
    let mut prov = Provenance::default();

    for x in scored {
        let opposing = match x.pattern.label {
            Label::Buy => {
                prov.raw_buys += 1;
                &sells
            }
            Label::Sell => {
                prov.raw_sells += 1;
                &buys
            }
        };
        let blocker = opposing
            .iter()
            .find(|y| l1(&x.pattern.features, &y.pattern.features) < cfg.theta)
            .map(|y| y.pattern.id);
        match (blocker, x.pattern.label) {
            (Some(id), _) => rejected.push(Rejection { pattern: x.clone(), blocked_by: id }),
            (None, Label::Buy) => buys.push(x.clone()),
            (None, Label::Sell) => sells.push(x.clone()),
        }
    }
    prov.kept_buys = buys.len();
    prov.kept_sells = sells.len();

    let training_span = scored.iter().map(|s| s.pattern.origin).fold(None, |acc, t| match acc {
        None => Some((t, t)),
        Some((lo, hi)) => Some((if t < lo { t } else { lo }, if t > hi { t } else { hi })),
    });

    Ok(FilteredLibrary { buys, sells, rejected, config: *cfg, provenance: prov, training_span })
}

/// All Buy x Sell L1 distances, Buy-major.
pub fn cross_distances(patterns: &[&Pattern]) -> Vec<f64> {
    let (buys, sells): (Vec<&Pattern>, Vec<&Pattern>) =
        patterns.iter().partition(|p| p.label == Label::Buy);
    let mut out = Vec::with_capacity(buys.len() * sells.len());
    for b in &buys {
        for s in &sells {
            out.push(l1(&b.features, &s.features));
        }
    }
    out
}

/// Percentile (0-100, linear interpolation) of the raw cross-class distances.
pub fn default_theta(patterns: &[&Pattern], percentile: f64) -> Result<f64, FilterError> {
    let mut d = cross_distances(patterns);
    if d.is_empty() {
        return Err(FilterError::NoCrossPairs("need at least one Buy and one Sell"));
    }
    d.sort_by(f64::total_cmp);
    let theta = quantile_sorted(&d, percentile / 100.0);
    if !(theta > 0.0) {
        return Err(FilterError::InvalidTheta(theta));
    }
    Ok(theta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub theta: f64,
    /// `None` stands for +infinity (one side empty).
    pub min_cross_distance: Option<f64>,
    pub pairs_checked: usize,
    /// `(buy_id, sell_id, distance)` of the closest violating pair.
    pub offending: Option<(u64, u64, f64)>,
}

impl VerifyReport {
    pub fn min_distance_or_inf(&self) -> f64 {
        self.min_cross_distance.unwrap_or(f64::INFINITY)
    }
}

/// Exhaustively checks cross-class separation over all admitted pairs.
pub fn verify(library: &FilteredLibrary) -> VerifyReport {
    let theta = library.config.theta;
    let mut min: Option<(u64, u64, f64)> = None;
    for b in &library.buys {
        for s in &library.sells {
            let d = l1(&b.pattern.features, &s.pattern.features);
            if min.is_none_or(|(_, _, m)| d < m) {
                min = Some((b.pattern.id, s.pattern.id, d));
            }
        }
    }
    let passed = min.is_none_or(|(_, _, d)| d >= theta);
    VerifyReport {
        passed,
        theta,
        min_cross_distance: min.map(|m| m.2),
        pairs_checked: library.buys.len() * library.sells.len(),
        offending: if passed { None } else { min },
    }
}
