//! Sliding-window extraction of labeled 8-bar patterns.
//!
//! A window becomes a pattern only when the bars after it move at least
//! `swing_points` away from the window's final close. The first bar to breach
//! a threshold decides the direction; the feature vector carries four
//! candle-shape differences for each of the eight window bars.

use std::fmt;
use std::str::FromStr;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market_data::{BarSeries, OhlcBar};

pub const WINDOW_BARS: usize = 8;
pub const FEATURES_PER_BAR: usize = 4;
pub const FEATURE_DIM: usize = WINDOW_BARS * FEATURES_PER_BAR;

pub type FeatureVector = [f64; FEATURE_DIM];

#[derive(Debug, Error, PartialEq)]
pub enum PatternError {
    #[error("series has {len} bars, need at least {needed}")]
    SeriesTooShort { len: usize, needed: usize },
    #[error("window has {0} bars, expected {WINDOW_BARS}")]
    WrongWindowLength(usize),
    #[error("invalid labeling config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Buy,
    Sell,
}

impl Label {
    pub fn opposite(self) -> Label {
        match self {
            Label::Buy => Label::Sell,
            Label::Sell => Label::Buy,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Buy => "Buy",
            Label::Sell => "Sell",
        })
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "Buy" | "buy" | "BUY" => Ok(Label::Buy),
            "Sell" | "sell" | "SELL" => Ok(Label::Sell),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

/// A labeled window. `features` is bar-major: entries `4j..4j+4` hold
/// `(H-L, C-O, H-O, O-L)` of window bar `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pattern {
    pub id: u64,
    pub origin: NaiveDateTime,
    #[serde(with = "feature_array")]
    pub features: FeatureVector,
    pub label: Label,
    pub pnl_raw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PnlMode {
    /// Largest favorable excursion over the horizon.
    #[default]
    Max,
    /// Mean of the running best excursion, from the breach bar to the horizon end.
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelingConfig {
    pub window_bars: usize,
    pub horizon_bars: usize,
    pub swing_points: f64,
    pub pnl_mode: PnlMode,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        LabelingConfig {
            window_bars: WINDOW_BARS,
            horizon_bars: 4,
            swing_points: 15.0,
            pnl_mode: PnlMode::Max,
        }
    }
}

impl LabelingConfig {
    pub fn validate(&self) -> Result<(), PatternError> {
        if self.window_bars != WINDOW_BARS {
            return Err(PatternError::InvalidConfig(format!(
                "window_bars must be {WINDOW_BARS} (feature layout is fixed at {FEATURE_DIM} values)"
            )));
        }
        if self.horizon_bars == 0 {
            return Err(PatternError::InvalidConfig("horizon_bars must be positive".into()));
        }
        if !(self.swing_points > 0.0 && self.swing_points.is_finite()) {
            return Err(PatternError::InvalidConfig("swing_points must be positive".into()));
        }
        Ok(())
    }
}

/// 32 shape features of an 8-bar window, in raw price points.
pub fn featurize(window: &[OhlcBar]) -> Result<FeatureVector, PatternError> {
    if window.len() != WINDOW_BARS {
        return Err(PatternError::WrongWindowLength(window.len()));
    }
    let mut out = [0.0; FEATURE_DIM];
    for (chunk, b) in out.chunks_exact_mut(FEATURES_PER_BAR).zip(window) {
        chunk[0] = b.high - b.low;
        chunk[1] = b.close - b.open;
        chunk[2] = b.high - b.open;
        chunk[3] = b.open - b.low;
    }
    Ok(out)
}

fn contiguous(series: &BarSeries, start: usize, len: usize) -> bool {
    (start..start + len - 1).all(|i| series.contiguous_at(i))
}

/// Direction and excursion for one horizon, or `None` when no pattern applies.
fn label_horizon(entry: f64, horizon: &[OhlcBar], cfg: &LabelingConfig) -> Option<(Label, f64)> {
    let up = entry + cfg.swing_points;
    let down = entry - cfg.swing_points;
    if horizon.iter().any(|b| b.high >= up && b.low <= down) {
        return None;
    }
    let (breach, label) = horizon.iter().enumerate().find_map(|(j, b)| {
        if b.high >= up {
            Some((j, Label::Buy))
        } else if b.low <= down {
            Some((j, Label::Sell))
        } else {
            None
        }
    })?;
    let excursion = |b: &OhlcBar| match label {
        Label::Buy => b.high - entry,
        Label::Sell => entry - b.low,
    };
    let pnl = match cfg.pnl_mode {
        PnlMode::Max => horizon.iter().map(excursion).fold(f64::NEG_INFINITY, f64::max),
        PnlMode::Mean => {
            let mut best = f64::NEG_INFINITY;
            let mut sum = 0.0;
            for b in &horizon[breach..] {
                best = best.max(excursion(b));
                sum += best;
            }
            sum / (horizon.len() - breach) as f64
        }
    };
    Some((label, pnl))
}

/// Emits every stride-1 window followed by a clean swing, ordered by origin.
///
/// Windows whose bars or horizon straddle a gap longer than one interval are
/// skipped, as are horizons containing a bar that breaches both thresholds.
pub fn extract_patterns(
    series: &BarSeries,
    cfg: &LabelingConfig,
) -> Result<Vec<Pattern>, PatternError> {
    cfg.validate()?;
    let span = cfg.window_bars + cfg.horizon_bars;
    if series.len() < span {
        return Err(PatternError::SeriesTooShort { len: series.len(), needed: span });
    }
    if series.interval != 30 {
        log::warn!("extracting patterns from {}-minute bars; the labeling horizon assumes 30", series.interval);
    }
    let mut out = Vec::new();
    for i in 0..=series.len() - span {
        if !contiguous(series, i, span) {
            continue;
        }
        let window = &series.bars[i..i + cfg.window_bars];
        let horizon = &series.bars[i + cfg.window_bars..i + span];
        let entry = window[cfg.window_bars - 1].close;
        if let Some((label, pnl_raw)) = label_horizon(entry, horizon, cfg) {
            out.push(Pattern {
                id: out.len() as u64,
                origin: window[0].timestamp,
                features: featurize(window)?,
                label,
                pnl_raw,
            });
        }
    }
    Ok(out)
}

pub(crate) mod feature_array {
    use super::{FeatureVector, FEATURE_DIM};
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &FeatureVector, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<FeatureVector, D::Error> {
        let v: Vec<f64> = Vec::deserialize(d)?;
        v.try_into().map_err(|v: Vec<f64>| {
            D::Error::custom(format!("expected {FEATURE_DIM} features, got {}", v.len()))
        })
    }
}
