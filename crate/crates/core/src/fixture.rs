//! Synthetic data with planted ground truth.
//!
//! [`synthetic_bars`] builds a 30-minute price series on a Monday-Friday
//! calendar: a quiet random walk interrupted by planted 8-bar candle shapes,
//! each followed by a 20-point move in the next bar. Buy-shaped windows are
//! always followed by a rally, Sell-shaped ones by a drop, and the mixed shape
//! by either, at random. [`to_minute_bars`] expands the result into 1-minute
//! bars that aggregate back to it exactly.
//!
//! [`cluster_patterns`] and [`skew_fixture`] skip the price series entirely
//! and place labeled feature vectors around chosen centers.

use std::fmt::Write as _;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Weekday};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::market_data::{BarSeries, OhlcBar};
use crate::pattern::{FeatureVector, Label, Pattern, FEATURE_DIM, WINDOW_BARS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Buy,
    Sell,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedEvent {
    /// Index of the first window bar in the 30-minute series.
    pub origin_index: usize,
    pub origin: NaiveDateTime,
    pub kind: EventKind,
    pub direction: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarFixtureSpec {
    pub start: NaiveDate,
    /// Weekdays to generate.
    pub days: usize,
    pub seed: u64,
    pub base_price: f64,
    /// Bars between consecutive event origins.
    pub event_spacing: usize,
    /// Share of events using the mixed (contradictory) shape.
    pub mixed_share: f64,
    pub move_points: f64,
}

impl Default for BarFixtureSpec {
    fn default() -> Self {
        BarFixtureSpec {
            start: NaiveDate::from_ymd_opt(2023, 1, 2).expect("valid date"),
            days: 60,
            seed: 7,
            base_price: 1850.0,
            event_spacing: 16,
            mixed_share: 0.4,
            move_points: 20.0,
        }
    }
}

const BARS_PER_DAY: usize = 48;

/// `(body, upper wick, lower wick)` per window bar.
type Shape = [(f64, f64, f64); WINDOW_BARS];

const BUY_SHAPE: Shape = [
    (-1.5, 0.4, 1.2),
    (-2.0, 0.3, 1.6),
    (-2.5, 0.2, 2.2),
    (-1.0, 0.5, 2.8),
    (0.8, 0.6, 1.5),
    (1.6, 0.4, 0.8),
    (2.2, 0.3, 0.5),
    (2.8, 0.2, 0.4),
];

const SELL_SHAPE: Shape = [
    (1.5, 1.2, 0.4),
    (2.0, 1.6, 0.3),
    (2.5, 2.2, 0.2),
    (1.0, 2.8, 0.5),
    (-0.8, 1.5, 0.6),
    (-1.6, 0.8, 0.4),
    (-2.2, 0.5, 0.3),
    (-2.8, 0.4, 0.2),
];

const MIXED_SHAPE: Shape = [
    (0.6, 1.8, 1.8),
    (-0.6, 1.8, 1.8),
    (0.6, 1.8, 1.8),
    (-0.6, 1.8, 1.8),
    (0.6, 1.8, 1.8),
    (-0.6, 1.8, 1.8),
    (0.6, 1.8, 1.8),
    (-0.6, 1.8, 1.8),
];

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn make_bar(ts: NaiveDateTime, open: f64, body: f64, up: f64, down: f64) -> OhlcBar {
    let open = round2(open);
    let close = round2(open + body);
    OhlcBar {
        timestamp: ts,
        open,
        high: round2(open.max(close) + up.max(0.0)),
        low: round2(open.min(close) - down.max(0.0)),
        close,
    }
}

fn weekday_timestamps(start: NaiveDate, days: usize) -> Vec<NaiveDateTime> {
    let mut out = Vec::with_capacity(days * BARS_PER_DAY);
    let mut date = start;
    let mut made = 0;
    while made < days {
        if !matches!(date.weekday(), Weekday::Sat | Weekday::Sun) {
            let midnight = date.and_hms_opt(0, 0, 0).expect("midnight exists");
            out.extend((0..BARS_PER_DAY).map(|i| midnight + Duration::minutes(30 * i as i64)));
            made += 1;
        }
        date = date.succ_opt().expect("date in range");
    }
    out
}

/// A 30-minute series with planted events, plus the events themselves.
pub fn synthetic_bars(spec: &BarFixtureSpec) -> (BarSeries, Vec<PlantedEvent>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let walk = Normal::new(0.0, 0.5).expect("valid sigma");
    let shape_noise = Normal::new(0.0, 0.35).expect("valid sigma");
    let times = weekday_timestamps(spec.start, spec.days);

    let mut bars = Vec::with_capacity(times.len());
    let mut events = Vec::new();
    let mut price = spec.base_price;
    let mut i = 0;
    while i < times.len() {
        let day_pos = i % BARS_PER_DAY;
        let fits = day_pos + WINDOW_BARS + 2 <= BARS_PER_DAY;
        let slot = day_pos % spec.event_spacing == 4;
        if fits && slot {
            let r: f64 = rng.random();
            let kind = if r < spec.mixed_share {
                EventKind::Mixed
            } else if r < spec.mixed_share + (1.0 - spec.mixed_share) / 2.0 {
                EventKind::Buy
            } else {
                EventKind::Sell
            };
            let shape = match kind {
                EventKind::Buy => &BUY_SHAPE,
                EventKind::Sell => &SELL_SHAPE,
                EventKind::Mixed => &MIXED_SHAPE,
            };
            for (j, &(body, up, down)) in shape.iter().enumerate() {
                let b = make_bar(
                    times[i + j],
                    price,
                    body + shape_noise.sample(&mut rng),
                    up * (1.0 + 0.2 * shape_noise.sample(&mut rng)),
                    down * (1.0 + 0.2 * shape_noise.sample(&mut rng)),
                );
                price = b.close;
                bars.push(b);
            }
            let direction = match kind {
                EventKind::Buy => Label::Buy,
                EventKind::Sell => Label::Sell,
                EventKind::Mixed if rng.random::<bool>() => Label::Buy,
                EventKind::Mixed => Label::Sell,
            };
            let signed = match direction {
                Label::Buy => spec.move_points,
                Label::Sell => -spec.move_points,
            };
            // closes 1 point short of the full move, the wick reaches it
            let body = signed - signed.signum();
            let b = make_bar(times[i + WINDOW_BARS], price, body, 1.0, 1.0);
            let b = match direction {
                Label::Buy => OhlcBar { low: round2(price - 0.3), ..b },
                Label::Sell => OhlcBar { high: round2(price + 0.3), ..b },
            };
            price = b.close;
            bars.push(b);
            events.push(PlantedEvent { origin_index: i, origin: times[i], kind, direction });
            i += WINDOW_BARS + 1;
        } else {
            let body = walk.sample(&mut rng);
            let up = 0.15 + 0.3 * rng.random::<f64>();
            let down = 0.15 + 0.3 * rng.random::<f64>();
            let b = make_bar(times[i], price, body, up, down);
            price = b.close;
            bars.push(b);
            i += 1;
        }
    }
    (BarSeries::new("SYNTH", 30, bars), events)
}

/// Expands each bar into 1-minute bars whose aggregate is the original bar.
pub fn to_minute_bars(series: &BarSeries) -> BarSeries {
    let n = series.interval as usize;
    let mut out = Vec::with_capacity(series.len() * n);
    for b in &series.bars {
        // path visits the high and low at fixed minutes, bullish bars dip first
        let (first, second) = if b.close >= b.open { (b.low, b.high) } else { (b.high, b.low) };
        let knots = [(0usize, b.open), (n / 3, first), (2 * n / 3, second), (n, b.close)];
        let mut path = Vec::with_capacity(n + 1);
        for m in 0..=n {
            let seg = knots.windows(2).find(|w| m <= w[1].0).expect("m within span");
            let (m0, p0) = seg[0];
            let (m1, p1) = seg[1];
            let t = if m1 > m0 { (m - m0) as f64 / (m1 - m0) as f64 } else { 0.0 };
            path.push(round2(p0 + t * (p1 - p0)));
        }
        for m in 0..n {
            let (o, c) = (path[m], path[m + 1]);
            out.push(OhlcBar {
                timestamp: b.timestamp + Duration::minutes(m as i64),
                open: o,
                high: o.max(c),
                low: o.min(c),
                close: c,
            });
        }
    }
    BarSeries::new(series.symbol.clone(), 1, out)
}

/// Renders 1-minute bars in the histdata M1 layout.
pub fn to_histdata_text(series: &BarSeries) -> String {
    let mut s = String::with_capacity(series.len() * 48);
    for b in &series.bars {
        let _ = writeln!(
            s,
            "{};{:.2};{:.2};{:.2};{:.2};0",
            b.timestamp.format("%Y%m%d %H%M%S"),
            b.open,
            b.high,
            b.low,
            b.close
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    #[serde(with = "crate::pattern::feature_array")]
    pub center: FeatureVector,
    /// Per-dimension standard deviation.
    pub spread: f64,
    pub count: usize,
    pub buy_fraction: f64,
}

/// Gaussian clouds of labeled patterns; ids are assigned in generation order.
pub fn cluster_patterns(clusters: &[ClusterSpec], seed: u64) -> Vec<Pattern> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin0 = NaiveDate::from_ymd_opt(2020, 1, 6)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid origin");
    let mut out = Vec::new();
    for c in clusters {
        let noise = Normal::new(0.0, c.spread.max(0.0)).expect("finite spread");
        let n_buy = (c.buy_fraction * c.count as f64).round() as usize;
        let mut labels: Vec<Label> = (0..c.count).map(|i| if i < n_buy { Label::Buy } else { Label::Sell }).collect();
        labels.shuffle(&mut rng);
        for label in labels {
            let mut features = c.center;
            for f in features.iter_mut() {
                *f += noise.sample(&mut rng);
            }
            let id = out.len() as u64;
            out.push(Pattern {
                id,
                origin: origin0 + Duration::minutes(30 * id as i64),
                features,
                label,
                pnl_raw: 15.0 + 10.0 * rng.random::<f64>(),
            });
        }
    }
    out
}

fn random_center(rng: &mut ChaCha8Rng, offset: f64, scale: f64) -> FeatureVector {
    let mut c = [offset; FEATURE_DIM];
    for v in c.iter_mut() {
        *v += scale * (2.0 * rng.random::<f64>() - 1.0);
    }
    c
}

/// One dense region of six label-leaning clumps and one far, sparse pure
/// Sell region. Geometry-only clustering splits dense from sparse, which
/// yields lopsided Buy/Sell counts.
pub fn skew_fixture(seed: u64) -> Vec<Pattern> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut clusters: Vec<ClusterSpec> = (0..6)
        .map(|i| ClusterSpec {
            center: random_center(&mut rng, 0.0, 2.0),
            spread: 0.5,
            count: 100,
            buy_fraction: if i % 2 == 0 { 0.8 } else { 0.2 },
        })
        .collect();
    clusters.push(ClusterSpec { center: [12.0; FEATURE_DIM], spread: 2.0, count: 150, buy_fraction: 0.0 });
    cluster_patterns(&clusters, seed)
}

/// Two pure regions and one contradictory region of interleaved labels.
pub fn mixed_region_fixture(seed: u64) -> Vec<Pattern> {
    let clusters = [
        ClusterSpec { center: [0.0; FEATURE_DIM], spread: 0.8, count: 120, buy_fraction: 1.0 },
        ClusterSpec { center: [6.0; FEATURE_DIM], spread: 0.8, count: 120, buy_fraction: 0.0 },
        ClusterSpec { center: [3.0; FEATURE_DIM], spread: 0.8, count: 160, buy_fraction: 0.5 },
    ];
    cluster_patterns(&clusters, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::{aggregate, parse_histdata_csv};

    fn small() -> BarFixtureSpec {
        BarFixtureSpec { days: 6, ..Default::default() }
    }

    #[test]
    fn bars_are_valid_and_weekday_only() {
        let (s, events) = synthetic_bars(&small());
        assert_eq!(s.len(), 6 * BARS_PER_DAY);
        assert!(s.bars.iter().all(|b| b.check().is_ok()));
        assert!(s.bars.iter().all(|b| !matches!(b.timestamp.weekday(), Weekday::Sat | Weekday::Sun)));
        assert!(!events.is_empty());
    }

    #[test]
    fn minute_expansion_aggregates_back() {
        let (s, _) = synthetic_bars(&small());
        let text = to_histdata_text(&to_minute_bars(&s));
        let minutes = parse_histdata_csv(&text).unwrap();
        let back = aggregate(&minutes, 30, false).unwrap();
        assert_eq!(back.bars, s.bars);
    }

    #[test]
    fn deterministic_for_seed() {
        assert_eq!(synthetic_bars(&small()), synthetic_bars(&small()));
        let other = BarFixtureSpec { seed: 8, ..small() };
        assert_ne!(synthetic_bars(&small()).0, synthetic_bars(&other).0);
    }

    #[test]
    fn cluster_labels_follow_fraction() {
        let p = cluster_patterns(
            &[ClusterSpec { center: [0.0; FEATURE_DIM], spread: 1.0, count: 10, buy_fraction: 0.3 }],
            1,
        );
        assert_eq!(p.iter().filter(|p| p.label == Label::Buy).count(), 3);
        assert!(p.iter().all(|p| p.pnl_raw >= 15.0));
    }
}
