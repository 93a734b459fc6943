//! Target/stop replay of library matches over held-out bars.
//!
//! At bar `i` the eight completed bars `[i-8, i)` are matched against the
//! library; a signal enters at bar `i`'s open. Exits are checked on every bar
//! from the entry bar on. When one bar reaches both the target and the stop,
//! the stop is assumed to have filled first unless `optimistic_fills` is set.

use chrono::{Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropy::l1;
use crate::filter::FilteredLibrary;
use crate::market_data::BarSeries;
use crate::pattern::{featurize, Label, WINDOW_BARS};

#[derive(Debug, Error, PartialEq)]
pub enum BacktestError {
    #[error("library is empty")]
    EmptyLibrary,
    #[error("test data {test_start}..{test_end} overlaps the library training span {train_start}..{train_end}")]
    LibraryTrainOverlap {
        train_start: NaiveDateTime,
        train_end: NaiveDateTime,
        test_start: NaiveDateTime,
        test_end: NaiveDateTime,
    },
    #[error("invalid backtest config: {0}")]
    InvalidConfig(String),
    #[error("parameter grid is empty")]
    EmptyGrid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Target,
    Stop,
    EndOfData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeRecord {
    pub entry_time: NaiveDateTime,
    pub direction: Label,
    pub entry_price: f64,
    /// Close time of the exit bar.
    pub exit_time: NaiveDateTime,
    pub exit_price: f64,
    pub outcome: Outcome,
    /// Signed points, net of `cost_per_trade`.
    pub pnl: f64,
    pub matched_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BacktestConfig {
    pub target: f64,
    pub stop: f64,
    pub match_theta: f64,
    pub one_open_trade: bool,
    pub initial_capital: f64,
    pub point_value: f64,
    pub optimistic_fills: bool,
    pub cost_per_trade: f64,
    /// Run even when the test span overlaps the training span.
    pub allow_train_overlap: bool,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        BacktestConfig {
            target: 15.0,
            stop: 15.0,
            match_theta: 1.0,
            one_open_trade: true,
            initial_capital: 10_000.0,
            point_value: 1.0,
            optimistic_fills: false,
            cost_per_trade: 0.0,
            allow_train_overlap: false,
        }
    }
}

impl BacktestConfig {
    pub fn validate(&self) -> Result<(), BacktestError> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.target) || !positive(self.stop) || !positive(self.match_theta) {
            return Err(BacktestError::InvalidConfig("target, stop and match_theta must be positive".into()));
        }
        if !self.initial_capital.is_finite() || !self.point_value.is_finite() || !self.cost_per_trade.is_finite() {
            return Err(BacktestError::InvalidConfig("capital, point value and cost must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    pub direction: Label,
    pub matched_id: u64,
    pub distance: f64,
}

/// Nearest library pattern by L1 (ties to the lower id), if closer than `match_theta`.
pub fn match_window(
    window_features: &[f64],
    library: &FilteredLibrary,
    match_theta: f64,
) -> Result<Option<Signal>, BacktestError> {
    if library.is_empty() {
        return Err(BacktestError::EmptyLibrary);
    }
    let best = library
        .admitted()
        .map(|s| (l1(window_features, &s.pattern.features), s.pattern.id, s.pattern.label))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
        .expect("library is non-empty");
    Ok((best.0 < match_theta).then_some(Signal { direction: best.2, matched_id: best.1, distance: best.0 }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquitySummary {
    pub total_return: f64,
    pub trade_count: usize,
    pub hit_rate: f64,
    pub max_drawdown: f64,
    pub final_equity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquityCurve {
    pub points: Vec<(NaiveDateTime, f64)>,
    pub summary: EquitySummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestResult {
    pub equity: EquityCurve,
    pub trades: Vec<TradeRecord>,
}

struct OpenTrade {
    entry_idx: usize,
    direction: Label,
    entry_price: f64,
    matched_id: u64,
}

fn check_overlap(series: &BarSeries, library: &FilteredLibrary, cfg: &BacktestConfig) -> Result<(), BacktestError> {
    let (Some((train_start, train_end)), Some(test_start), Some(test_end)) =
        (library.training_span, series.first_timestamp(), series.last_timestamp())
    else {
        return Ok(());
    };
    if test_start <= train_end && test_end >= train_start {
        let err = BacktestError::LibraryTrainOverlap { train_start, train_end, test_start, test_end };
        if cfg.allow_train_overlap {
            log::warn!("{err}; continuing because overlap is allowed");
        } else {
            return Err(err);
        }
    }
    Ok(())
}

/// Exit of `t` on bar `i`, if any: `(price, outcome)`.
fn exit_on_bar(t: &OpenTrade, series: &BarSeries, i: usize, cfg: &BacktestConfig) -> Option<(f64, Outcome)> {
    let b = &series.bars[i];
    let (tp, sl, hit_tp, hit_sl) = match t.direction {
        Label::Buy => {
            let (tp, sl) = (t.entry_price + cfg.target, t.entry_price - cfg.stop);
            (tp, sl, b.high >= tp, b.low <= sl)
        }
        Label::Sell => {
            let (tp, sl) = (t.entry_price - cfg.target, t.entry_price + cfg.stop);
            (tp, sl, b.low <= tp, b.high >= sl)
        }
    };
    match (hit_tp, hit_sl) {
        (true, true) if cfg.optimistic_fills => Some((tp, Outcome::Target)),
        (_, true) => Some((sl, Outcome::Stop)),
        (true, false) => Some((tp, Outcome::Target)),
        (false, false) => None,
    }
}

fn gross_pnl(direction: Label, outcome: Outcome, entry: f64, exit: f64, cfg: &BacktestConfig) -> f64 {
    match outcome {
        Outcome::Target => cfg.target,
        Outcome::Stop => -cfg.stop,
        Outcome::EndOfData => match direction {
            Label::Buy => exit - entry,
            Label::Sell => entry - exit,
        },
    }
}

/// Replays `series`, trading every library match.
pub fn run_backtest(
    series: &BarSeries,
    library: &FilteredLibrary,
    cfg: &BacktestConfig,
) -> Result<BacktestResult, BacktestError> {
    cfg.validate()?;
    check_overlap(series, library, cfg)?;
    let bar_len = Duration::minutes(i64::from(series.interval));
    let close_time = |i: usize| series.bars[i].timestamp + bar_len;

    let mut open: Vec<OpenTrade> = Vec::new();
    let mut trades: Vec<TradeRecord> = Vec::new();
    let close = |t: OpenTrade, i: usize, price: f64, outcome: Outcome, trades: &mut Vec<TradeRecord>| {
        let pnl = gross_pnl(t.direction, outcome, t.entry_price, price, cfg) - cfg.cost_per_trade;
        trades.push(TradeRecord {
            entry_time: series.bars[t.entry_idx].timestamp,
            direction: t.direction,
            entry_price: t.entry_price,
            exit_time: close_time(i),
            exit_price: price,
            outcome,
            pnl,
            matched_id: t.matched_id,
        });
    };

    if !library.is_empty() {
        for i in WINDOW_BARS..series.len() {
            if open.is_empty() || !cfg.one_open_trade {
                let features = featurize(&series.bars[i - WINDOW_BARS..i]).expect("window has 8 bars");
                if let Some(sig) = match_window(&features, library, cfg.match_theta)? {
                    open.push(OpenTrade {
                        entry_idx: i,
                        direction: sig.direction,
                        entry_price: series.bars[i].open,
                        matched_id: sig.matched_id,
                    });
                }
            }
            let mut still_open = Vec::with_capacity(open.len());
            for t in open.drain(..) {
                match exit_on_bar(&t, series, i, cfg) {
                    Some((price, outcome)) => close(t, i, price, outcome, &mut trades),
                    None => still_open.push(t),
                }
            }
            open = still_open;
        }
        if let Some(last) = series.len().checked_sub(1) {
            let price = series.bars[last].close;
            for t in open.drain(..) {
                close(t, last, price, Outcome::EndOfData, &mut trades);
            }
        }
    }

    let start = series.first_timestamp().unwrap_or_default();
    let equity = equity_curve(start, &trades, cfg);
    Ok(BacktestResult { equity, trades })
}

/// Capital path: one step per closed trade, in closing order.
pub fn equity_curve(start: NaiveDateTime, trades: &[TradeRecord], cfg: &BacktestConfig) -> EquityCurve {
    let mut capital = cfg.initial_capital;
    let mut peak = capital;
    let mut max_dd: f64 = 0.0;
    let mut points = vec![(start, capital)];
    for t in trades {
        capital += t.pnl * cfg.point_value;
        points.push((t.exit_time, capital));
        peak = peak.max(capital);
        if peak > 0.0 {
            max_dd = max_dd.max((peak - capital) / peak);
        }
    }
    let wins = trades.iter().filter(|t| t.pnl > 0.0).count();
    EquityCurve {
        points,
        summary: EquitySummary {
            total_return: if cfg.initial_capital != 0.0 {
                (capital - cfg.initial_capital) / cfg.initial_capital
            } else {
                0.0
            },
            trade_count: trades.len(),
            hit_rate: if trades.is_empty() { 0.0 } else { wins as f64 / trades.len() as f64 },
            max_drawdown: max_dd,
            final_equity: capital,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub target: f64,
    pub stop: f64,
    pub summary: EquitySummary,
}

/// Runs one backtest per `(target, stop)` pair, target-major.
pub fn parameter_sweep(
    series: &BarSeries,
    library: &FilteredLibrary,
    base: &BacktestConfig,
    targets: &[f64],
    stops: &[f64],
) -> Result<Vec<(SweepCell, BacktestResult)>, BacktestError> {
    if targets.is_empty() || stops.is_empty() {
        return Err(BacktestError::EmptyGrid);
    }
    let grid: Vec<(f64, f64)> = targets.iter().flat_map(|&t| stops.iter().map(move |&s| (t, s))).collect();
    let run = |&(target, stop): &(f64, f64)| {
        let cfg = BacktestConfig { target, stop, ..*base };
        run_backtest(series, library, &cfg).map(|r| (SweepCell { target, stop, summary: r.equity.summary }, r))
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        grid.par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        grid.iter().map(run).collect()
    }
}
