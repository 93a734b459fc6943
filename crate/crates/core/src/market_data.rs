//! Minute-level OHLC ingestion and clock-aligned bar aggregation.
//!
//! Input is the histdata.com "Generic ASCII M1" layout:
//! `YYYYMMDD HHMMSS;open;high;low;close;volume`. Timestamps are kept as naive
//! exchange-local times; nothing here knows about time zones.

use std::io::{BufRead, Write};

use chrono::{NaiveDateTime, Timelike};
use thiserror::Error;

const HISTDATA_TS: &str = "%Y%m%d %H%M%S";
pub(crate) const ISO_TS: &str = "%Y-%m-%dT%H:%M:%S";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("malformed line {line}: {content:?}")]
    MalformedLine { line: usize, content: String },
    #[error("timestamp on line {line} does not increase ({timestamp})")]
    NonMonotonicTimestamp { line: usize, timestamp: NaiveDateTime },
    #[error("invalid bar on line {line}: {reason}")]
    InvalidBar { line: usize, reason: String },
    #[error("target interval {target} min is not a positive multiple of source interval {source_interval} min")]
    IntervalMismatch { source_interval: u32, target: u32 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// One aggregated price bar, stamped at the bar open.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OhlcBar {
    pub timestamp: NaiveDateTime,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
}

impl OhlcBar {
    /// Builds a bar, rejecting non-finite prices and violated OHLC ordering.
    pub fn new(
        timestamp: NaiveDateTime,
        open: f64,
        high: f64,
        low: f64,
        close: f64,
    ) -> Result<Self, String> {
        let bar = OhlcBar { timestamp, open, high, low, close };
        bar.check()?;
        Ok(bar)
    }

    pub fn check(&self) -> Result<(), String> {
        let OhlcBar { open, high, low, close, .. } = *self;
        if ![open, high, low, close].iter().all(|v| v.is_finite()) {
            return Err("non-finite price".into());
        }
        if low > high {
            return Err(format!("low {low} > high {high}"));
        }
        if open < low || open > high {
            return Err(format!("open {open} outside [{low}, {high}]"));
        }
        if close < low || close > high {
            return Err(format!("close {close} outside [{low}, {high}]"));
        }
        Ok(())
    }
}

/// Ordered bars of a single instrument at a fixed interval (minutes).
#[derive(Debug, Clone, PartialEq)]
pub struct BarSeries {
    pub symbol: String,
    pub interval: u32,
    pub bars: Vec<OhlcBar>,
}

impl BarSeries {
    pub fn new(symbol: impl Into<String>, interval: u32, bars: Vec<OhlcBar>) -> Self {
        BarSeries { symbol: symbol.into(), interval, bars }
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    pub fn first_timestamp(&self) -> Option<NaiveDateTime> {
        self.bars.first().map(|b| b.timestamp)
    }

    pub fn last_timestamp(&self) -> Option<NaiveDateTime> {
        self.bars.last().map(|b| b.timestamp)
    }

    /// True when `bars[i + 1]` starts exactly one interval after `bars[i]`.
    pub fn contiguous_at(&self, i: usize) -> bool {
        let step = self.bars[i + 1].timestamp - self.bars[i].timestamp;
        step.num_minutes() == i64::from(self.interval) && step.num_seconds() % 60 == 0
    }

    /// Concatenates series of the same symbol and interval, keeping strict ordering.
    pub fn concat(parts: Vec<BarSeries>) -> Result<BarSeries, DataError> {
        let mut iter = parts.into_iter();
        let Some(mut out) = iter.next() else {
            return Ok(BarSeries::new("", 1, Vec::new()));
        };
        for part in iter {
            if part.interval != out.interval {
                return Err(DataError::IntervalMismatch {
                    source_interval: out.interval,
                    target: part.interval,
                });
            }
            if let (Some(last), Some(first)) = (out.last_timestamp(), part.first_timestamp()) {
                if first <= last {
                    return Err(DataError::NonMonotonicTimestamp { line: 1, timestamp: first });
                }
            }
            out.bars.extend(part.bars);
        }
        Ok(out)
    }
}

fn malformed(line: usize, content: &str) -> DataError {
    DataError::MalformedLine { line, content: content.to_string() }
}

/// Parses histdata M1 text into a 1-minute series. The volume column is read
/// for validation and dropped.
pub fn parse_histdata_csv(raw: &str) -> Result<BarSeries, DataError> {
    let mut bars: Vec<OhlcBar> = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        let lineno = idx + 1;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let fields: Vec<&str> = text.split(';').collect();
        if fields.len() != 6 {
            return Err(malformed(lineno, line));
        }
        let timestamp = NaiveDateTime::parse_from_str(fields[0].trim(), HISTDATA_TS)
            .map_err(|_| malformed(lineno, line))?;
        if timestamp.second() != 0 {
            return Err(malformed(lineno, line));
        }
        let mut prices = [0.0f64; 5];
        for (slot, field) in prices.iter_mut().zip(&fields[1..]) {
            *slot = field.trim().parse::<f64>().map_err(|_| malformed(lineno, line))?;
        }
        let bar = OhlcBar::new(timestamp, prices[0], prices[1], prices[2], prices[3])
            .map_err(|reason| DataError::InvalidBar { line: lineno, reason })?;
        if let Some(prev) = bars.last() {
            if bar.timestamp <= prev.timestamp {
                return Err(DataError::NonMonotonicTimestamp { line: lineno, timestamp });
            }
        }
        bars.push(bar);
    }
    Ok(BarSeries::new("", 1, bars))
}

fn bucket_start(ts: NaiveDateTime, interval: u32) -> i64 {
    let minutes = ts.and_utc().timestamp().div_euclid(60);
    minutes.div_euclid(i64::from(interval)) * i64::from(interval)
}

fn minutes_to_ts(minutes: i64) -> NaiveDateTime {
    chrono::DateTime::from_timestamp(minutes * 60, 0)
        .expect("bucket start within chrono range")
        .naive_utc()
}

/// Merges bars into clock-aligned buckets of `target_interval` minutes.
///
/// Buckets without source bars are omitted. When `drop_partial` is set, a
/// trailing bucket whose source bars stop before the bucket end is discarded.
pub fn aggregate(
    series: &BarSeries,
    target_interval: u32,
    drop_partial: bool,
) -> Result<BarSeries, DataError> {
    if target_interval == 0 || series.interval == 0 || !target_interval.is_multiple_of(series.interval) {
        return Err(DataError::IntervalMismatch {
            source_interval: series.interval,
            target: target_interval,
        });
    }
    let mut out: Vec<OhlcBar> = Vec::new();
    let mut current: Option<(i64, OhlcBar)> = None;
    for bar in &series.bars {
        let start = bucket_start(bar.timestamp, target_interval);
        match current.as_mut() {
            Some((key, acc)) if *key == start => {
                acc.high = acc.high.max(bar.high);
                acc.low = acc.low.min(bar.low);
                acc.close = bar.close;
            }
            _ => {
                if let Some((_, done)) = current.take() {
                    out.push(done);
                }
                let opened = OhlcBar { timestamp: minutes_to_ts(start), ..*bar };
                current = Some((start, opened));
            }
        }
    }
    if let Some((start, last)) = current {
        let last_src = series.bars.last().expect("non-empty when a bucket exists");
        let covered_until = bucket_start(last_src.timestamp, 1) + i64::from(series.interval);
        let complete = covered_until >= start + i64::from(target_interval);
        if complete || !drop_partial {
            out.push(last);
        }
    }
    Ok(BarSeries::new(series.symbol.clone(), target_interval, out))
}

/// Writes `timestamp_iso8601,open,high,low,close` rows with a header.
pub fn write_bars_csv<W: Write>(series: &BarSeries, mut out: W) -> std::io::Result<()> {
    writeln!(out, "timestamp_iso8601,open,high,low,close")?;
    for b in &series.bars {
        writeln!(
            out,
            "{},{},{},{},{}",
            b.timestamp.format(ISO_TS),
            b.open,
            b.high,
            b.low,
            b.close
        )?;
    }
    Ok(())
}

/// Reads the bar CSV written by [`write_bars_csv`].
pub fn read_bars_csv<R: BufRead>(
    input: R,
    symbol: &str,
    interval: u32,
) -> Result<BarSeries, DataError> {
    let mut bars: Vec<OhlcBar> = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if idx == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != 5 {
            return Err(malformed(lineno, &line));
        }
        let timestamp = NaiveDateTime::parse_from_str(fields[0], ISO_TS)
            .map_err(|_| malformed(lineno, &line))?;
        let mut prices = [0.0f64; 4];
        for (slot, field) in prices.iter_mut().zip(&fields[1..]) {
            *slot = field.parse::<f64>().map_err(|_| malformed(lineno, &line))?;
        }
        let bar = OhlcBar::new(timestamp, prices[0], prices[1], prices[2], prices[3])
            .map_err(|reason| DataError::InvalidBar { line: lineno, reason })?;
        if let Some(prev) = bars.last() {
            if bar.timestamp <= prev.timestamp {
                return Err(DataError::NonMonotonicTimestamp { line: lineno, timestamp });
            }
        }
        bars.push(bar);
    }
    Ok(BarSeries::new(symbol, interval, bars))
}
