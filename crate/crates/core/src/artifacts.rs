//! On-disk formats for every pipeline stage.
//!
//! Floats are written with Rust's shortest round-trip formatting so that a
//! file read back and rewritten is byte-identical.

use std::io::{Read, Write};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backtest::{EquityCurve, Outcome, TradeRecord};
use crate::baselines::Projection2D;
use crate::entropy::{score_order, ScoredPattern};
use crate::filter::{FilterConfig, FilteredLibrary, Provenance, Rejection, VerifyReport};
use crate::market_data::ISO_TS;
use crate::pattern::{FeatureVector, Label, Pattern, FEATURE_DIM};
use crate::report::{DistanceHistogram, YearVolatility};

pub const PATTERN_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("row {row}: {reason}")]
    BadRow { row: usize, reason: String },
    #[error("unsupported schema version {0}")]
    SchemaVersion(u32),
}

fn pattern_header() -> Vec<String> {
    let mut h: Vec<String> = ["id", "origin_iso8601", "label", "pnl_raw"].iter().map(|s| s.to_string()).collect();
    h.extend((0..FEATURE_DIM).map(|i| format!("f{i}")));
    h
}

fn pattern_fields(p: &Pattern) -> Vec<String> {
    let mut r = vec![
        p.id.to_string(),
        p.origin.format(ISO_TS).to_string(),
        p.label.to_string(),
        p.pnl_raw.to_string(),
    ];
    r.extend(p.features.iter().map(|f| f.to_string()));
    r
}

fn bad(row: usize, reason: impl Into<String>) -> ArtifactError {
    ArtifactError::BadRow { row, reason: reason.into() }
}

fn field(rec: &csv::StringRecord, i: usize, row: usize) -> Result<&str, ArtifactError> {
    rec.get(i).ok_or_else(|| bad(row, format!("missing column {i}")))
}

fn num<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, row: usize) -> Result<T, ArtifactError> {
    let s = field(rec, i, row)?;
    s.parse().map_err(|_| bad(row, format!("cannot parse {s:?} in column {i}")))
}

fn parse_pattern(rec: &csv::StringRecord, row: usize) -> Result<Pattern, ArtifactError> {
    let origin = NaiveDateTime::parse_from_str(field(rec, 1, row)?, ISO_TS)
        .map_err(|e| bad(row, format!("origin: {e}")))?;
    let label: Label = field(rec, 2, row)?.parse().map_err(|e: String| bad(row, e))?;
    let mut features: FeatureVector = [0.0; FEATURE_DIM];
    for (i, f) in features.iter_mut().enumerate() {
        *f = num(rec, 4 + i, row)?;
    }
    Ok(Pattern { id: num(rec, 0, row)?, origin, features, label, pnl_raw: num(rec, 3, row)? })
}

fn writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out)
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input)
}

pub fn write_patterns_csv<W: Write>(patterns: &[Pattern], out: W) -> Result<(), ArtifactError> {
    let mut w = writer(out);
    w.write_record(pattern_header())?;
    for p in patterns {
        w.write_record(pattern_fields(p))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_patterns_csv<R: Read>(input: R) -> Result<Vec<Pattern>, ArtifactError> {
    reader(input)
        .records()
        .enumerate()
        .map(|(i, rec)| parse_pattern(&rec?, i + 1))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct PatternFile {
    schema_version: u32,
    patterns: Vec<Pattern>,
}

pub fn patterns_to_json(patterns: &[Pattern]) -> String {
    let file = PatternFile { schema_version: PATTERN_SCHEMA_VERSION, patterns: patterns.to_vec() };
    serde_json::to_string_pretty(&file).expect("patterns serialize") + "\n"
}

pub fn patterns_from_json(text: &str) -> Result<Vec<Pattern>, ArtifactError> {
    let file: PatternFile = serde_json::from_str(text)?;
    if file.schema_version != PATTERN_SCHEMA_VERSION {
        return Err(ArtifactError::SchemaVersion(file.schema_version));
    }
    Ok(file.patterns)
}

const SCORE_COLUMNS: [&str; 4] = ["h_local", "info_gain", "pnl_norm", "score"];

fn scored_fields(s: &ScoredPattern) -> Vec<String> {
    let mut r = pattern_fields(&s.pattern);
    r.extend([s.h_local, s.info_gain, s.pnl_norm, s.score].iter().map(|v| v.to_string()));
    r
}

fn parse_scored(rec: &csv::StringRecord, row: usize) -> Result<ScoredPattern, ArtifactError> {
    let base = 4 + FEATURE_DIM;
    Ok(ScoredPattern {
        pattern: parse_pattern(rec, row)?,
        h_local: num(rec, base, row)?,
        info_gain: num(rec, base + 1, row)?,
        pnl_norm: num(rec, base + 2, row)?,
        score: num(rec, base + 3, row)?,
    })
}

pub fn write_scored_csv<W: Write>(scored: &[ScoredPattern], out: W) -> Result<(), ArtifactError> {
    let mut w = writer(out);
    let mut header = pattern_header();
    header.extend(SCORE_COLUMNS.iter().map(|s| s.to_string()));
    w.write_record(header)?;
    for s in scored {
        w.write_record(scored_fields(s))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scored_csv<R: Read>(input: R) -> Result<Vec<ScoredPattern>, ArtifactError> {
    reader(input)
        .records()
        .enumerate()
        .map(|(i, rec)| parse_scored(&rec?, i + 1))
        .collect()
}

/// Every input pattern in ranking order, flagged admitted or blocked.
pub fn write_filtered_csv<W: Write>(lib: &FilteredLibrary, out: W) -> Result<(), ArtifactError> {
    let mut rows: Vec<(&ScoredPattern, Option<u64>)> = lib
        .admitted()
        .map(|s| (s, None))
        .chain(lib.rejected.iter().map(|r| (&r.pattern, Some(r.blocked_by))))
        .collect();
    rows.sort_by(|a, b| score_order(a.0, b.0));
    let mut w = writer(out);
    let mut header = pattern_header();
    header.extend(SCORE_COLUMNS.iter().map(|s| s.to_string()));
    header.extend(["admitted".to_string(), "blocked_by".to_string()]);
    w.write_record(header)?;
    for (s, blocked) in rows {
        let mut r = scored_fields(s);
        r.push(if blocked.is_none() { "1" } else { "0" }.to_string());
        r.push(blocked.map(|b| b.to_string()).unwrap_or_default());
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Rebuilds a library from the filtered CSV plus the settings it was made with.
pub fn read_filtered_csv<R: Read>(
    input: R,
    config: FilterConfig,
    training_span: Option<(NaiveDateTime, NaiveDateTime)>,
) -> Result<FilteredLibrary, ArtifactError> {
    let base = 4 + FEATURE_DIM + SCORE_COLUMNS.len();
    let mut lib = FilteredLibrary {
        buys: vec![],
        sells: vec![],
        rejected: vec![],
        config,
        provenance: Provenance::default(),
        training_span,
    };
    for (i, rec) in reader(input).records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let s = parse_scored(&rec, row)?;
        match s.pattern.label {
            Label::Buy => lib.provenance.raw_buys += 1,
            Label::Sell => lib.provenance.raw_sells += 1,
        }
        match field(&rec, base, row)? {
            "1" => match s.pattern.label {
                Label::Buy => lib.buys.push(s),
                Label::Sell => lib.sells.push(s),
            },
            "0" => {
                let blocked_by = num(&rec, base + 1, row)?;
                lib.rejected.push(Rejection { pattern: s, blocked_by });
            }
            other => return Err(bad(row, format!("admitted must be 0 or 1, got {other:?}"))),
        }
    }
    lib.provenance.kept_buys = lib.buys.len();
    lib.provenance.kept_sells = lib.sells.len();
    Ok(lib)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub theta: f64,
    /// `"fixed"` or `"percentile:<p>"`.
    pub theta_source: String,
    pub alpha: f64,
    pub k: usize,
    pub normalize_ig: bool,
    pub standardize: bool,
    pub raw_buys: usize,
    pub raw_sells: usize,
    pub kept_buys: usize,
    pub kept_sells: usize,
    /// `null` when one side is empty (+infinity).
    pub min_cross_distance: Option<f64>,
    pub verify_passed: bool,
    pub training_span: Option<(NaiveDateTime, NaiveDateTime)>,
}

impl FilterSummary {
    pub fn new(lib: &FilteredLibrary, report: &VerifyReport, theta_source: String) -> Self {
        let sc = lib.config.scoring;
        FilterSummary {
            theta: lib.config.theta,
            theta_source,
            alpha: sc.alpha,
            k: sc.k,
            normalize_ig: sc.normalize_ig,
            standardize: sc.standardize,
            raw_buys: lib.provenance.raw_buys,
            raw_sells: lib.provenance.raw_sells,
            kept_buys: lib.provenance.kept_buys,
            kept_sells: lib.provenance.kept_sells,
            min_cross_distance: report.min_cross_distance,
            verify_passed: report.passed,
            training_span: lib.training_span,
        }
    }

    pub fn filter_config(&self) -> FilterConfig {
        FilterConfig {
            theta: self.theta,
            scoring: crate::entropy::ScoringConfig {
                k: self.k,
                alpha: self.alpha,
                normalize_ig: self.normalize_ig,
                standardize: self.standardize,
            },
        }
    }
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes") + "\n"
}

fn outcome_str(o: Outcome) -> &'static str {
    match o {
        Outcome::Target => "Target",
        Outcome::Stop => "Stop",
        Outcome::EndOfData => "EndOfData",
    }
}

pub fn write_trades_csv<W: Write>(trades: &[TradeRecord], out: W) -> Result<(), ArtifactError> {
    let mut w = writer(out);
    w.write_record(["entry_time", "direction", "entry_price", "exit_time", "exit_price", "outcome", "pnl"])?;
    for t in trades {
        w.write_record([
            t.entry_time.format(ISO_TS).to_string(),
            t.direction.to_string(),
            t.entry_price.to_string(),
            t.exit_time.format(ISO_TS).to_string(),
            t.exit_price.to_string(),
            outcome_str(t.outcome).to_string(),
            t.pnl.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_equity_csv<W: Write>(curve: &EquityCurve, out: W) -> Result<(), ArtifactError> {
    let mut w = writer(out);
    w.write_record(["time", "capital"])?;
    for (t, c) in &curve.points {
        w.write_record([t.format(ISO_TS).to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_projection_csv<W: Write>(
    patterns: &[&Pattern],
    proj: &Projection2D,
    out: W,
) -> Result<(), ArtifactError> {
    let mut w = writer(out);
    w.write_record(["id", "label", "pc1", "pc2"])?;
    for (p, c) in patterns.iter().zip(&proj.coordinates) {
        w.write_record([p.id.to_string(), p.label.to_string(), c[0].to_string(), c[1].to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_histogram_csv<W: Write>(h: &DistanceHistogram, mut out: W) -> Result<(), ArtifactError> {
    writeln!(out, "# population={}", h.population.as_str())?;
    writeln!(out, "# samples={}", h.samples)?;
    writeln!(out, "# mean={}", h.mean)?;
    writeln!(out, "# median={}", h.median)?;
    writeln!(out, "bin_left,bin_right,count")?;
    for (i, c) in h.counts.iter().enumerate() {
        writeln!(out, "{},{},{}", h.edges[i], h.edges[i + 1], c)?;
    }
    Ok(())
}

pub fn write_volatility_csv<W: Write>(y: &YearVolatility, mut out: W) -> Result<(), ArtifactError> {
    let b = &y.box_stats;
    writeln!(out, "# year={}", y.year)?;
    writeln!(out, "# min={} q1={} median={} q3={} max={} mean={}", b.min, b.q1, b.median, b.q3, b.max, b.mean)?;
    writeln!(out, "# lower_whisker={} upper_whisker={}", b.lower_whisker, b.upper_whisker)?;
    writeln!(out, "month,std,bars")?;
    for m in &y.months {
        writeln!(out, "{},{},{}", m.month, m.std, m.bars)?;
    }
    Ok(())
}
