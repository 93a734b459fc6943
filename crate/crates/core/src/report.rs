//! Summary statistics behind the figures: cross-class distance histograms,
//! monthly volatility box statistics, run manifests and a tiny SVG writer.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::Datelike;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::entropy::l1;
use crate::market_data::BarSeries;
use crate::stats::{mean, median, quantile_sorted, std_dev, StdMode};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("both sides need at least one pattern")]
    EmptySide,
    #[error("series has no bars")]
    EmptySeries,
    #[error("bin count must be positive")]
    InvalidBins,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Population {
    Raw,
    Filtered,
}

impl Population {
    pub fn as_str(self) -> &'static str {
        match self {
            Population::Raw => "raw",
            Population::Filtered => "filtered",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceHistogram {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub median: f64,
    pub samples: usize,
    pub population: Population,
}

/// Equal-width histogram over `[min, max]` with exact mean and median.
pub fn histogram_from_distances(
    distances: &[f64],
    bins: usize,
    population: Population,
) -> Result<DistanceHistogram, ReportError> {
    if bins == 0 {
        return Err(ReportError::InvalidBins);
    }
    if distances.is_empty() {
        return Err(ReportError::EmptySide);
    }
    let lo = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = distances.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let mut edges: Vec<f64> = (0..bins).map(|i| lo + i as f64 * width).collect();
    edges.push(hi);
    let mut counts = vec![0usize; bins];
    for &d in distances {
        let idx = if width > 0.0 { ((d - lo) / width) as usize } else { 0 };
        counts[idx.min(bins - 1)] += 1;
    }
    Ok(DistanceHistogram {
        edges,
        counts,
        mean: mean(distances),
        median: median(distances),
        samples: distances.len(),
        population,
    })
}

/// All `|buys| x |sells|` L1 distances, binned.
pub fn cross_distance_histogram<A: AsRef<[f64]>, B: AsRef<[f64]>>(
    buys: &[A],
    sells: &[B],
    bins: usize,
    population: Population,
) -> Result<DistanceHistogram, ReportError> {
    if buys.is_empty() || sells.is_empty() {
        return Err(ReportError::EmptySide);
    }
    let d: Vec<f64> = buys
        .iter()
        .flat_map(|b| sells.iter().map(move |s| l1(b.as_ref(), s.as_ref())))
        .collect();
    histogram_from_distances(&d, bins, population)
}

/// Every unordered pair regardless of label.
pub fn all_pairs_histogram<A: AsRef<[f64]>>(
    points: &[A],
    bins: usize,
    population: Population,
) -> Result<DistanceHistogram, ReportError> {
    let mut d = Vec::with_capacity(points.len() * points.len().saturating_sub(1) / 2);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            d.push(l1(points[i].as_ref(), points[j].as_ref()));
        }
    }
    histogram_from_distances(&d, bins, population)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramComparison {
    pub raw: DistanceHistogram,
    pub filtered: DistanceHistogram,
    pub mean_delta: f64,
    pub median_delta: f64,
}

impl HistogramComparison {
    pub fn new(raw: DistanceHistogram, filtered: DistanceHistogram) -> Self {
        HistogramComparison {
            mean_delta: filtered.mean - raw.mean,
            median_delta: filtered.median - raw.median,
            raw,
            filtered,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthStd {
    pub month: u32,
    pub std: f64,
    pub bars: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    /// Most extreme values inside `[q1 - 1.5 IQR, q3 + 1.5 IQR]`.
    pub lower_whisker: f64,
    pub upper_whisker: f64,
    pub outliers: Vec<f64>,
}

impl BoxStats {
    pub fn from_values(values: &[f64]) -> BoxStats {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q1 = quantile_sorted(&v, 0.25);
        let q3 = quantile_sorted(&v, 0.75);
        let iqr = q3 - q1;
        let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let inside: Vec<f64> = v.iter().copied().filter(|x| *x >= lo_fence && *x <= hi_fence).collect();
        BoxStats {
            min: v[0],
            q1,
            median: quantile_sorted(&v, 0.5),
            q3,
            max: v[v.len() - 1],
            mean: mean(&v),
            lower_whisker: inside.first().copied().unwrap_or(q1),
            upper_whisker: inside.last().copied().unwrap_or(q3),
            outliers: v.iter().copied().filter(|x| *x < lo_fence || *x > hi_fence).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YearVolatility {
    pub year: i32,
    pub months: Vec<MonthStd>,
    pub box_stats: BoxStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolatilityStats {
    pub mode: StdMode,
    pub years: Vec<YearVolatility>,
}

/// Standard deviation of opens per calendar month, boxed per year.
pub fn monthly_volatility(series: &BarSeries, mode: StdMode) -> Result<VolatilityStats, ReportError> {
    if series.is_empty() {
        return Err(ReportError::EmptySeries);
    }
    let mut by_month: BTreeMap<(i32, u32), Vec<f64>> = BTreeMap::new();
    for b in &series.bars {
        by_month.entry((b.timestamp.year(), b.timestamp.month())).or_default().push(b.open);
    }
    let mut by_year: BTreeMap<i32, Vec<MonthStd>> = BTreeMap::new();
    for ((year, month), opens) in by_month {
        by_year.entry(year).or_default().push(MonthStd { month, std: std_dev(&opens, mode), bars: opens.len() });
    }
    let years = by_year
        .into_iter()
        .map(|(year, months)| {
            let stds: Vec<f64> = months.iter().map(|m| m.std).collect();
            YearVolatility { year, box_stats: BoxStats::from_values(&stds), months }
        })
        .collect();
    Ok(VolatilityStats { mode, years })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Everything needed to rerun a stage and check its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_schema_version: u32,
    pub stage: String,
    pub config: serde_json::Value,
    pub seed: u64,
    /// Input path -> sha256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name (relative to the output directory) -> sha256.
    pub outputs: BTreeMap<String, String>,
    pub stage_counts: BTreeMap<String, u64>,
    /// Wall-clock creation time; the only field that varies between identical runs.
    pub created_at: Option<String>,
}

impl RunManifest {
    pub fn new(stage: &str, config: serde_json::Value, seed: u64) -> Self {
        RunManifest {
            tool_version: crate::VERSION.to_string(),
            config_schema_version: CONFIG_SCHEMA_VERSION,
            stage: stage.to_string(),
            config,
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            stage_counts: BTreeMap::new(),
            created_at: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    /// Same manifest with the wall-clock field cleared.
    pub fn without_clock(&self) -> RunManifest {
        RunManifest { created_at: None, ..self.clone() }
    }
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 360.0;
const PAD: f64 = 40.0;

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{PAD}\" y=\"20\" font-size=\"13\">{title}</text>\n"
    )
}

/// Overlaid bar charts, one color per histogram.
pub fn histogram_svg(hists: &[(&DistanceHistogram, &str)], title: &str) -> String {
    let mut s = svg_open(title);
    let lo = hists.iter().map(|(h, _)| h.edges[0]).fold(f64::INFINITY, f64::min);
    let hi = hists.iter().map(|(h, _)| *h.edges.last().unwrap()).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (pw, ph) = (SVG_W - 2.0 * PAD, SVG_H - 2.0 * PAD);
    for (h, color) in hists {
        let total = h.samples.max(1) as f64;
        let top = h.counts.iter().copied().max().unwrap_or(1).max(1) as f64 / total;
        for (i, &c) in h.counts.iter().enumerate() {
            let x0 = PAD + (h.edges[i] - lo) / span * pw;
            let x1 = PAD + (h.edges[i + 1] - lo) / span * pw;
            let bh = c as f64 / total / top * ph;
            let _ = writeln!(
                s,
                "<rect x=\"{x0:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{bh:.2}\" fill=\"{color}\" fill-opacity=\"0.5\"/>",
                SVG_H - PAD - bh,
                (x1 - x0).max(0.5)
            );
        }
        let mx = PAD + (h.median - lo) / span * pw;
        let _ = writeln!(
            s,
            "<line x1=\"{mx:.2}\" x2=\"{mx:.2}\" y1=\"{PAD}\" y2=\"{}\" stroke=\"{color}\" stroke-dasharray=\"4 2\"/>",
            SVG_H - PAD
        );
    }
    let _ = writeln!(s, "<text x=\"{PAD}\" y=\"{}\">{lo:.1}</text>", SVG_H - 10.0);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{hi:.1}</text>", SVG_W - PAD, SVG_H - 10.0);
    s.push_str("</svg>\n");
    s
}

/// One box per year.
pub fn volatility_svg(stats: &VolatilityStats, title: &str) -> String {
    let mut s = svg_open(title);
    let n = stats.years.len().max(1) as f64;
    let lo = stats.years.iter().map(|y| y.box_stats.min).fold(f64::INFINITY, f64::min);
    let hi = stats.years.iter().map(|y| y.box_stats.max).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let ph = SVG_H - 2.0 * PAD;
    let y = |v: f64| SVG_H - PAD - (v - lo) / span * ph;
    let slot = (SVG_W - 2.0 * PAD) / n;
    for (i, yv) in stats.years.iter().enumerate() {
        let b = &yv.box_stats;
        let cx = PAD + slot * (i as f64 + 0.5);
        let half = slot * 0.3;
        let _ = writeln!(
            s,
            "<line x1=\"{cx:.2}\" x2=\"{cx:.2}\" y1=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
            y(b.lower_whisker),
            y(b.upper_whisker)
        );
        let _ = writeln!(
            s,
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#9ecae1\" stroke=\"black\"/>",
            cx - half,
            y(b.q3),
            2.0 * half,
            (y(b.q1) - y(b.q3)).max(0.5)
        );
        let _ = writeln!(
            s,
            "<line x1=\"{:.2}\" x2=\"{:.2}\" y1=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\" stroke-width=\"2\"/>",
            cx - half,
            cx + half,
            y(b.median),
            y(b.median)
        );
        for o in &b.outliers {
            let _ = writeln!(s, "<circle cx=\"{cx:.2}\" cy=\"{:.2}\" r=\"2\"/>", y(*o));
        }
        let _ = writeln!(s, "<text x=\"{cx:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>", SVG_H - 10.0, yv.year);
    }
    s.push_str("</svg>\n");
    s
}
