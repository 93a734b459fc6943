//! Browser demo: three operations over the synthetic fixtures, each returning
//! a JSON string for the page in `www/` to draw.
//!
//! The plain functions ([`filter_view`], [`sweep_view`], [`baseline_view`])
//! are ordinary Rust and are what the tests call; the `wasm_*` exports wrap
//! them for JavaScript.

use qpattern::backtest::{self, BacktestConfig};
use qpattern::baselines::{self, pca_project};
use qpattern::entropy::{score_all, ScoringConfig};
use qpattern::filter::{default_theta, filter, verify, FilterConfig, FilteredLibrary};
use qpattern::fixture;
use qpattern::pattern::{extract_patterns, Label, LabelingConfig, Pattern};
use qpattern::pipeline::fixture_specs;
use qpattern::report::{cross_distance_histogram, DistanceHistogram, HistogramComparison, Population};
use serde::Serialize;
use serde_json::json;
use wasm_bindgen::prelude::*;

const HIST_BINS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixtureKind {
    /// Two pure pattern clouds and one contradictory cloud.
    Mixed,
    /// One dense label-leaning region and one sparse pure region.
    Skew,
    /// Patterns cut from the synthetic price series.
    Bars,
}

impl FixtureKind {
    pub fn parse(s: &str) -> Result<Self, String> {
        match s {
            "mixed" => Ok(FixtureKind::Mixed),
            "skew" => Ok(FixtureKind::Skew),
            "bars" => Ok(FixtureKind::Bars),
            other => Err(format!("unknown fixture {other:?}; expected mixed, skew or bars")),
        }
    }
}

pub fn fixture_patterns(kind: FixtureKind, seed: u64) -> Result<Vec<Pattern>, String> {
    Ok(match kind {
        FixtureKind::Mixed => fixture::mixed_region_fixture(seed),
        FixtureKind::Skew => fixture::skew_fixture(seed),
        FixtureKind::Bars => {
            let (train, _) = fixture_specs(seed);
            let (bars, _) = fixture::synthetic_bars(&train);
            extract_patterns(&bars, &LabelingConfig::default()).map_err(|e| e.to_string())?
        }
    })
}

fn library(
    patterns: &[Pattern],
    theta_percentile: f64,
    alpha: f64,
    k: usize,
) -> Result<FilteredLibrary, String> {
    let scoring = ScoringConfig { k, alpha, ..Default::default() };
    let scored = score_all(patterns, &scoring).map_err(|e| e.to_string())?;
    let refs: Vec<&Pattern> = patterns.iter().collect();
    let theta = default_theta(&refs, theta_percentile).map_err(|e| e.to_string())?;
    filter(&scored, &FilterConfig { theta, scoring }).map_err(|e| e.to_string())
}

fn histogram(pats: &[&Pattern], population: Population) -> Result<DistanceHistogram, String> {
    let side = |l: Label| -> Vec<&[f64]> { pats.iter().filter(|p| p.label == l).map(|p| &p.features[..]).collect() };
    cross_distance_histogram(&side(Label::Buy), &side(Label::Sell), HIST_BINS, population).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Point {
    id: u64,
    x: f64,
    y: f64,
    buy: bool,
    admitted: bool,
}

/// PCA scatter with admission flags, counts, and raw vs filtered histograms.
pub fn filter_view(fixture: &str, seed: u64, theta_percentile: f64, alpha: f64, k: usize) -> Result<String, String> {
    let pats = fixture_patterns(FixtureKind::parse(fixture)?, seed)?;
    let lib = library(&pats, theta_percentile, alpha, k)?;
    let report = verify(&lib);
    let points: Vec<Vec<f64>> = pats.iter().map(|p| p.features.to_vec()).collect();
    let proj = pca_project(&points).map_err(|e| e.to_string())?;
    let admitted: std::collections::HashSet<u64> = lib.admitted().map(|s| s.pattern.id).collect();
    let scatter: Vec<Point> = pats
        .iter()
        .zip(&proj.coordinates)
        .map(|(p, c)| Point { id: p.id, x: c[0], y: c[1], buy: p.label == Label::Buy, admitted: admitted.contains(&p.id) })
        .collect();
    let raw: Vec<&Pattern> = pats.iter().collect();
    let kept: Vec<&Pattern> = lib.admitted().map(|s| &s.pattern).collect();
    let comparison = HistogramComparison::new(histogram(&raw, Population::Raw)?, histogram(&kept, Population::Filtered)?);
    Ok(json!({
        "theta": lib.config.theta,
        "raw": { "buys": lib.provenance.raw_buys, "sells": lib.provenance.raw_sells },
        "kept": { "buys": lib.buys.len(), "sells": lib.sells.len() },
        "verify_passed": report.passed,
        "min_cross_distance": report.min_cross_distance,
        "explained_variance": proj.explained_variance,
        "points": scatter,
        "histograms": comparison,
    })
    .to_string())
}

/// Equity curves for each (target, stop) cell over the held-out fixture span.
pub fn sweep_view(seed: u64, targets: &[f64], stops: &[f64], match_scale: f64) -> Result<String, String> {
    let (train, test) = fixture_specs(seed);
    let (train_bars, _) = fixture::synthetic_bars(&train);
    let (test_bars, _) = fixture::synthetic_bars(&test);
    let pats = extract_patterns(&train_bars, &LabelingConfig::default()).map_err(|e| e.to_string())?;
    let mut lib = library(&pats, 5.0, 0.8, 25)?;
    lib.training_span = Some((train_bars.first_timestamp().unwrap_or_default(), train_bars.last_timestamp().unwrap_or_default()));
    let base = BacktestConfig { match_theta: lib.config.theta * match_scale, ..Default::default() };
    let sweep = backtest::parameter_sweep(&test_bars, &lib, &base, targets, stops).map_err(|e| e.to_string())?;
    let cells: Vec<_> = sweep
        .iter()
        .map(|(cell, res)| {
            json!({
                "target": cell.target,
                "stop": cell.stop,
                "summary": cell.summary,
                "curve": res.equity.points.iter().map(|(t, c)| json!([t.and_utc().timestamp(), c])).collect::<Vec<_>>(),
            })
        })
        .collect();
    Ok(json!({
        "match_theta": base.match_theta,
        "library": { "buys": lib.buys.len(), "sells": lib.sells.len() },
        "initial_capital": base.initial_capital,
        "cells": cells,
    })
    .to_string())
}

/// K-means and GMM cluster assignments next to the entropy filter's counts.
pub fn baseline_view(fixture: &str, seed: u64) -> Result<String, String> {
    let pats = fixture_patterns(FixtureKind::parse(fixture)?, seed)?;
    let lib = library(&pats, 5.0, 0.8, 25)?;
    let points: Vec<Vec<f64>> = pats.iter().map(|p| p.features.to_vec()).collect();
    let truth: Vec<Label> = pats.iter().map(|p| p.label).collect();
    let km = baselines::kmeans(&points, 2, seed).map_err(|e| e.to_string())?;
    let gm = baselines::gmm_em(&points, 2, seed).map_err(|e| e.to_string())?;
    let proj = pca_project(&points).map_err(|e| e.to_string())?;
    let report = baselines::balance_report(&lib, &km.assignment, &gm.assignment, &truth);
    Ok(json!({
        "balance": report.rows,
        "coords": proj.coordinates,
        "buy": truth.iter().map(|l| *l == Label::Buy).collect::<Vec<_>>(),
        "kmeans": km.assignment.labels,
        "gmm": gm.assignment.labels,
    })
    .to_string())
}

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<f64>().map_err(|_| format!("not a number: {t:?}")))
        .collect()
}

#[wasm_bindgen]
pub fn wasm_filter_view(fixture: &str, seed: u32, theta_percentile: f64, alpha: f64, k: u32) -> Result<String, JsValue> {
    filter_view(fixture, seed.into(), theta_percentile, alpha, k as usize).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn wasm_sweep_view(seed: u32, targets: &str, stops: &str, match_scale: f64) -> Result<String, JsValue> {
    let run = || sweep_view(seed.into(), &parse_list(targets)?, &parse_list(stops)?, match_scale);
    run().map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn wasm_baseline_view(fixture: &str, seed: u32) -> Result<String, JsValue> {
    baseline_view(fixture, seed.into()).map_err(|e| JsValue::from_str(&e))
}
