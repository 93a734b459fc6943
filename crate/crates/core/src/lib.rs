//! Entropy-scored mining of short-term OHLC patterns.
//!
//! The pipeline runs bottom-up through these modules:
//!
//! - [`market_data`]: histdata M1 parsing and clock-aligned bar aggregation.
//! - [`pattern`]: 8-bar windows preceding a swing, as 32 shape features.
//! - [`entropy`]: k-NN label entropy, information gain and the blended score.
//! - [`mod@filter`]: greedy admission of cross-class separated Buy/Sell sets.
//! - [`baselines`]: k-means, Gaussian mixture EM and PCA for comparison.
//! - [`backtest`]: target/stop replay of library matches over held-out bars.
//! - [`report`]: distance histograms, monthly volatility, manifests, SVG.
//! - [`pipeline`]: stage orchestration and on-disk artifacts.

// `!(x > 0.0)` is used on purpose so NaN lands in the error branch.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod artifacts;
pub mod backtest;
pub mod baselines;
pub mod entropy;
pub mod filter;
pub mod fixture;
pub mod linalg;
pub mod market_data;
pub mod pattern;
pub mod pipeline;
pub mod report;
pub mod stats;

pub use entropy::{l1_distance, score_all, shannon_entropy, ScoredPattern, ScoringConfig};
pub use filter::{filter, verify, FilterConfig, FilteredLibrary, VerifyReport};
pub use market_data::{aggregate, parse_histdata_csv, BarSeries, OhlcBar};
pub use pattern::{extract_patterns, featurize, Label, LabelingConfig, Pattern, FEATURE_DIM};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
