//! Stage orchestration: ingest → extract → score → filter → baseline →
//! backtest → report.
//!
//! Every stage reads the previous stages' artifacts from the output
//! directory, writes its own files plus `manifest_<stage>.json`, and is a pure
//! function of (inputs, config, seed). Files are only written once a stage has
//! fully succeeded.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifacts::{self, to_json_pretty, ArtifactError, FilterSummary};
use crate::backtest::{self, BacktestConfig, BacktestError, Outcome};
use crate::baselines::{self, BaselineError, Projection2D};
use crate::entropy::{self, EntropyError, ScoredPattern, ScoringConfig};
use crate::filter::{self, FilterConfig, FilterError, FilteredLibrary};
use crate::fixture::{self, BarFixtureSpec};
use crate::market_data::{self, BarSeries};
use crate::pattern::{self, Label, LabelingConfig, Pattern, PatternError, PnlMode};
use crate::report::{self, HistogramComparison, Population, ReportError, RunManifest};
use crate::stats::StdMode;

pub mod files {
    pub const BARS_TRAIN: &str = "bars_train.csv";
    pub const BARS_TEST: &str = "bars_test.csv";
    pub const PATTERNS_CSV: &str = "patterns.csv";
    pub const PATTERNS_JSON: &str = "patterns.json";
    pub const SCORED: &str = "scored.csv";
    pub const FILTERED: &str = "filtered.csv";
    pub const FILTER_SUMMARY: &str = "filter_summary.json";
    pub const PROJECTION_RAW: &str = "projection_raw.csv";
    pub const PROJECTION_FILTERED: &str = "projection_filtered.csv";
    pub const CLUSTERS: &str = "clusters.csv";
    pub const BALANCE_JSON: &str = "balance.json";
    pub const BALANCE_TXT: &str = "balance.txt";
    pub const TRADES: &str = "trades.csv";
    pub const EQUITY: &str = "equity.csv";
    pub const SWEEP: &str = "sweep.json";
    pub const HISTOGRAM_RAW: &str = "histogram_raw.csv";
    pub const HISTOGRAM_FILTERED: &str = "histogram_filtered.csv";
    pub const HISTOGRAM_COMPARISON: &str = "histogram_comparison.json";
    pub const HISTOGRAM_SVG: &str = "histogram.svg";
    pub const VOLATILITY_JSON: &str = "volatility.json";
    pub const VOLATILITY_SVG: &str = "volatility.svg";
    pub const MANIFEST_ALL: &str = "manifest.json";
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing artifact {}: run the producing stage first", .0.display())]
    MissingArtifact(PathBuf),
    #[error("data{}: {message}", .path.as_ref().map(|p| format!(" ({})", p.display())).unwrap_or_default())]
    Data { path: Option<PathBuf>, message: String },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("i/o on {}: {source}", .path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::MissingArtifact(_) | PipelineError::Data { .. } | PipelineError::Io { .. } => 2,
            PipelineError::Invariant(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "config",
            PipelineError::MissingArtifact(_) | PipelineError::Data { .. } | PipelineError::Io { .. } => "data",
            PipelineError::Invariant(_) => "invariant",
        }
    }

    pub fn path(&self) -> Option<&Path> {
        match self {
            PipelineError::MissingArtifact(p) | PipelineError::Io { path: p, .. } => Some(p),
            PipelineError::Data { path, .. } => path.as_deref(),
            _ => None,
        }
    }

    /// `{"error": kind, "exit_code": n, "message": ..., "path": ...}`
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
            "path": self.path().map(|p| p.display().to_string()),
        })
        .to_string()
    }
}

fn data_err(path: Option<&Path>, e: impl fmt::Display) -> PipelineError {
    PipelineError::Data { path: path.map(Path::to_path_buf), message: e.to_string() }
}

impl From<EntropyError> for PipelineError {
    fn from(e: EntropyError) -> Self {
        match e {
            EntropyError::KTooLarge { .. } | EntropyError::InvalidAlpha(_) => PipelineError::Config(e.to_string()),
            other => data_err(None, other),
        }
    }
}

impl From<FilterError> for PipelineError {
    fn from(e: FilterError) -> Self {
        match e {
            FilterError::InvalidTheta(_) => PipelineError::Config(e.to_string()),
            FilterError::UnsortedInput { .. } => PipelineError::Invariant(e.to_string()),
            FilterError::NoCrossPairs(_) => data_err(None, e),
        }
    }
}

impl From<BacktestError> for PipelineError {
    fn from(e: BacktestError) -> Self {
        match e {
            BacktestError::InvalidConfig(_) | BacktestError::EmptyGrid => PipelineError::Config(e.to_string()),
            other => data_err(None, other),
        }
    }
}

impl From<PatternError> for PipelineError {
    fn from(e: PatternError) -> Self {
        match e {
            PatternError::InvalidConfig(_) => PipelineError::Config(e.to_string()),
            other => data_err(None, other),
        }
    }
}

impl From<BaselineError> for PipelineError {
    fn from(e: BaselineError) -> Self {
        data_err(None, e)
    }
}

impl From<ReportError> for PipelineError {
    fn from(e: ReportError) -> Self {
        match e {
            ReportError::InvalidBins => PipelineError::Config(e.to_string()),
            other => data_err(None, other),
        }
    }
}

/// One flat table of every tunable. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train_data: Vec<PathBuf>,
    pub test_data: Vec<PathBuf>,
    pub symbol: String,
    pub bar_interval: u32,
    pub drop_partial: bool,
    pub window_bars: usize,
    pub horizon_bars: usize,
    pub swing_points: f64,
    pub pnl_mode: PnlMode,
    pub k: usize,
    pub alpha: f64,
    pub normalize_ig: bool,
    pub standardize: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    pub theta_percentile: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub match_theta: Option<f64>,
    pub target: f64,
    pub stop: f64,
    pub targets: Vec<f64>,
    pub stops: Vec<f64>,
    pub one_open_trade: bool,
    pub initial_capital: f64,
    pub point_value: f64,
    pub cost_per_trade: f64,
    pub optimistic_fills: bool,
    pub allow_train_overlap: bool,
    pub histogram_bins: usize,
    pub all_pairs_histogram: bool,
    pub volatility_std: StdMode,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker cap; 0 lets the runtime decide.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let l = LabelingConfig::default();
        let s = ScoringConfig::default();
        let b = BacktestConfig::default();
        RunConfig {
            train_data: Vec::new(),
            test_data: Vec::new(),
            symbol: "XAUUSD".into(),
            bar_interval: 30,
            drop_partial: false,
            window_bars: l.window_bars,
            horizon_bars: l.horizon_bars,
            swing_points: l.swing_points,
            pnl_mode: l.pnl_mode,
            k: s.k,
            alpha: s.alpha,
            normalize_ig: s.normalize_ig,
            standardize: s.standardize,
            theta: None,
            theta_percentile: 5.0,
            match_theta: None,
            target: b.target,
            stop: b.stop,
            targets: vec![10.0, 15.0, 20.0],
            stops: vec![10.0, 15.0, 20.0],
            one_open_trade: b.one_open_trade,
            initial_capital: b.initial_capital,
            point_value: b.point_value,
            cost_per_trade: b.cost_per_trade,
            optimistic_fills: b.optimistic_fills,
            allow_train_overlap: b.allow_train_overlap,
            histogram_bins: 40,
            all_pairs_histogram: false,
            volatility_std: StdMode::Population,
            seed: 42,
            out_dir: PathBuf::from("out"),
            threads: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeyKind {
    Bool,
    Int,
    Float,
    OptFloat,
    Text,
    Path,
    PathList,
    FloatList,
}

pub struct ConfigKey {
    pub name: &'static str,
    pub kind: KeyKind,
    pub doc: &'static str,
}

const fn key(name: &'static str, kind: KeyKind, doc: &'static str) -> ConfigKey {
    ConfigKey { name, kind, doc }
}

/// Every config key, in file order. Each is also a `--<name>` flag.
pub const CONFIG_KEYS: &[ConfigKey] = &[
    key("train_data", KeyKind::PathList, "histdata M1 files for the pattern library, oldest first"),
    key("test_data", KeyKind::PathList, "histdata M1 files for the backtest; must not overlap training"),
    key("symbol", KeyKind::Text, "instrument name, informational"),
    key("bar_interval", KeyKind::Int, "bar length in minutes after aggregation"),
    key("drop_partial", KeyKind::Bool, "drop an incomplete trailing bucket"),
    key("window_bars", KeyKind::Int, "bars per pattern window (fixed at 8)"),
    key("horizon_bars", KeyKind::Int, "bars after the window searched for a swing"),
    key("swing_points", KeyKind::Float, "move in points that labels a window"),
    key("pnl_mode", KeyKind::Text, "max | mean favorable excursion"),
    key("k", KeyKind::Int, "neighbors for local label entropy"),
    key("alpha", KeyKind::Float, "weight of information gain vs normalized PnL"),
    key("normalize_ig", KeyKind::Bool, "divide information gain by the global entropy"),
    key("standardize", KeyKind::Bool, "z-score features for the neighbor search only"),
    key("theta", KeyKind::OptFloat, "fixed Buy/Sell separation in L1 points; unset uses theta_percentile"),
    key("theta_percentile", KeyKind::Float, "percentile of raw cross-class distances used as theta"),
    key("match_theta", KeyKind::OptFloat, "backtest match threshold; unset uses theta"),
    key("target", KeyKind::Float, "take-profit distance in points"),
    key("stop", KeyKind::Float, "stop-loss distance in points"),
    key("targets", KeyKind::FloatList, "sweep grid of targets"),
    key("stops", KeyKind::FloatList, "sweep grid of stops"),
    key("one_open_trade", KeyKind::Bool, "at most one position at a time"),
    key("initial_capital", KeyKind::Float, "starting equity"),
    key("point_value", KeyKind::Float, "currency per point"),
    key("cost_per_trade", KeyKind::Float, "points deducted from every trade"),
    key("optimistic_fills", KeyKind::Bool, "target wins when one bar touches both exits"),
    key("allow_train_overlap", KeyKind::Bool, "backtest even if test data overlaps training"),
    key("histogram_bins", KeyKind::Int, "bins for distance histograms"),
    key("all_pairs_histogram", KeyKind::Bool, "histogram all pairs instead of Buy x Sell only"),
    key("volatility_std", KeyKind::Text, "population | sample"),
    key("seed", KeyKind::Int, "seed for clustering baselines"),
    key("out_dir", KeyKind::Path, "artifact directory"),
    key("threads", KeyKind::Int, "worker threads, 0 = all cores"),
];

fn parse_num<T: FromStr>(name: &str, raw: &str) -> Result<T, PipelineError> {
    raw.trim()
        .parse()
        .map_err(|_| PipelineError::Config(format!("--{name}: cannot parse {raw:?}")))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Commented config file with every key at its current value.
    pub fn to_commented_toml(&self) -> String {
        let table: toml::Table = toml::Table::try_from(self).expect("config serializes");
        let mut s = String::from("# qpattern run configuration\n");
        for k in CONFIG_KEYS {
            s.push_str(&format!("\n# {}\n", k.doc));
            match table.get(k.name) {
                Some(v) => s.push_str(&format!("{} = {}\n", k.name, v)),
                None => s.push_str(&format!("# {} = 0.0\n", k.name)),
            }
        }
        s
    }

    /// Overrides one key from its textual flag value.
    pub fn set(&mut self, name: &str, raw: &str) -> Result<(), PipelineError> {
        let spec = CONFIG_KEYS
            .iter()
            .find(|k| k.name == name)
            .ok_or_else(|| PipelineError::Config(format!("unknown key {name}")))?;
        let value = match spec.kind {
            KeyKind::Bool => toml::Value::Boolean(match raw.trim() {
                "" | "true" | "1" | "yes" => true,
                "false" | "0" | "no" => false,
                other => return Err(PipelineError::Config(format!("--{name}: expected a boolean, got {other:?}"))),
            }),
            KeyKind::Int => toml::Value::Integer(parse_num(name, raw)?),
            KeyKind::Float | KeyKind::OptFloat => toml::Value::Float(parse_num(name, raw)?),
            KeyKind::Text | KeyKind::Path => toml::Value::String(raw.to_string()),
            KeyKind::PathList => toml::Value::Array(
                raw.split(',').filter(|s| !s.is_empty()).map(|s| toml::Value::String(s.to_string())).collect(),
            ),
            KeyKind::FloatList => toml::Value::Array(
                raw.split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse_num(name, s).map(toml::Value::Float))
                    .collect::<Result<_, _>>()?,
            ),
        };
        let mut table = toml::Table::try_from(&*self).expect("config serializes");
        table.insert(name.to_string(), value);
        *self = table.try_into().map_err(|e: toml::de::Error| PipelineError::Config(format!("--{name}: {e}")))?;
        Ok(())
    }

    pub fn labeling(&self) -> LabelingConfig {
        LabelingConfig {
            window_bars: self.window_bars,
            horizon_bars: self.horizon_bars,
            swing_points: self.swing_points,
            pnl_mode: self.pnl_mode,
        }
    }

    pub fn scoring(&self) -> ScoringConfig {
        ScoringConfig { k: self.k, alpha: self.alpha, normalize_ig: self.normalize_ig, standardize: self.standardize }
    }

    pub fn backtest(&self, default_match_theta: f64) -> BacktestConfig {
        BacktestConfig {
            target: self.target,
            stop: self.stop,
            match_theta: self.match_theta.unwrap_or(default_match_theta),
            one_open_trade: self.one_open_trade,
            initial_capital: self.initial_capital,
            point_value: self.point_value,
            optimistic_fills: self.optimistic_fills,
            cost_per_trade: self.cost_per_trade,
            allow_train_overlap: self.allow_train_overlap,
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        self.labeling().validate()?;
        if self.bar_interval == 0 {
            return bad("bar_interval must be positive");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if self.k == 0 {
            return bad("k must be positive");
        }
        if self.theta.is_some_and(|t| !(t > 0.0 && t.is_finite())) {
            return bad("theta must be positive");
        }
        if !(self.theta_percentile > 0.0 && self.theta_percentile <= 100.0) {
            return bad("theta_percentile must lie in (0, 100]");
        }
        if self.histogram_bins == 0 {
            return bad("histogram_bins must be positive");
        }
        let positive = |v: &f64| *v > 0.0 && v.is_finite();
        if !self.targets.iter().chain(&self.stops).all(positive) {
            return bad("sweep targets and stops must be positive");
        }
        self.backtest(1.0).validate()?;
        Ok(())
    }

    /// Config as recorded in manifests: everything that can change an output.
    pub fn manifest_value(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("out_dir");
            m.remove("threads");
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    Extract,
    Score,
    Filter,
    Baseline,
    Backtest,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Stage::Ingest, Stage::Extract, Stage::Score, Stage::Filter, Stage::Baseline, Stage::Backtest, Stage::Report];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Extract => "extract",
            Stage::Score => "score",
            Stage::Filter => "filter",
            Stage::Baseline => "baseline",
            Stage::Backtest => "backtest",
            Stage::Report => "report",
        }
    }

    pub fn manifest_name(self) -> String {
        format!("manifest_{}.json", self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

/// Reads and writes for one stage; nothing touches disk until `commit`.
struct StageIo<'a> {
    out_dir: &'a Path,
    inputs: BTreeMap<String, String>,
    outputs: Vec<(String, Vec<u8>)>,
    counts: BTreeMap<String, u64>,
}

impl<'a> StageIo<'a> {
    fn new(out_dir: &'a Path) -> Self {
        StageIo { out_dir, inputs: BTreeMap::new(), outputs: Vec::new(), counts: BTreeMap::new() }
    }

    fn read(&mut self, path: &Path, key: String) -> Result<Vec<u8>, PipelineError> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => PipelineError::MissingArtifact(path.to_path_buf()),
            _ => PipelineError::Io { path: path.to_path_buf(), source: e },
        })?;
        self.inputs.insert(key, report::sha256_hex(&bytes));
        Ok(bytes)
    }

    fn artifact(&mut self, name: &str) -> Result<Vec<u8>, PipelineError> {
        self.read(&self.out_dir.join(name), name.to_string())
    }

    fn external(&mut self, path: &Path) -> Result<Vec<u8>, PipelineError> {
        self.read(path, path.display().to_string())
    }

    fn emit(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.outputs.push((name.into(), bytes.into()));
    }

    fn count(&mut self, name: &str, v: usize) {
        self.counts.insert(name.to_string(), v as u64);
    }
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> Result<(), ArtifactError>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory cannot fail");
    buf
}

fn artifact_err(name: &str, dir: &Path, e: ArtifactError) -> PipelineError {
    data_err(Some(&dir.join(name)), e)
}

pub struct Pipeline {
    pub config: RunConfig,
    /// Stamped into manifests; `None` keeps them clock-free.
    pub created_at: Option<String>,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Pipeline, PipelineError> {
        config.validate()?;
        Ok(Pipeline { config, created_at: None })
    }

    pub fn out_dir(&self) -> &Path {
        &self.config.out_dir
    }

    pub fn run_stage(&self, stage: Stage) -> Result<RunManifest, PipelineError> {
        let mut io = StageIo::new(self.out_dir());
        log::info!("stage {}", stage.name());
        match stage {
            Stage::Ingest => self.ingest(&mut io)?,
            Stage::Extract => self.extract(&mut io)?,
            Stage::Score => self.score(&mut io)?,
            Stage::Filter => self.filter(&mut io)?,
            Stage::Baseline => self.baseline(&mut io)?,
            Stage::Backtest => self.backtest(&mut io)?,
            Stage::Report => self.report(&mut io)?,
        }
        self.commit(stage.name(), &stage.manifest_name(), io)
    }

    /// Runs every stage in order, then writes `manifest.json` covering all of them.
    pub fn run_all(&self) -> Result<RunManifest, PipelineError> {
        let mut all = self.manifest("all");
        for stage in Stage::ALL {
            if stage == Stage::Backtest && self.config.test_data.is_empty() {
                log::warn!("no test_data configured; skipping backtest");
                continue;
            }
            let m = self.run_stage(stage)?;
            for (k, v) in m.inputs {
                let produced_here = all.outputs.contains_key(&k);
                if !produced_here {
                    all.inputs.insert(k, v);
                }
            }
            all.outputs.extend(m.outputs);
            all.stage_counts.extend(m.stage_counts);
        }
        self.write(files::MANIFEST_ALL, all.to_json().as_bytes())?;
        Ok(all)
    }

    /// Reruns `all` from a manifest's recorded config and checks that every
    /// stage count and output digest comes out the same.
    pub fn replay(manifest_path: &Path, out_dir: &Path) -> Result<RunManifest, PipelineError> {
        let text = fs::read_to_string(manifest_path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => PipelineError::MissingArtifact(manifest_path.to_path_buf()),
            _ => PipelineError::Io { path: manifest_path.to_path_buf(), source: e },
        })?;
        let recorded: RunManifest = serde_json::from_str(&text).map_err(|e| data_err(Some(manifest_path), e))?;
        if recorded.config_schema_version != report::CONFIG_SCHEMA_VERSION {
            return Err(PipelineError::Config(format!(
                "manifest schema version {} is not {}",
                recorded.config_schema_version,
                report::CONFIG_SCHEMA_VERSION
            )));
        }
        let mut config: RunConfig =
            serde_json::from_value(recorded.config.clone()).map_err(|e| PipelineError::Config(e.to_string()))?;
        config.out_dir = out_dir.to_path_buf();
        let rerun = Pipeline::new(config)?.run_all()?;
        if rerun.stage_counts != recorded.stage_counts {
            return Err(PipelineError::Invariant(format!(
                "replay stage counts differ: recorded {:?}, got {:?}",
                recorded.stage_counts, rerun.stage_counts
            )));
        }
        let changed: Vec<&String> = recorded
            .outputs
            .iter()
            .filter(|(k, v)| rerun.outputs.get(*k) != Some(*v))
            .map(|(k, _)| k)
            .collect();
        if !changed.is_empty() {
            return Err(PipelineError::Invariant(format!("replay outputs differ: {changed:?}")));
        }
        Ok(rerun)
    }

    fn manifest(&self, stage: &str) -> RunManifest {
        let mut m = RunManifest::new(stage, self.config.manifest_value(), self.config.seed);
        m.created_at = self.created_at.clone();
        m
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let path = self.out_dir().join(name);
        fs::write(&path, bytes).map_err(|e| PipelineError::Io { path, source: e })
    }

    fn commit(&self, stage: &str, manifest_name: &str, io: StageIo) -> Result<RunManifest, PipelineError> {
        let dir = self.out_dir();
        fs::create_dir_all(dir).map_err(|e| PipelineError::Io { path: dir.to_path_buf(), source: e })?;
        let mut m = self.manifest(stage);
        m.inputs = io.inputs;
        m.stage_counts = io.counts;
        for (name, bytes) in &io.outputs {
            self.write(name, bytes)?;
            m.outputs.insert(name.clone(), report::sha256_hex(bytes));
        }
        self.write(manifest_name, m.to_json().as_bytes())?;
        Ok(m)
    }

    fn load_histdata(&self, io: &mut StageIo, paths: &[PathBuf]) -> Result<(BarSeries, usize), PipelineError> {
        let mut parts = Vec::with_capacity(paths.len());
        for p in paths {
            let bytes = io.external(p)?;
            let text = String::from_utf8(bytes).map_err(|e| data_err(Some(p), e))?;
            parts.push(market_data::parse_histdata_csv(&text).map_err(|e| data_err(Some(p), e))?);
        }
        let minutes = BarSeries::concat(parts).map_err(|e| data_err(None, format!("joining input files: {e}")))?;
        let n = minutes.len();
        let mut bars = market_data::aggregate(&minutes, self.config.bar_interval, self.config.drop_partial)
            .map_err(|e| data_err(None, e))?;
        bars.symbol = self.config.symbol.clone();
        Ok((bars, n))
    }

    fn read_bars(&self, io: &mut StageIo, name: &str) -> Result<BarSeries, PipelineError> {
        let bytes = io.artifact(name)?;
        market_data::read_bars_csv(&bytes[..], &self.config.symbol, self.config.bar_interval)
            .map_err(|e| data_err(Some(&self.out_dir().join(name)), e))
    }

    fn read_scored(&self, io: &mut StageIo) -> Result<Vec<ScoredPattern>, PipelineError> {
        let bytes = io.artifact(files::SCORED)?;
        artifacts::read_scored_csv(&bytes[..]).map_err(|e| artifact_err(files::SCORED, self.out_dir(), e))
    }

    fn read_library(&self, io: &mut StageIo) -> Result<(FilteredLibrary, FilterSummary), PipelineError> {
        let summary_bytes = io.artifact(files::FILTER_SUMMARY)?;
        let summary: FilterSummary = serde_json::from_slice(&summary_bytes)
            .map_err(|e| data_err(Some(&self.out_dir().join(files::FILTER_SUMMARY)), e))?;
        let bytes = io.artifact(files::FILTERED)?;
        let lib = artifacts::read_filtered_csv(&bytes[..], summary.filter_config(), summary.training_span)
            .map_err(|e| artifact_err(files::FILTERED, self.out_dir(), e))?;
        Ok((lib, summary))
    }

    fn ingest(&self, io: &mut StageIo) -> Result<(), PipelineError> {
        if self.config.train_data.is_empty() {
            return Err(PipelineError::Config("train_data is empty".into()));
        }
        let (train, n) = self.load_histdata(io, &self.config.train_data)?;
        io.count("minute_bars_train", n);
        io.count("bars_train", train.len());
        let mut buf = Vec::new();
        market_data::write_bars_csv(&train, &mut buf).expect("in-memory write");
        io.emit(files::BARS_TRAIN, buf);
        if !self.config.test_data.is_empty() {
            let (test, n) = self.load_histdata(io, &self.config.test_data)?;
            io.count("minute_bars_test", n);
            io.count("bars_test", test.len());
            let mut buf = Vec::new();
            market_data::write_bars_csv(&test, &mut buf).expect("in-memory write");
            io.emit(files::BARS_TEST, buf);
        }
        Ok(())
    }

    fn extract(&self, io: &mut StageIo) -> Result<(), PipelineError> {
        let bars = self.read_bars(io, files::BARS_TRAIN)?;
        let patterns = pattern::extract_patterns(&bars, &self.config.labeling())?;
        let buys = patterns.iter().filter(|p| p.label == Label::Buy).count();
        io.count("patterns_buy", buys);
        io.count("patterns_sell", patterns.len() - buys);
        io.emit(files::PATTERNS_CSV, csv_bytes(|b| artifacts::write_patterns_csv(&patterns, b)));
        io.emit(files::PATTERNS_JSON, artifacts::patterns_to_json(&patterns));
        Ok(())
    }

    fn score(&self, io: &mut StageIo) -> Result<(), PipelineError> {
        let bytes = io.artifact(files::PATTERNS_CSV)?;
        let patterns = artifacts::read_patterns_csv(&bytes[..])
            .map_err(|e| artifact_err(files::PATTERNS_CSV, self.out_dir(), e))?;
        let scored = entropy::score_all(&patterns, &self.config.scoring())?;
        io.count("scored", scored.len());
        io.emit(files::SCORED, csv_bytes(|b| artifacts::write_scored_csv(&scored, b)));
        Ok(())
    }

    /// Span of bars the library was built from: first window start to last horizon end.
    fn training_span(&self, patterns: &[&Pattern]) -> Option<(NaiveDateTime, NaiveDateTime)> {
        let lo = patterns.iter().map(|p| p.origin).min()?;
        let hi = patterns.iter().map(|p| p.origin).max()?;
        let bars = (self.config.window_bars + self.config.horizon_bars) as i64;
        Some((lo, hi + Duration::minutes(bars * i64::from(self.config.bar_interval))))
    }

    fn filter(&self, io: &mut StageIo) -> Result<(), PipelineError> {
        let scored = self.read_scored(io)?;
        let raw: Vec<&Pattern> = scored.iter().map(|s| &s.pattern).collect();
        let (theta, source) = match self.config.theta {
            Some(t) => (t, "fixed".to_string()),
            None => {
                let t = filter::default_theta(&raw, self.config.theta_percentile)?;
                log::info!("theta = {t} ({}th percentile of raw cross-class distances)", self.config.theta_percentile);
                (t, format!("percentile:{}", self.config.theta_percentile))
            }
        };
        let mut lib = filter::filter(&scored, &FilterConfig { theta, scoring: self.config.scoring() })?;
        lib.training_span = self.training_span(&raw);
        let report = filter::verify(&lib);
        if !report.passed {
            let (b, s, d) = report.offending.unwrap_or((0, 0, f64::NAN));
            return Err(PipelineError::Invariant(format!(
                "filtered library has Buy {b} and Sell {s} at distance {d} < theta {theta}"
            )));
        }
        io.count("kept_buy", lib.buys.len());
        io.count("kept_sell", lib.sells.len());
        io.count("rejected", lib.rejected.len());
        io.emit(files::FILTERED, csv_bytes(|b| artifacts::write_filtered_csv(&lib, b)));
        io.emit(files::FILTER_SUMMARY, to_json_pretty(&FilterSummary::new(&lib, &report, source)));
        Ok(())
    }

    fn baseline(&self, io: &mut StageIo) -> Result<(), PipelineError> {
        let scored = self.read_scored(io)?;
        let (lib, _) = self.read_library(io)?;
        // id order keeps the baselines independent of the score ranking
        let mut raw: Vec<&Pattern> = scored.iter().map(|s| &s.pattern).collect();
        raw.sort_by_key(|p| p.id);
        let points: Vec<Vec<f64>> = raw.iter().map(|p| p.features.to_vec()).collect();
        let truth: Vec<Label> = raw.iter().map(|p| p.label).collect();
        let seed = self.config.seed;

        let km = baselines::kmeans(&points, 2, seed)?;
        let gm = baselines::gmm_em(&points, 2, seed)?;
        let balance = baselines::balance_report(&lib, &km.assignment, &gm.assignment, &truth);
        let pca = baselines::pca_project(&points)?;

        let mut admitted: Vec<&Pattern> = lib.admitted().map(|s| &s.pattern).collect();
        admitted.sort_by_key(|p| p.id);
        let index: BTreeMap<u64, usize> = raw.iter().enumerate().map(|(i, p)| (p.id, i)).collect();
        let sub = Projection2D {
            coordinates: admitted
                .iter()
                .map(|p| index.get(&p.id).map(|&i| pca.coordinates[i]))
                .collect::<Option<_>>()
                .ok_or_else(|| PipelineError::Invariant("filtered library holds ids absent from scored.csv".into()))?,
            ..pca.clone()
        };

        let mut clusters = String::from("id,label,kmeans,gmm\n");
        for (i, p) in raw.iter().enumerate() {
            clusters.push_str(&format!(
                "{},{},{},{}\n",
                p.id, p.label, km.assignment.labels[i], gm.assignment.labels[i]
            ));
        }
        let detail = serde_json::json!({
            "methods": balance.rows,
            "kmeans": {
                "iterations": km.assignment.iterations,
                "converged": km.assignment.converged,
                "objective": km.objective_trace.last(),
                "counts": km.assignment.counts(),
            },
            "gmm": {
                "iterations": gm.assignment.iterations,
                "converged": gm.assignment.converged,
                "log_likelihood": gm.log_likelihood_trace.last(),
                "weights": gm.weights,
                "counts": gm.assignment.counts(),
            },
            "pca": {
                "explained_variance": pca.explained_variance,
                "degenerate_rank": pca.degenerate_rank,
                "components": pca.components,
            },
        });
        for r in &balance.rows {
            io.count(&format!("{}_buy", r.method), r.buys);
            io.count(&format!("{}_sell", r.method), r.sells);
        }
        io.emit(files::PROJECTION_RAW, csv_bytes(|b| artifacts::write_projection_csv(&raw, &pca, b)));
        io.emit(files::PROJECTION_FILTERED, csv_bytes(|b| artifacts::write_projection_csv(&admitted, &sub, b)));
        io.emit(files::CLUSTERS, clusters);
        io.emit(files::BALANCE_JSON, to_json_pretty(&detail));
        io.emit(files::BALANCE_TXT, balance.to_text());
        Ok(())
    }

    fn backtest(&self, io: &mut StageIo) -> Result<(), PipelineError> {
        if self.config.test_data.is_empty() {
            return Err(PipelineError::Config("backtest needs test_data".into()));
        }
        let bars = self.read_bars(io, files::BARS_TEST)?;
        let (lib, summary) = self.read_library(io)?;
        let cfg = self.config.backtest(summary.theta);
        if cfg.allow_train_overlap {
            log::warn!("allow_train_overlap is set; test results may be contaminated by training data");
        }
        let main = backtest::run_backtest(&bars, &lib, &cfg)?;
        let sweep = backtest::parameter_sweep(&bars, &lib, &cfg, &self.config.targets, &self.config.stops)?;

        let outcomes = |o: Outcome| main.trades.iter().filter(|t| t.outcome == o).count();
        io.count("trades", main.trades.len());
        io.count("trades_target", outcomes(Outcome::Target));
        io.count("trades_stop", outcomes(Outcome::Stop));
        io.count("trades_end_of_data", outcomes(Outcome::EndOfData));
        io.emit(files::TRADES, csv_bytes(|b| artifacts::write_trades_csv(&main.trades, b)));
        io.emit(files::EQUITY, csv_bytes(|b| artifacts::write_equity_csv(&main.equity, b)));
        let mut cells = Vec::with_capacity(sweep.len());
        for (cell, result) in &sweep {
            let name = format!("equity_T{}_S{}.csv", cell.target, cell.stop);
            io.emit(name.clone(), csv_bytes(|b| artifacts::write_equity_csv(&result.equity, b)));
            cells.push(serde_json::json!({
                "target": cell.target,
                "stop": cell.stop,
                "equity_file": name,
                "summary": cell.summary,
            }));
        }
        let doc = serde_json::json!({
            "match_theta": cfg.match_theta,
            "initial_capital": cfg.initial_capital,
            "point_value": cfg.point_value,
            "main": { "target": cfg.target, "stop": cfg.stop, "summary": main.equity.summary },
            "cells": cells,
        });
        io.emit(files::SWEEP, to_json_pretty(&doc));
        Ok(())
    }

    fn report(&self, io: &mut StageIo) -> Result<(), PipelineError> {
        let scored = self.read_scored(io)?;
        let (lib, _) = self.read_library(io)?;
        let bins = self.config.histogram_bins;
        let side = |pats: &mut dyn Iterator<Item = &Pattern>, label| -> Vec<Vec<f64>> {
            pats.filter(|p| p.label == label).map(|p| p.features.to_vec()).collect()
        };
        let hist = |pats: Vec<&Pattern>, population| {
            if self.config.all_pairs_histogram {
                let all: Vec<Vec<f64>> = pats.iter().map(|p| p.features.to_vec()).collect();
                report::all_pairs_histogram(&all, bins, population)
            } else {
                let buys = side(&mut pats.iter().copied(), Label::Buy);
                let sells = side(&mut pats.iter().copied(), Label::Sell);
                report::cross_distance_histogram(&buys, &sells, bins, population)
            }
        };
        let raw = hist(scored.iter().map(|s| &s.pattern).collect(), Population::Raw)?;
        let filtered = hist(lib.admitted().map(|s| &s.pattern).collect(), Population::Filtered)?;
        let svg = report::histogram_svg(&[(&raw, "raw"), (&filtered, "filtered")], "Pairwise L1 distances");
        io.count("histogram_raw_pairs", raw.samples);
        io.count("histogram_filtered_pairs", filtered.samples);
        io.emit(files::HISTOGRAM_RAW, csv_bytes(|b| artifacts::write_histogram_csv(&raw, b)));
        io.emit(files::HISTOGRAM_FILTERED, csv_bytes(|b| artifacts::write_histogram_csv(&filtered, b)));
        io.emit(files::HISTOGRAM_COMPARISON, to_json_pretty(&HistogramComparison::new(raw, filtered)));
        io.emit(files::HISTOGRAM_SVG, svg);

        let mut bars = self.read_bars(io, files::BARS_TRAIN)?.bars;
        if !self.config.test_data.is_empty() {
            bars.extend(self.read_bars(io, files::BARS_TEST)?.bars);
            bars.sort_by_key(|b| b.timestamp);
            bars.dedup_by_key(|b| b.timestamp);
        }
        let series = BarSeries::new(self.config.symbol.clone(), self.config.bar_interval, bars);
        let vol = report::monthly_volatility(&series, self.config.volatility_std)?;
        for y in &vol.years {
            io.emit(format!("volatility_{}.csv", y.year), csv_bytes(|b| artifacts::write_volatility_csv(y, b)));
        }
        io.count("volatility_months", vol.years.iter().map(|y| y.months.len()).sum());
        io.emit(files::VOLATILITY_SVG, report::volatility_svg(&vol, "Monthly std of opens"));
        io.emit(files::VOLATILITY_JSON, to_json_pretty(&vol));
        Ok(())
    }
}

/// Files written by [`write_fixture`].
pub const FIXTURE_TRAIN: &str = "fixture_train_m1.csv";
pub const FIXTURE_TEST: &str = "fixture_test_m1.csv";
pub const FIXTURE_EVENTS: &str = "fixture_events.csv";
pub const FIXTURE_CONFIG: &str = "config.toml";

/// Training and test specs of the bundled fixture for one seed.
pub fn fixture_specs(seed: u64) -> (BarFixtureSpec, BarFixtureSpec) {
    let train = BarFixtureSpec { seed, ..BarFixtureSpec::default() };
    let test = BarFixtureSpec {
        start: NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date"),
        days: 30,
        seed: seed.wrapping_add(1),
        ..train
    };
    (train, test)
}

/// Writes synthetic histdata files, the planted events, and a config that
/// points at them. Returns the config.
pub fn write_fixture(dir: &Path, seed: u64) -> Result<RunConfig, PipelineError> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::Io { path: dir.to_path_buf(), source: e })?;
    let io = |path: PathBuf| move |e| PipelineError::Io { path, source: e };
    let (train_spec, test_spec) = fixture_specs(seed);
    let mut events = String::from("split,origin_iso8601,kind,direction\n");
    for (split, spec, name) in [("train", &train_spec, FIXTURE_TRAIN), ("test", &test_spec, FIXTURE_TEST)] {
        let (bars, planted) = fixture::synthetic_bars(spec);
        let path = dir.join(name);
        fs::write(&path, fixture::to_histdata_text(&fixture::to_minute_bars(&bars))).map_err(io(path.clone()))?;
        for e in planted {
            events.push_str(&format!(
                "{split},{},{:?},{}\n",
                e.origin.format(market_data::ISO_TS),
                e.kind,
                e.direction
            ));
        }
    }
    let path = dir.join(FIXTURE_EVENTS);
    fs::write(&path, events).map_err(io(path.clone()))?;
    let config = RunConfig {
        train_data: vec![dir.join(FIXTURE_TRAIN)],
        test_data: vec![dir.join(FIXTURE_TEST)],
        symbol: "SYNTH".into(),
        seed,
        out_dir: dir.join("out"),
        ..RunConfig::default()
    };
    let path = dir.join(FIXTURE_CONFIG);
    fs::write(&path, config.to_commented_toml()).map_err(io(path.clone()))?;
    Ok(config)
}
