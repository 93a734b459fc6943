//! Small descriptive-statistics helpers shared by the report and filter code.

use serde::{Deserialize, Serialize};

/// Linear-interpolation quantile (the "type 7" rule) over sorted data.
/// `q` is clamped to [0, 1]; `sorted` must be non-empty.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let q = q.clamp(0.0, 1.0);
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Exact median by selection; averages the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty data");
    let mut v = values.to_vec();
    let n = v.len();
    let mid = n / 2;
    let (_, upper, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lower + upper) / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdMode {
    #[default]
    Population,
    Sample,
}

/// Standard deviation; the sample form of a single value is 0.
pub fn std_dev(values: &[f64], mode: StdMode) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m).powi(2)).sum();
    let denom = match mode {
        StdMode::Population => n as f64,
        StdMode::Sample if n > 1 => (n - 1) as f64,
        StdMode::Sample => return 0.0,
    };
    (ss / denom).sqrt()
}
