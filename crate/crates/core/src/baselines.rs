//! Geometric clustering baselines and a 2-D projection for comparison plots.
//!
//! Everything here works on plain row slices (`&[Vec<f64>]`) of any width;
//! pattern features are 32 wide.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filter::FilteredLibrary;
use crate::linalg::{dot, sq_euclidean, symmetric_eigen, Cholesky};
use crate::pattern::Label;

pub const KMEANS_MAX_ITER: usize = 300;
pub const EM_MAX_ITER: usize = 200;
pub const EM_TOL: f64 = 1e-6;
pub const COVARIANCE_RIDGE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("rows have inconsistent widths")]
    RaggedInput,
    #[error("covariance of component {component} is singular even after ridge")]
    SingularCovariance { component: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
}

impl ClusterAssignment {
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.centers.len()];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub assignment: ClusterAssignment,
    /// Sum of squared distances after each assignment step.
    pub objective_trace: Vec<f64>,
}

impl KMeansResult {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().unwrap_or(&0.0)
    }
}

fn check_rows(points: &[Vec<f64>], needed: usize) -> Result<usize, BaselineError> {
    if points.len() < needed {
        return Err(BaselineError::TooFewPoints { needed, got: points.len() });
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(BaselineError::RaggedInput);
    }
    Ok(d)
}

fn nearest_center(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    centers
        .iter()
        .enumerate()
        .map(|(j, c)| (j, sq_euclidean(p, c)))
        .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    while centers.len() < k {
        let weights: Vec<f64> = points.iter().map(|p| nearest_center(p, &centers).1).collect();
        let next = match WeightedIndex::new(&weights) {
            Ok(dist) => dist.sample(rng),
            // every point already coincides with a center
            Err(_) => rng.random_range(0..points.len()),
        };
        centers.push(points[next].clone());
    }
    centers
}

/// Lloyd iterations from a k-means++ start.
///
/// Stops once assignments repeat or after [`KMEANS_MAX_ITER`] rounds. An empty
/// cluster is re-seeded at the point farthest from its current center.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64) -> Result<KMeansResult, BaselineError> {
    let d = check_rows(points, k.max(1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_init(points, k, &mut rng);
    let mut labels: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < KMEANS_MAX_ITER {
        iterations += 1;
        let (next, dists): (Vec<usize>, Vec<f64>) =
            points.iter().map(|p| nearest_center(p, &centers)).unzip();
        trace.push(dists.iter().sum());
        if next == labels {
            converged = true;
            break;
        }
        labels = next;

        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let (far, dist) = points
                    .iter()
                    .zip(&labels)
                    .map(|(p, &l)| sq_euclidean(p, &centers[l]))
                    .enumerate()
                    .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
                if dist > 0.0 {
                    centers[j] = points[far].clone();
                }
            }
        }
    }
    Ok(KMeansResult {
        assignment: ClusterAssignment { labels, centers, iterations, converged },
        objective_trace: trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmResult {
    pub assignment: ClusterAssignment,
    pub weights: Vec<f64>,
    /// Row-major `d x d` covariance per component.
    pub covariances: Vec<Vec<f64>>,
    pub log_likelihood_trace: Vec<f64>,
}

struct Component {
    weight: f64,
    mean: Vec<f64>,
    cov: Vec<f64>,
    chol: Cholesky,
}

fn m_step(
    points: &[Vec<f64>],
    resp: &[Vec<f64>],
    k: usize,
    d: usize,
) -> Result<Vec<Component>, BaselineError> {
    let n = points.len() as f64;
    (0..k)
        .map(|j| {
            let nk: f64 = resp.iter().map(|r| r[j]).sum();
            if !(nk > 1e-12) {
                return Err(BaselineError::SingularCovariance { component: j });
            }
            let mut mean = vec![0.0; d];
            for (p, r) in points.iter().zip(resp) {
                for (m, v) in mean.iter_mut().zip(p) {
                    *m += r[j] * v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= nk);
            let mut cov = vec![0.0; d * d];
            for (p, r) in points.iter().zip(resp) {
                let w = r[j];
                if w == 0.0 {
                    continue;
                }
                for a in 0..d {
                    let da = p[a] - mean[a];
                    for b in 0..=a {
                        cov[a * d + b] += w * da * (p[b] - mean[b]);
                    }
                }
            }
            for a in 0..d {
                for b in 0..=a {
                    let v = cov[a * d + b] / nk;
                    cov[a * d + b] = v;
                    cov[b * d + a] = v;
                }
                cov[a * d + a] += COVARIANCE_RIDGE;
            }
            let chol = Cholesky::new(&cov, d).ok_or(BaselineError::SingularCovariance { component: j })?;
            Ok(Component { weight: nk / n, mean, cov, chol })
        })
        .collect()
}

/// Responsibilities and total log-likelihood under the current components.
fn e_step(points: &[Vec<f64>], comps: &[Component]) -> (Vec<Vec<f64>>, f64) {
    let d = points[0].len() as f64;
    let norm = d * (2.0 * std::f64::consts::PI).ln();
    let consts: Vec<f64> = comps.iter().map(|c| c.weight.ln() - 0.5 * (norm + c.chol.log_det())).collect();
    let mut ll = 0.0;
    let resp = points
        .iter()
        .map(|p| {
            let logs: Vec<f64> = comps
                .iter()
                .zip(&consts)
                .map(|(c, k)| {
                    let diff: Vec<f64> = p.iter().zip(&c.mean).map(|(x, m)| x - m).collect();
                    k - 0.5 * c.chol.mahalanobis_sq(&diff)
                })
                .collect();
            let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = top + logs.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
            ll += lse;
            logs.iter().map(|l| (l - lse).exp()).collect()
        })
        .collect();
    (resp, ll)
}

/// EM for a full-covariance Gaussian mixture, started from k-means with the
/// same seed. Hard labels take the most responsible component.
pub fn gmm_em(points: &[Vec<f64>], components: usize, seed: u64) -> Result<GmmResult, BaselineError> {
    let d = check_rows(points, 2 * components.max(1))?;
    let km = kmeans(points, components, seed)?;
    let mut resp: Vec<Vec<f64>> = km
        .assignment
        .labels
        .iter()
        .map(|&l| (0..components).map(|j| if j == l { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut comps = m_step(points, &resp, components, d)?;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < EM_MAX_ITER {
        iterations += 1;
        let (r, ll) = e_step(points, &comps);
        resp = r;
        let improved = trace.last().map(|prev: &f64| ll - prev);
        trace.push(ll);
        if improved.is_some_and(|gain| gain < EM_TOL) {
            converged = true;
            break;
        }
        comps = m_step(points, &resp, components, d)?;
    }

    let labels = resp
        .iter()
        .map(|r| r.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b }).0)
        .collect();
    Ok(GmmResult {
        assignment: ClusterAssignment {
            labels,
            centers: comps.iter().map(|c| c.mean.clone()).collect(),
            iterations,
            converged,
        },
        weights: comps.iter().map(|c| c.weight).collect(),
        covariances: comps.into_iter().map(|c| c.cov).collect(),
        log_likelihood_trace: trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    pub coordinates: Vec<[f64; 2]>,
    pub explained_variance: [f64; 2],
    pub components: [Vec<f64>; 2],
    pub mean: Vec<f64>,
    /// Second singular value below `1e-12` of the first.
    pub degenerate_rank: bool,
}

impl Projection2D {
    /// Maps a 2-D coordinate back into feature space.
    pub fn reconstruct(&self, coord: [f64; 2]) -> Vec<f64> {
        self.mean
            .iter()
            .enumerate()
            .map(|(i, m)| m + coord[0] * self.components[0][i] + coord[1] * self.components[1][i])
            .collect()
    }
}

/// Top-two principal directions from the covariance eigen-decomposition.
///
/// Each component is sign-flipped so its largest-magnitude entry is positive.
pub fn pca_project(points: &[Vec<f64>]) -> Result<Projection2D, BaselineError> {
    let d = check_rows(points, 3)?;
    if d < 2 {
        return Err(BaselineError::RaggedInput);
    }
    let n = points.len() as f64;
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let centered: Vec<Vec<f64>> =
        points.iter().map(|p| p.iter().zip(&mean).map(|(x, m)| x - m).collect()).collect();
    let mut cov = vec![0.0; d * d];
    for row in &centered {
        for a in 0..d {
            for b in 0..=a {
                cov[a * d + b] += row[a] * row[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..=a {
            cov[a * d + b] /= n;
            cov[b * d + a] = cov[a * d + b];
        }
    }
    let (vals, mut vecs) = symmetric_eigen(&cov, d);
    for v in vecs.iter_mut().take(2) {
        let (imax, _) = v
            .iter()
            .enumerate()
            .fold((0, -1.0), |b, (i, x)| if x.abs() > b.1 { (i, x.abs()) } else { b });
        if v[imax] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    let total: f64 = vals.iter().map(|v| v.max(0.0)).sum();
    let frac = |v: f64| if total > 0.0 { (v.max(0.0) / total).clamp(0.0, 1.0) } else { 0.0 };
    let (l0, l1) = (vals[0].max(0.0), vals[1].max(0.0));
    let degenerate_rank = l1 <= 1e-12 * l0;
    if degenerate_rank {
        log::warn!("PCA: second singular value is negligible; data is effectively rank one");
    }
    let components = [vecs[0].clone(), vecs[1].clone()];
    let coordinates = centered.iter().map(|r| [dot(r, &components[0]), dot(r, &components[1])]).collect();
    Ok(Projection2D {
        coordinates,
        explained_variance: [frac(vals[0]), frac(vals[1])],
        components,
        mean,
        degenerate_rank,
    })
}

pub fn balance_ratio(a: usize, b: usize) -> f64 {
    let (lo, hi) = (a.min(b), a.max(b));
    if hi == 0 {
        0.0
    } else {
        lo as f64 / hi as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub method: String,
    pub buys: usize,
    pub sells: usize,
    pub ratio: f64,
}

impl BalanceRow {
    pub fn new(method: impl Into<String>, buys: usize, sells: usize) -> Self {
        BalanceRow { method: method.into(), buys, sells, ratio: balance_ratio(buys, sells) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub rows: Vec<BalanceRow>,
}

impl BalanceReport {
    pub fn row(&self, method: &str) -> Option<&BalanceRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{:<10} {:>7} {:>7} {:>7}\n", "method", "buys", "sells", "ratio");
        for r in &self.rows {
            s.push_str(&format!("{:<10} {:>7} {:>7} {:>7.3}\n", r.method, r.buys, r.sells, r.ratio));
        }
        s
    }
}

/// Buy/Sell counts for a clustering, mapping each cluster to the majority
/// true label of its members (ties go to Buy).
pub fn majority_counts(assignment: &ClusterAssignment, truth: &[Label]) -> (usize, usize) {
    let k = assignment.centers.len();
    let mut votes = vec![[0usize; 2]; k];
    for (&c, &l) in assignment.labels.iter().zip(truth) {
        votes[c][l as usize] += 1;
    }
    votes.iter().fold((0, 0), |(b, s), v| {
        let size = v[0] + v[1];
        if v[0] >= v[1] {
            (b + size, s)
        } else {
            (b, s + size)
        }
    })
}

pub fn balance_report(
    entropy_lib: &FilteredLibrary,
    km: &ClusterAssignment,
    gm: &ClusterAssignment,
    truth: &[Label],
) -> BalanceReport {
    let (kb, ks) = majority_counts(km, truth);
    let (gb, gs) = majority_counts(gm, truth);
    BalanceReport {
        rows: vec![
            BalanceRow::new("entropy", entropy_lib.buys.len(), entropy_lib.sells.len()),
            BalanceRow::new("kmeans", kb, ks),
            BalanceRow::new("gmm", gb, gs),
        ],
    }
}
