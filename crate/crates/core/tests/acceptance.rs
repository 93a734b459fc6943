//! Acceptance criteria, one PASS/FAIL line each. Run with
//! `cargo test -p qpattern --test acceptance`.
//!
//! Every expected value here comes from an oracle written in this file
//! (brute force, full sort, closed form, a separate SVD) or from fixed
//! published reference values, never from the code under test.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration as StdDuration, Instant};

use chrono::{Duration, NaiveDate};
use qpattern::artifacts::{self, FilterSummary};
use qpattern::backtest::{self, BacktestConfig, Outcome};
use qpattern::baselines::{self, pca_project};
use qpattern::entropy::{nearest_neighbors, score_all, shannon_entropy, ScoredPattern, ScoringConfig};
use qpattern::filter::{default_theta, filter, verify, FilterConfig, FilteredLibrary};
use qpattern::fixture;
use qpattern::market_data::{BarSeries, OhlcBar};
use qpattern::pattern::{featurize, Label, Pattern, FEATURE_DIM};
use qpattern::pipeline::{self, files, Pipeline, RunConfig};
use qpattern::report::RunManifest;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- oracles

fn oracle_l1(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).abs();
    }
    s
}

/// Brute-force greedy admission over an already ranked list. Returns
/// (admitted Buy ids, admitted Sell ids, (rejected id, first blocker id)).
fn oracle_greedy(ranked: &[ScoredPattern], theta: f64) -> (Vec<u64>, Vec<u64>, Vec<(u64, u64)>) {
    let mut admitted = vec![false; ranked.len()];
    let (mut buys, mut sells, mut rejected) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..ranked.len() {
        let mut blocker = None;
        for j in 0..i {
            let opposite = ranked[j].pattern.label != ranked[i].pattern.label;
            if admitted[j]
                && opposite
                && oracle_l1(&ranked[i].pattern.features, &ranked[j].pattern.features) < theta
            {
                blocker = Some(ranked[j].pattern.id);
                break;
            }
        }
        match blocker {
            Some(b) => rejected.push((ranked[i].pattern.id, b)),
            None => {
                admitted[i] = true;
                match ranked[i].pattern.label {
                    Label::Buy => buys.push(ranked[i].pattern.id),
                    Label::Sell => sells.push(ranked[i].pattern.id),
                }
            }
        }
    }
    (buys, sells, rejected)
}

/// k nearest by a full sort on (distance, id).
fn oracle_knn(q: usize, pts: &[Vec<f64>], ids: &[u64], k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, u64, usize)> =
        (0..pts.len()).filter(|&j| j != q).map(|j| (oracle_l1(&pts[q], &pts[j]), ids[j], j)).collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|t| t.2).collect()
}

fn oracle_entropy(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            p * p.ln()
        })
        .sum::<f64>()
}

fn mean_median(mut v: Vec<f64>) -> (f64, f64) {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    let mean = v.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    (mean, median)
}

fn cross_class(ps: &[&Pattern]) -> Vec<f64> {
    let mut out = Vec::new();
    for b in ps.iter().filter(|p| p.label == Label::Buy) {
        for s in ps.iter().filter(|p| p.label == Label::Sell) {
            out.push(oracle_l1(&b.features, &s.features));
        }
    }
    out
}

/// Singular values of an n x d matrix by one-sided Jacobi rotations.
fn oracle_singular_values(mut a: Vec<Vec<f64>>) -> Vec<f64> {
    let d = a[0].len();
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..d {
            for q in p + 1..d {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for row in &a {
                    alpha += row[p] * row[p];
                    beta += row[q] * row[q];
                    gamma += row[p] * row[q];
                }
                if gamma.abs() <= 1e-300 {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for row in a.iter_mut() {
                    let (x, y) = (row[p], row[q]);
                    row[p] = c * x - s * y;
                    row[q] = s * x + c * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..d).map(|j| a.iter().map(|r| r[j] * r[j]).sum::<f64>().sqrt()).collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
    sv
}

// ---------------------------------------------------------------- helpers

fn random_patterns(rng: &mut ChaCha8Rng, n: usize, grid: f64) -> Vec<Pattern> {
    let t0 = NaiveDate::from_ymd_opt(2022, 3, 7).unwrap().and_hms_opt(0, 0, 0).unwrap();
    // shuffled ids so tie-breaking by id differs from index order
    let mut ids: Vec<u64> = (0..n as u64).map(|i| i * 7 + 3).collect();
    for i in (1..n).rev() {
        ids.swap(i, rng.random_range(0..=i));
    }
    (0..n)
        .map(|i| {
            let mut features = [0.0; FEATURE_DIM];
            for f in features.iter_mut() {
                // coarse integer grid makes exact distance ties common
                *f = (rng.random_range(-3..=3) as f64) * grid;
            }
            Pattern {
                id: ids[i],
                origin: t0 + Duration::minutes(30 * i as i64),
                features,
                label: if rng.random::<bool>() { Label::Buy } else { Label::Sell },
                pnl_raw: 15.0 + rng.random_range(0..4) as f64,
            }
        })
        .collect()
}

fn fixture_run(dir: &Path, seed: u64, edit: impl FnOnce(&mut RunConfig)) -> RunManifest {
    let mut cfg = pipeline::write_fixture(dir, seed).expect("fixture written");
    edit(&mut cfg);
    Pipeline::new(cfg).expect("valid config").run_all().expect("pipeline runs")
}

fn load_outputs(out: &Path) -> (Vec<ScoredPattern>, FilteredLibrary) {
    let scored = artifacts::read_scored_csv(&fs::read(out.join(files::SCORED)).unwrap()[..]).unwrap();
    let summary: FilterSummary =
        serde_json::from_slice(&fs::read(out.join(files::FILTER_SUMMARY)).unwrap()).unwrap();
    let lib = artifacts::read_filtered_csv(
        &fs::read(out.join(files::FILTERED)).unwrap()[..],
        summary.filter_config(),
        summary.training_span,
    )
    .unwrap();
    (scored, lib)
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: StdDuration, budget_s: f64, what: &str) -> Result<(), String> {
    check(elapsed.as_secs_f64() < budget_s, || format!("{what} took {elapsed:?}, budget {budget_s}s"))
}

// ---------------------------------------------------------------- criteria

type Tweak = fn(&mut RunConfig);
type Criterion = fn() -> Result<String, String>;

#[allow(clippy::approx_constant)]
fn entropy_exactness() -> Result<String, String> {
    let cases: [(&[f64], f64, f64); 3] = [
        (&[1.0], 0.0, 0.0),
        (&[0.5, 0.5], std::f64::consts::LN_2, 0.6931472),
        (&[0.8, 0.2], -(0.8f64 * 0.8f64.ln() + 0.2 * 0.2f64.ln()), 0.5004024),
    ];
    let mut worst = 0.0f64;
    for (p, exact, quoted) in cases {
        let h = shannon_entropy(p).map_err(|e| e.to_string())?;
        worst = worst.max((h - exact).abs());
        check((h - exact).abs() < 1e-9, || format!("H({p:?}) = {h}, expected {exact}"))?;
        // reference values are rounded to 7 decimals
        check((h - quoted).abs() < 5e-8, || format!("H({p:?}) = {h}, quoted {quoted}"))?;
    }
    Ok(format!("max error {worst:.1e}"))
}

fn filter_guarantee() -> Result<String, String> {
    let mut runs = 0;
    let mut check_lib = |lib: &FilteredLibrary, what: &str| -> Result<(), String> {
        let r = verify(lib);
        let mut min = f64::INFINITY;
        for b in &lib.buys {
            for s in &lib.sells {
                min = min.min(oracle_l1(&b.pattern.features, &s.pattern.features));
            }
        }
        runs += 1;
        check(r.passed && min >= lib.config.theta, || {
            format!("{what}: verify={} min={min} theta={}", r.passed, lib.config.theta)
        })
    };

    let variants: [(&str, Tweak); 5] = [
        ("default", |_| {}),
        ("standardize", |c| c.standardize = true),
        ("normalize_ig", |c| c.normalize_ig = true),
        ("alpha=0", |c| c.alpha = 0.0),
        ("theta=40", |c| c.theta = Some(40.0)),
    ];
    for seed in [7, 11] {
        for (name, edit) in variants {
            let dir = tempfile::tempdir().unwrap();
            fixture_run(dir.path(), seed, edit);
            let (_, lib) = load_outputs(&dir.path().join("out"));
            check_lib(&lib, &format!("fixture seed {seed} {name}"))?;
        }
    }
    for seed in 0..3 {
        for pats in [fixture::skew_fixture(seed), fixture::mixed_region_fixture(seed)] {
            let scored = score_all(&pats, &ScoringConfig::default()).map_err(|e| e.to_string())?;
            let refs: Vec<&Pattern> = pats.iter().collect();
            let theta = default_theta(&refs, 5.0).map_err(|e| e.to_string())?;
            let lib = filter(&scored, &FilterConfig { theta, scoring: ScoringConfig::default() })
                .map_err(|e| e.to_string())?;
            check_lib(&lib, &format!("cluster fixture seed {seed}"))?;
        }
    }

    // timing at n ~ 1200 with a small theta so both sides stay large
    let big: Vec<Pattern> = {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut p = random_patterns(&mut rng, 1200, 1.0);
        for (i, x) in p.iter_mut().enumerate() {
            x.id = i as u64;
        }
        p
    };
    let scored = score_all(&big, &ScoringConfig::default()).map_err(|e| e.to_string())?;
    let lib = filter(&scored, &FilterConfig { theta: 1.0, scoring: ScoringConfig::default() })
        .map_err(|e| e.to_string())?;
    let t = Instant::now();
    let r = verify(&lib);
    let el = t.elapsed();
    check(r.passed, || "n=1200 library failed verify".into())?;
    within(el, 1.0, "verify at n=1200")?;
    Ok(format!("{runs} libraries verified; verify({}x{}) in {el:?}", lib.buys.len(), lib.sells.len()))
}

fn greedy_oracle() -> Result<String, String> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut admitted_total = 0;
    let mut rejected_total = 0;
    for case in 0..200 {
        let n = rng.random_range(2..=20);
        let pats = random_patterns(&mut rng, n, 0.5);
        let k = rng.random_range(1..n);
        let cfg = ScoringConfig { k, alpha: rng.random_range(0..=4) as f64 / 4.0, ..Default::default() };
        let scored = score_all(&pats, &cfg).map_err(|e| e.to_string())?;
        // independent re-ranking by the documented key
        let mut ranked = scored.clone();
        ranked.sort_by(|a, b| {
            b.score.partial_cmp(&a.score).unwrap().then(a.h_local.partial_cmp(&b.h_local).unwrap()).then(a.pattern.id.cmp(&b.pattern.id))
        });
        check(ranked == scored, || format!("case {case}: ranking differs"))?;
        // thresholds drawn from the actual distance set hit the `<` boundary exactly
        let d = oracle_l1(&pats[0].features, &pats[n - 1].features);
        let theta = match rng.random_range(0..3) {
            0 => d.max(0.5),
            1 => rng.random_range(1..30) as f64 * 0.5,
            _ => 1e6,
        };
        let lib = filter(&scored, &FilterConfig { theta, scoring: cfg }).map_err(|e| e.to_string())?;
        let (ob, os, orj) = oracle_greedy(&scored, theta);
        let pb: Vec<u64> = lib.buys.iter().map(|s| s.pattern.id).collect();
        let ps: Vec<u64> = lib.sells.iter().map(|s| s.pattern.id).collect();
        let pr: Vec<(u64, u64)> = lib.rejected.iter().map(|r| (r.pattern.pattern.id, r.blocked_by)).collect();
        check(pb == ob && ps == os && pr == orj, || {
            format!("case {case} (n={n}, theta={theta}): production {pb:?}/{ps:?}/{pr:?} vs oracle {ob:?}/{os:?}/{orj:?}")
        })?;
        admitted_total += ob.len() + os.len();
        rejected_total += orj.len();
    }
    within(t.elapsed(), 5.0, "greedy oracle")?;
    Ok(format!("200 instances, {admitted_total} admitted, {rejected_total} rejected, {:?}", t.elapsed()))
}

fn knn_oracle() -> Result<String, String> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut queries = 0;
    for case in 0..50 {
        let n = rng.random_range(2..=200);
        let pats = random_patterns(&mut rng, n, 1.0);
        let k = rng.random_range(1..n).min(25 + rng.random_range(0..3));
        let pts: Vec<Vec<f64>> = pats.iter().map(|p| p.features.to_vec()).collect();
        let refs: Vec<&[f64]> = pts.iter().map(|v| &v[..]).collect();
        let ids: Vec<u64> = pats.iter().map(|p| p.id).collect();
        for q in 0..n {
            let got = nearest_neighbors(q, &refs, &ids, k).map_err(|e| e.to_string())?;
            let want = oracle_knn(q, &pts, &ids, k);
            check(got == want, || format!("case {case} query {q}: {got:?} vs {want:?}"))?;
            queries += 1;
        }
        // local entropies seen by the scorer agree with the oracle neighborhoods
        let scored = score_all(&pats, &ScoringConfig { k, ..Default::default() }).map_err(|e| e.to_string())?;
        let by_id: BTreeMap<u64, f64> = scored.iter().map(|s| (s.pattern.id, s.h_local)).collect();
        for q in 0..n {
            let nn = oracle_knn(q, &pts, &ids, k);
            let buys = nn.iter().filter(|&&j| pats[j].label == Label::Buy).count();
            let h = oracle_entropy(&[buys, k - buys]);
            check((by_id[&pats[q].id] - h).abs() < 1e-12, || format!("case {case} query {q}: h_local mismatch"))?;
        }
    }
    within(t.elapsed(), 10.0, "k-NN oracle")?;
    Ok(format!("50 instances, {queries} neighborhoods, {:?}", t.elapsed()))
}

fn histogram_direction() -> Result<String, String> {
    let mut lines = Vec::new();
    for seed in [7, 1, 2] {
        let t = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        fixture_run(dir.path(), seed, |_| {});
        let out = dir.path().join("out");
        let (scored, lib) = load_outputs(&out);
        let raw: Vec<&Pattern> = scored.iter().map(|s| &s.pattern).collect();
        let kept: Vec<&Pattern> = lib.admitted().map(|s| &s.pattern).collect();
        let (rm, rmed) = mean_median(cross_class(&raw));
        let (fm, fmed) = mean_median(cross_class(&kept));
        check(fm > rm && fmed > rmed, || {
            format!("seed {seed}: mean {rm} -> {fm}, median {rmed} -> {fmed}")
        })?;
        // the report artifact states the same deltas
        let cmp: serde_json::Value =
            serde_json::from_slice(&fs::read(out.join(files::HISTOGRAM_COMPARISON)).unwrap()).unwrap();
        let md = cmp["mean_delta"].as_f64().unwrap();
        let medd = cmp["median_delta"].as_f64().unwrap();
        check((md - (fm - rm)).abs() < 1e-9 * rm && (medd - (fmed - rmed)).abs() < 1e-9 * rmed, || {
            format!("seed {seed}: report deltas {md}/{medd} vs oracle {}/{}", fm - rm, fmed - rmed)
        })?;
        within(t.elapsed(), 10.0, &format!("seed {seed} fixture run"))?;
        lines.push(format!("seed {seed}: mean {rm:.2}->{fm:.2}, median {rmed:.2}->{fmed:.2}"));
    }
    Ok(lines.join("; "))
}

fn balance_contrast() -> Result<String, String> {
    let t = Instant::now();
    let mut lines = Vec::new();
    for seed in [1, 2, 3] {
        let pats = fixture::skew_fixture(seed);
        let scored = score_all(&pats, &ScoringConfig::default()).map_err(|e| e.to_string())?;
        let refs: Vec<&Pattern> = pats.iter().collect();
        let theta = default_theta(&refs, 5.0).map_err(|e| e.to_string())?;
        let lib = filter(&scored, &FilterConfig { theta, scoring: ScoringConfig::default() })
            .map_err(|e| e.to_string())?;
        let pts: Vec<Vec<f64>> = pats.iter().map(|p| p.features.to_vec()).collect();
        let truth: Vec<Label> = pats.iter().map(|p| p.label).collect();
        let km = baselines::kmeans(&pts, 2, seed).map_err(|e| e.to_string())?;
        let gm = baselines::gmm_em(&pts, 2, seed).map_err(|e| e.to_string())?;

        // majority-vote mapping, recomputed here
        let ratio_of = |labels: &[usize]| {
            let mut votes = [[0usize; 2]; 2];
            for (c, l) in labels.iter().zip(&truth) {
                votes[*c][(*l == Label::Sell) as usize] += 1;
            }
            let (mut b, mut s) = (0, 0);
            for v in votes {
                if v[0] >= v[1] {
                    b += v[0] + v[1];
                } else {
                    s += v[0] + v[1];
                }
            }
            b.min(s) as f64 / b.max(s).max(1) as f64
        };
        let e = lib.buys.len().min(lib.sells.len()) as f64 / lib.buys.len().max(lib.sells.len()) as f64;
        let k = ratio_of(&km.assignment.labels);
        let g = ratio_of(&gm.assignment.labels);
        let report = baselines::balance_report(&lib, &km.assignment, &gm.assignment, &truth);
        check(report.row("kmeans").unwrap().ratio == k && report.row("gmm").unwrap().ratio == g, || {
            format!("seed {seed}: report ratios disagree with majority-vote oracle")
        })?;
        check(e > k && e > g, || format!("seed {seed}: entropy {e:.3} vs kmeans {k:.3}, gmm {g:.3}"))?;
        lines.push(format!("seed {seed}: entropy {e:.3} > kmeans {k:.3}, gmm {g:.3}"));
    }
    within(t.elapsed(), 30.0, "balance contrast")?;
    Ok(lines.join("; "))
}

fn baseline_numerics() -> Result<String, String> {
    let t = Instant::now();
    let mut datasets: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
    for seed in 0..3 {
        let pts = fixture::skew_fixture(seed).iter().map(|p| p.features.to_vec()).collect();
        datasets.push((format!("skew{seed}"), pts));
        let pts = fixture::mixed_region_fixture(seed).iter().map(|p| p.features.to_vec()).collect();
        datasets.push((format!("mixed{seed}"), pts));
    }
    let (series, _) = fixture::synthetic_bars(&fixture::BarFixtureSpec { days: 20, ..Default::default() });
    let pats = qpattern::extract_patterns(&series, &Default::default()).map_err(|e| e.to_string())?;
    datasets.push(("bars".into(), pats.iter().map(|p| p.features.to_vec()).collect()));

    let mut worst_em_drop = 0.0f64;
    let mut worst_degenerate_drop = 0.0f64;
    for (name, pts) in &datasets {
        // bar features satisfy H-L = (H-O) + (O-L), so their covariance is
        // rank-deficient and the ridge, not the data, sets 8 of 32 variances
        let rank_deficient = name == "bars";
        for seed in 0..3 {
            let km = baselines::kmeans(pts, 2, seed).map_err(|e| e.to_string())?;
            for w in km.objective_trace.windows(2) {
                check(w[1] <= w[0], || format!("{name}/{seed}: k-means objective rose {} -> {}", w[0], w[1]))?;
            }
            let gm = baselines::gmm_em(pts, 2, seed).map_err(|e| format!("{name}: {e}"))?;
            for w in gm.log_likelihood_trace.windows(2) {
                let slack = if rank_deficient { 1e-9 * w[0].abs().max(1.0) } else { 1e-9 };
                if rank_deficient {
                    worst_degenerate_drop = worst_degenerate_drop.max(w[0] - w[1]);
                } else {
                    worst_em_drop = worst_em_drop.max(w[0] - w[1]);
                }
                check(w[1] >= w[0] - slack, || {
                    format!("{name}/{seed}: log-likelihood fell {} -> {}", w[0], w[1])
                })?;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_orth = 0.0f64;
    let mut worst_resid = 0.0f64;
    for case in 0..20 {
        let n = rng.random_range(3..=50);
        let scales: Vec<f64> = (0..FEATURE_DIM).map(|i| 4.0 / (1.0 + i as f64)).collect();
        let pts: Vec<Vec<f64>> =
            (0..n).map(|_| scales.iter().map(|s| s * (rng.random::<f64>() - 0.5) * 2.0 + 1.0).collect()).collect();
        let proj = pca_project(&pts).map_err(|e| e.to_string())?;
        let c = &proj.components;
        for (a, b, want) in [(0, 0, 1.0), (1, 1, 1.0), (0, 1, 0.0)] {
            let dot: f64 = c[a].iter().zip(&c[b]).map(|(x, y)| x * y).sum();
            worst_orth = worst_orth.max((dot - want).abs());
        }
        check(worst_orth < 1e-9, || format!("case {case}: components not orthonormal ({worst_orth:e})"))?;

        let mean: Vec<f64> = (0..FEATURE_DIM).map(|j| pts.iter().map(|p| p[j]).sum::<f64>() / n as f64).collect();
        let centered: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().zip(&mean).map(|(x, m)| x - m).collect()).collect();
        let sv = oracle_singular_values(centered);
        let want: f64 = sv.iter().skip(2).map(|s| s * s).sum();
        let got: f64 = pts
            .iter()
            .zip(&proj.coordinates)
            .map(|(p, &xy)| proj.reconstruct(xy).iter().zip(p).map(|(r, x)| (r - x) * (r - x)).sum::<f64>())
            .sum();
        worst_resid = worst_resid.max((got - want).abs());
        check((got - want).abs() < 1e-8, || format!("case {case} (n={n}): residual {got} vs oracle {want}"))?;
    }
    within(t.elapsed(), 10.0, "baseline numerics")?;
    Ok(format!(
        "{} datasets; max EM drop {:.1e} (full rank, abs 1e-9), {worst_degenerate_drop:.1e} (rank-deficient, rel 1e-9); \
         orthonormality err {worst_orth:.1e}; residual err {worst_resid:.1e}",
        datasets.len(),
        worst_em_drop.max(0.0)
    ))
}

fn backtest_accounting() -> Result<String, String> {
    let dir = tempfile::tempdir().unwrap();
    let cfg = pipeline::write_fixture(dir.path(), 7).unwrap();
    Pipeline::new(cfg.clone()).unwrap().run_all().map_err(|e| e.to_string())?;
    let (_, lib) = load_outputs(&cfg.out_dir);
    let test_bars = qpattern::market_data::read_bars_csv(
        &fs::read(cfg.out_dir.join(files::BARS_TEST)).unwrap()[..],
        "SYNTH",
        30,
    )
    .unwrap();
    let t = Instant::now();

    // exact accounting on every sweep cell, under two point values and a cost
    let mut cells = 0;
    let mut trades_seen = 0;
    let mut both_breach = 0;
    for (pv, cost) in [(1.0, 0.0), (2.5, 0.3)] {
        let base = BacktestConfig { match_theta: lib.config.theta, point_value: pv, cost_per_trade: cost, ..Default::default() };
        let sweep = backtest::parameter_sweep(&test_bars, &lib, &base, &[10.0, 15.0, 20.0], &[10.0, 15.0, 20.0])
            .map_err(|e| e.to_string())?;
        for (cell, res) in &sweep {
            let mut expect = base.initial_capital;
            for tr in &res.trades {
                expect += tr.pnl * pv;
            }
            check(res.equity.summary.final_equity == expect, || {
                format!("T{} S{}: final {} vs {}", cell.target, cell.stop, res.equity.summary.final_equity, expect)
            })?;
            check(res.trades.iter().any(|t| t.outcome == Outcome::Target), || "no target hits at all".into())?;
            for tr in &res.trades {
                let i = test_bars.bars.iter().position(|b| b.timestamp + Duration::minutes(30) == tr.exit_time).unwrap();
                let b = &test_bars.bars[i];
                let (tp, sl) = match tr.direction {
                    Label::Buy => (b.high >= tr.entry_price + cell.target, b.low <= tr.entry_price - cell.stop),
                    Label::Sell => (b.low <= tr.entry_price - cell.target, b.high >= tr.entry_price + cell.stop),
                };
                if tp && sl && tr.outcome != Outcome::EndOfData {
                    both_breach += 1;
                    check(tr.outcome == Outcome::Stop, || format!("both-breach bar at {} not a Stop", b.timestamp))?;
                }
            }
            trades_seen += res.trades.len();
            cells += 1;
        }
    }

    // no lookahead: rewrite everything from bar c on; entries decided at or
    // before c are unchanged
    let free = BacktestConfig { match_theta: lib.config.theta, one_open_trade: false, ..Default::default() };
    let original = backtest::run_backtest(&test_bars, &lib, &free).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for c in [300usize, 700, 1100] {
        let mut shifted = test_bars.clone();
        for b in shifted.bars.iter_mut().skip(c) {
            let o = b.open + rng.random_range(-50.0..50.0);
            let cl = o + rng.random_range(-5.0..5.0);
            *b = OhlcBar { open: o, close: cl, high: o.max(cl) + 1.0, low: o.min(cl) - 1.0, ..*b };
        }
        let other = backtest::run_backtest(&shifted, &lib, &free).map_err(|e| e.to_string())?;
        let cut = test_bars.bars[c].timestamp;
        let entries = |r: &backtest::BacktestResult| -> Vec<(chrono::NaiveDateTime, Label, u64)> {
            let mut v: Vec<_> = r.trades.iter().filter(|t| t.entry_time <= cut).map(|t| (t.entry_time, t.direction, t.matched_id)).collect();
            v.sort();
            v
        };
        check(entries(&original) == entries(&other), || format!("entries before bar {c} changed"))?;
        check(!entries(&original).is_empty(), || format!("no entries before bar {c}"))?;
    }

    // hand-built both-breach bar
    let t0 = NaiveDate::from_ymd_opt(2024, 6, 3).unwrap().and_hms_opt(0, 0, 0).unwrap();
    let mut bars: Vec<OhlcBar> = (0..8)
        .map(|i| {
            let o = 100.0 + i as f64;
            OhlcBar { timestamp: t0 + Duration::minutes(30 * i), open: o, high: o + 1.5, low: o - 0.5, close: o + 1.0 }
        })
        .collect();
    bars.push(OhlcBar { timestamp: t0 + Duration::minutes(240), open: 108.0, high: 130.0, low: 90.0, close: 109.0 });
    let series = BarSeries::new("T", 30, bars);
    let window = featurize(&series.bars[..8]).unwrap();
    let planted = ScoredPattern {
        pattern: Pattern { id: 1, origin: t0 - Duration::days(400), features: window, label: Label::Buy, pnl_raw: 20.0 },
        h_local: 0.0,
        info_gain: 0.0,
        pnl_norm: 1.0,
        score: 1.0,
    };
    let one = filter(&[planted], &FilterConfig { theta: 1.0, scoring: ScoringConfig::default() }).unwrap();
    let r = backtest::run_backtest(&series, &one, &BacktestConfig::default()).map_err(|e| e.to_string())?;
    check(r.trades.len() == 1 && r.trades[0].outcome == Outcome::Stop && r.trades[0].pnl == -15.0, || {
        format!("hand-built both-breach: {:?}", r.trades)
    })?;
    let opt = BacktestConfig { optimistic_fills: true, ..Default::default() };
    let r = backtest::run_backtest(&series, &one, &opt).map_err(|e| e.to_string())?;
    check(r.trades[0].outcome == Outcome::Target, || "optimistic fill did not flip the tie".into())?;

    within(t.elapsed(), 5.0, "backtest accounting")?;
    Ok(format!("{cells} cells, {trades_seen} trades, {both_breach} both-breach exits, 3 shift cut points"))
}

fn determinism() -> Result<String, String> {
    let t = Instant::now();
    let data = tempfile::tempdir().unwrap();
    let base = pipeline::write_fixture(data.path(), 7).unwrap();
    let mut dirs = Vec::new();
    for (i, stamp) in ["2026-01-01T00:00:00Z", "2026-06-30T12:34:56Z"].iter().enumerate() {
        let out = data.path().join(format!("run{i}"));
        let mut p = Pipeline::new(RunConfig { out_dir: out.clone(), ..base.clone() }).unwrap();
        p.created_at = Some(stamp.to_string());
        p.run_all().map_err(|e| e.to_string())?;
        dirs.push(out);
    }
    let names = |d: &Path| -> Vec<String> {
        let mut v: Vec<String> = fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        v.sort();
        v
    };
    let (a, b) = (names(&dirs[0]), names(&dirs[1]));
    check(a == b, || format!("file sets differ: {a:?} vs {b:?}"))?;
    let mut manifests = 0;
    for name in &a {
        let x = fs::read(dirs[0].join(name)).unwrap();
        let y = fs::read(dirs[1].join(name)).unwrap();
        if name.starts_with("manifest") {
            let mx: RunManifest = serde_json::from_slice(&x).unwrap();
            let my: RunManifest = serde_json::from_slice(&y).unwrap();
            check(mx.created_at != my.created_at, || "clock field did not vary".into())?;
            check(mx.without_clock() == my.without_clock(), || format!("{name} differs beyond the clock"))?;
            manifests += 1;
        } else {
            check(x == y, || format!("{name} differs"))?;
        }
    }
    Ok(format!("{} artifacts identical, {manifests} manifests equal modulo clock, {:?}", a.len() - manifests, t.elapsed()))
}

fn main() {
    let criteria: [(&str, Criterion); 9] = [
        ("entropy exactness", entropy_exactness),
        ("filter guarantee", filter_guarantee),
        ("greedy oracle", greedy_oracle),
        ("k-NN oracle", knn_oracle),
        ("distance histogram direction", histogram_direction),
        ("balance contrast", balance_contrast),
        ("EM/k-means/PCA numerics", baseline_numerics),
        ("backtest accounting", backtest_accounting),
        ("determinism", determinism),
    ];
    let filter_arg: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (name, f) in criteria {
        if filter_arg.as_deref().is_some_and(|s| !name.contains(s)) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match result {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
