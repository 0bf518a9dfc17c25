//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any fails.

use std::time::{Duration, Instant};

use bounded_diffusion::extremes::{self, BoundaryInfo, GevFitOptions};
use bounded_diffusion::npestim::{self, TransitionPairs};
use bounded_diffusion::pestim::{
    self, BoundaryVerdict, CentralPoly, ConstantDiffusion, DriftParams, TailPiece, TailQuadratic,
};
use bounded_diffusion::pipeline::{self, FitConfig};
use bounded_diffusion::sim::{self, SimConfig, Variant};
use bounded_diffusion::trend::{self, SmootherConfig};
use bounded_diffusion::validate::{self, Exceedance, QuantileStatistic, ValidationConfig};
use bounded_diffusion::{stats, synth};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

type Criterion = (&'static str, fn() -> Outcome);

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn loess_exactness() -> Outcome {
    let start = Instant::now();
    let x: Vec<f64> = (0..500).map(|i| i as f64 * 0.37).collect();
    let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
    let cfg = SmootherConfig {
        robust_iters: 0,
        ..SmootherConfig::with_span(60)
    };
    let fit = trend::loess_fit(&x, &y, &cfg).expect("loess");
    let grid = stats::linspace(0.0, 499.0 * 0.37, 1000);
    let on_grid = trend::loess_eval(&x, &y, None, &cfg, &grid).expect("loess");
    let err = fit
        .iter()
        .zip(&y)
        .map(|(f, t)| (f - t).abs())
        .chain(grid.iter().zip(&on_grid).map(|(g, f)| (f - (2.0 * g + 1.0)).abs()))
        .fold(0.0, f64::max);
    let t = start.elapsed();
    outcome(
        err <= 1e-10 && t < Duration::from_secs(1),
        format!("max abs error {err:.2e}, {t:.2?}"),
    )
}

fn trend_recovery() -> Outcome {
    let start = Instant::now();
    let n_seasons = 30;
    let len = 90;
    let n = n_seasons * len;
    let mean = |u: f64| 10.0 + 1.5 * (std::f64::consts::PI * u).sin() + 1.0 * u;
    let scale = |u: f64| 1.0 + u;
    let dates = synth::seasonal_dates(n_seasons, len, 1961);
    let ou = synth::ar1(n, 0.6, 2024);
    let series = synth::compose(dates, &ou, mean, scale).expect("series");
    let cfg = SmootherConfig::default();
    let m = trend::estimate_mean_trend(&series, &cfg).expect("mean trend");
    let s = trend::estimate_scale_trend(&series, &m, &cfg).expect("scale trend");
    let sd = stats::std_dev(&series.values);
    let (lo, hi) = (n / 10, n - n / 10);
    let (mut m_err, mut s_err) = (0.0f64, 0.0f64);
    for t in lo..hi {
        let u = t as f64 / (n - 1) as f64;
        m_err = m_err.max((m.fitted[t] - mean(u)).abs());
        s_err = s_err.max((s.fitted[t] / scale(u) - 1.0).abs());
    }
    let elapsed = start.elapsed();
    outcome(
        m_err <= 0.15 * sd && s_err <= 0.15 && elapsed < Duration::from_secs(30),
        format!(
            "mean sup error {:.3} sd(X), scale sup relative error {:.3}, {elapsed:.2?}",
            m_err / sd,
            s_err
        ),
    )
}

fn gev_recovery() -> Outcome {
    let start = Instant::now();
    let (mu, sigma, xi) = (0.0, 1.0, -0.2);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let draws: Vec<f64> = (0..1000)
        .map(|_| {
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            mu + sigma * ((-u.ln()).powf(-xi) - 1.0) / xi
        })
        .collect();
    let g = extremes::fit_gev(&draws, &GevFitOptions::default()).expect("gev fit");
    let z = [
        (g.mu - mu) / g.se[0],
        (g.sigma - sigma) / g.se[1],
        (g.xi - xi) / g.se[2],
    ];
    let endpoint = g.mu - g.sigma / g.xi;
    let rel = (endpoint - 5.0).abs() / 5.0;
    let t = start.elapsed();
    outcome(
        z.iter().all(|v| v.abs() <= 2.0) && rel <= 0.1 && t < Duration::from_secs(5),
        format!(
            "(mu, sigma, xi) = ({:.3}, {:.3}, {:.3}), errors in SE ({:.2}, {:.2}, {:.2}), endpoint {endpoint:.3}, {t:.2?}",
            g.mu, g.sigma, g.xi, z[0], z[1], z[2]
        ),
    )
}

fn tail_quadratic_exactness() -> Outcome {
    let (r, q, v, d) = (-3.0, -2.0, 0.5, 0.3);
    let h: f64 = q - r;
    let m = nalgebra::Matrix3::new(1.0, 0.0, 0.0, 1.0, h, h * h, 0.0, 1.0, 2.0 * h);
    let rhs = nalgebra::Vector3::new(0.0, v, d);
    let oracle = m.lu().solve(&rhs).expect("oracle solve");
    let t = TailQuadratic::through(r, q, v, d).expect("tail");
    let central = CentralPoly::on_domain(vec![v], (q, 2.0));
    let built = pestim::build_tail_quadratic(&central, r, q, d).expect("tail");
    let coeff_err = (0..3)
        .map(|i| (t.coeffs[i] - oracle[i]).abs().max((built.coeffs[i] - oracle[i]).abs()))
        .fold(0.0, f64::max);
    let worked_err = (oracle[2] + 0.2).abs().max((oracle[1] - 0.7).abs()).max(oracle[0].abs());
    let constraint_err = t
        .eval(r)
        .abs()
        .max((t.eval(q) - v).abs())
        .max((t.derivative(q) - d).abs());
    outcome(
        coeff_err <= 1e-10 && worked_err <= 1e-10 && constraint_err <= 1e-10,
        format!(
            "quadratic {:.6}(z+3)^2 + {:.6}(z+3), coefficient error {coeff_err:.1e}, constraint error {constraint_err:.1e}",
            t.coeffs[2], t.coeffs[1]
        ),
    )
}

fn simulate_pairs(n: usize, seed: u64) -> TransitionPairs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut prev, mut incr) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let mut z = 0.0;
    for _ in 0..n {
        let e: f64 = rng.sample(StandardNormal);
        let step = -0.2 * z + (0.4 + 0.05 * z * z) * e;
        prev.push(z);
        incr.push(step);
        z += step;
    }
    TransitionPairs::from_raw(prev, incr)
}

fn joint_mle_recovery() -> Outcome {
    let grid = stats::linspace(-2.0, 2.0, 81);
    let (mut beta_ok, mut a_ok) = (0, 0);
    let mut slowest = Duration::ZERO;
    let mut worst = Vec::new();
    for seed in 0..10 {
        let start = Instant::now();
        let pairs = simulate_pairs(20_000, 100 + seed);
        let lo = pairs.prev.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = pairs.prev.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let fit = pestim::fit_joint_mle_on(&pairs, 4, (lo, hi)).expect("joint fit");
        slowest = slowest.max(start.elapsed());
        if (fit.drift.beta + 0.2).abs() <= 0.03 {
            beta_ok += 1;
        }
        let rel = grid
            .iter()
            .map(|&z| (fit.central.eval(z) / (0.4 + 0.05 * z * z) - 1.0).abs())
            .fold(0.0, f64::max);
        worst.push(rel);
        if rel <= 0.1 {
            a_ok += 1;
        }
    }
    let max_rel = worst.iter().cloned().fold(0.0, f64::max);
    outcome(
        beta_ok >= 9 && a_ok >= 9 && slowest < Duration::from_secs(60),
        format!(
            "beta within 0.03 in {beta_ok}/10, a within 10% in {a_ok}/10 (worst {max_rel:.3}), slowest seed {slowest:.2?}"
        ),
    )
}

fn penalty_dominance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut prev, mut incr) = (Vec::new(), Vec::new());
    let mut z = 0.0;
    for _ in 0..5000 {
        let e: f64 = rng.sample(StandardNormal);
        let step = -0.2 * z + (0.5 + 0.1 * z) * e;
        prev.push(z);
        incr.push(step);
        z += step;
    }
    let pairs = TransitionPairs::from_raw(prev, incr);
    let drift = npestim::drift_linear_ls(&pairs, pairs.central_interval(0.01, 0.99)).expect("drift");
    let knots = npestim::default_knots(&pairs, 10);
    let scale = npestim::lambda_scale(&pairs, &drift, &knots);
    let fit = npestim::penalized_spline_a(&pairs, &drift, 1e8 * scale, &knots).expect("spline");
    let grid = fit.grid();
    let a = fit.eval_many(&grid);
    let range = a.iter().cloned().fold(f64::MIN, f64::max) - a.iter().cloned().fold(f64::MAX, f64::min);
    let curv = fit
        .curvature_many(&grid)
        .iter()
        .map(|c| c.abs())
        .fold(0.0, f64::max);
    outcome(
        curv < 1e-4 * range,
        format!("max|a''| {curv:.2e}, range(a) {range:.3}, ratio {:.2e}", curv / range),
    )
}

fn quantile_fidelity() -> Outcome {
    let start = Instant::now();
    let observed = synth::reference_series(35, 90, 7).expect("observations");
    let fitted = pipeline::fit(&observed, &FitConfig::default()).expect("fit");
    let ensemble = fitted
        .model
        .simulate(&SimConfig {
            n_paths: 1000,
            seed: 1,
            ..SimConfig::default()
        })
        .expect("simulate");
    let probs = validate::PROB_LADDER;
    let sim_q = validate::quantile_report(&ensemble, &probs, QuantileStatistic::MeanOfPaths).expect("quantiles");
    let obs_q = stats::quantiles(&observed.values, &probs);
    let sd = stats::std_dev(&observed.values);
    let mut central_gap = 0.0f64;
    let mut tail_gap = 0.0f64;
    for (i, p) in probs.iter().enumerate() {
        let gap = (sim_q.simulated[i] - obs_q[i]).abs() / sd;
        if (0.05..=0.95).contains(p) {
            central_gap = central_gap.max(gap);
        } else {
            tail_gap = tail_gap.max(gap);
        }
    }
    let t = start.elapsed();
    outcome(
        central_gap <= 0.5 && tail_gap <= 0.75 && t < Duration::from_secs(300),
        format!("largest gap {central_gap:.3} sd in [0.05, 0.95], {tail_gap:.3} sd in the tails, {t:.2?}"),
    )
}

fn declusterization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut exact = 0;
    let mut cases = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..400);
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let threshold = rng.random_range(0.0..1.0);
        let dir = if rng.random_bool(0.5) { Exceedance::Above } else { Exceedance::Below };
        let summary = validate::clusters(&values, threshold, dir);
        // Oracle: count runs directly.
        let hit = |v: f64| match dir {
            Exceedance::Above => v > threshold,
            Exceedance::Below => v < threshold,
        };
        let (mut runs, mut days) = (0usize, 0usize);
        for i in 0..n {
            if hit(values[i]) {
                days += 1;
                if i == 0 || !hit(values[i - 1]) {
                    runs += 1;
                }
            }
        }
        cases += 1;
        let ok = match (summary.mean_length, summary.declusterization_rate) {
            (Some(m), Some(r)) => runs > 0 && m == days as f64 / runs as f64 && r == 1.0 / m,
            (None, None) => runs == 0,
            _ => false,
        };
        if ok {
            exact += 1;
        }
    }
    let (_, rate) = validate::rate_from_histogram(&[(1, 0.600), (2, 0.167), (3, 0.200), (5, 0.033)])
        .expect("histogram");
    outcome(
        exact == cases && (rate - 0.588).abs() <= 0.001 && (rate - 0.5886).abs() < 5e-5,
        format!("identity exact in {exact}/{cases} cases, fixture rate {rate:.4}"),
    )
}

fn whiteness_under_null() -> Outcome {
    let observed = synth::reference_series(35, 90, 7).expect("observations");
    let fitted = pipeline::fit(&observed, &FitConfig::default()).expect("fit");
    let model = &fitted.model.model;
    let reps: Vec<(bool, bool)> = (0..100u64)
        .map(|seed| {
            let z = synth::euler_path(model, observed.len(), 5000 + seed).expect("path");
            let pairs = TransitionPairs::from_raw(
                z[..z.len() - 1].to_vec(),
                z.windows(2).map(|w| w[1] - w[0]).collect(),
            );
            let eps = pestim::residuals(&pairs, model).expect("residuals");
            let report = pestim::whiteness_tests(&eps, 0.01).expect("battery");
            (report.pass, report.checks.iter().all(|c| c.p_value > 0.01))
        })
        .collect();
    let passed = reps.iter().filter(|r| r.0).count();
    let raw = reps.iter().filter(|r| r.1).count();
    outcome(
        passed >= 90,
        format!("battery passed in {passed}/100 replications ({raw}/100 with every unadjusted p > 0.01)"),
    )
}

fn determinism() -> Outcome {
    let observed = synth::reference_series(25, 90, 3).expect("observations");
    let cfg = FitConfig::default();
    let a = pipeline::fit(&observed, &cfg).expect("fit");
    let b = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("pool")
        .install(|| pipeline::fit(&observed, &cfg).expect("fit"));
    let model_same = a.model.to_json().expect("json") == b.model.to_json().expect("json");
    let sim_cfg = SimConfig {
        n_paths: 64,
        seed: 11,
        ..SimConfig::default()
    };
    let dir = tempfile::tempdir().expect("tempdir");
    let mut bins = Vec::new();
    let mut reports = Vec::new();
    for threads in [1, 3, 8] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("pool");
        let (bytes, report) = pool.install(|| {
            let e = a.model.simulate(&sim_cfg).expect("simulate");
            let path = dir.path().join(format!("e{threads}.bin"));
            sim::write_binary(&e, &path).expect("write");
            let r = validate::full_report(&observed, &[(Variant::Model3, &e)], &ValidationConfig::default())
                .expect("report");
            (std::fs::read(&path).expect("read"), serde_json::to_string(&r).expect("json"))
        });
        bins.push(bytes);
        reports.push(report);
    }
    let ens_same = bins.windows(2).all(|w| w[0] == w[1]);
    let rep_same = reports.windows(2).all(|w| w[0] == w[1]);
    outcome(
        model_same && ens_same && rep_same,
        format!("model files identical: {model_same}, ensembles identical: {ens_same}, reports identical: {rep_same} (1, 3 and 8 threads)"),
    )
}

fn scale_function() -> Outcome {
    let ou = ConstantDiffusion {
        alpha: 0.0,
        beta: -1.0,
        a: 1.0,
    };
    let s = pestim::scale_function_diagnostic(&ou, &[1.0], 0.0).expect("scale");
    let sp = s.s_prime[0].expect("finite");
    let err = (sp - std::f64::consts::E).abs();

    let central = CentralPoly::on_domain(vec![0.5], (-2.0, 2.0));
    let lower = pestim::build_tail_quadratic(&central, -3.0, -2.0, 0.5).expect("tail");
    let upper = pestim::build_tail_quadratic(&central, 3.0, 2.0, -0.5).expect("tail");
    let linear = lower.coeffs[2].abs() < 1e-12 && upper.coeffs[2].abs() < 1e-12;
    let model = pestim::assemble(
        DriftParams::new(0.0, -0.2),
        central,
        TailPiece::Quadratic(lower),
        TailPiece::Quadratic(upper),
        BoundaryInfo::manual(Some(-3.0), Some(3.0)),
    )
    .expect("assemble");
    let d = pestim::scale_function_diagnostic(&model, &stats::linspace(-2.9, 2.9, 30), 0.0).expect("scale");
    outcome(
        err <= 1e-6 && linear && d.lower == BoundaryVerdict::Inaccessible && d.upper == BoundaryVerdict::Inaccessible,
        format!("OU s'(1) error {err:.1e}; linear-vanishing model: lower {:?}, upper {:?}", d.lower, d.upper),
    )
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("loess reproduces a line", loess_exactness),
        ("trend recovery", trend_recovery),
        ("gev recovery", gev_recovery),
        ("tail quadratic exactness", tail_quadratic_exactness),
        ("joint likelihood recovery", joint_mle_recovery),
        ("penalty dominance", penalty_dominance),
        ("central quantile fidelity", quantile_fidelity),
        ("declusterization identity", declusterization),
        ("residual whiteness under the null", whiteness_under_null),
        ("determinism", determinism),
        ("scale function diagnostic", scale_function),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} {:>2} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
