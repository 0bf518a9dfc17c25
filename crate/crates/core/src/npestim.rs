//! Nonparametric first pass: drift and diffusion coefficient estimated from
//! one-day transitions of the normalized series.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::DailySeries;
use crate::optim::{self, NewtonOptions, Objective};
use crate::pestim::DriftParams;
use crate::spline::NaturalSplineBasis;
use crate::stats;
use crate::trend::{self, NormalizedSeries, SmootherConfig};

/// Minimum number of transitions for [`make_pairs`].
pub const MIN_PAIRS: usize = 100;

/// Consecutive-day transitions `(Z_{n-1}, Z_n - Z_{n-1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionPairs {
    pub prev: Vec<f64>,
    pub incr: Vec<f64>,
    /// Record index of `Z_n` for each pair.
    pub index: Vec<usize>,
    /// Adjacent records skipped because of a gap or a block boundary.
    pub excluded: usize,
}

impl TransitionPairs {
    pub fn len(&self) -> usize {
        self.prev.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prev.is_empty()
    }

    /// Pairs built from per-record values laid out like `series`; no
    /// minimum count is enforced.
    pub fn from_values(values: &[f64], series: &DailySeries) -> Self {
        let mut out = TransitionPairs {
            prev: Vec::new(),
            incr: Vec::new(),
            index: Vec::new(),
            excluded: 0,
        };
        for b in &series.blocks {
            for i in b.start + 1..b.start + b.len {
                if (series.dates[i] - series.dates[i - 1]).num_days() == 1 {
                    out.prev.push(values[i - 1]);
                    out.incr.push(values[i] - values[i - 1]);
                    out.index.push(i);
                } else {
                    out.excluded += 1;
                }
            }
        }
        out.excluded += series.blocks.len().saturating_sub(1);
        out
    }

    pub fn from_raw(prev: Vec<f64>, incr: Vec<f64>) -> Self {
        let index = (1..=prev.len()).collect();
        Self {
            prev,
            incr,
            index,
            excluded: 0,
        }
    }

    /// Pairs whose `prev` lies in the closed interval.
    pub fn restrict(&self, lo: f64, hi: f64) -> Self {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| self.prev[i] >= lo && self.prev[i] <= hi)
            .collect();
        Self {
            prev: keep.iter().map(|&i| self.prev[i]).collect(),
            incr: keep.iter().map(|&i| self.incr[i]).collect(),
            index: keep.iter().map(|&i| self.index[i]).collect(),
            excluded: self.excluded,
        }
    }

    fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            prev: self.prev[range.clone()].to_vec(),
            incr: self.incr[range.clone()].to_vec(),
            index: self.index[range].to_vec(),
            excluded: 0,
        }
    }

    /// Type-7 quantiles of `prev` at `(p_lo, p_hi)`.
    pub fn central_interval(&self, p_lo: f64, p_hi: f64) -> (f64, f64) {
        let s = stats::sorted(&self.prev);
        (stats::quantile_sorted(&s, p_lo), stats::quantile_sorted(&s, p_hi))
    }
}

/// Transition pairs of a normalized series; at least [`MIN_PAIRS`].
pub fn make_pairs(z: &NormalizedSeries) -> Result<TransitionPairs> {
    let pairs = TransitionPairs::from_values(&z.z, &z.base);
    if pairs.len() < MIN_PAIRS {
        return Err(Error::InsufficientData {
            what: "transition pairs".into(),
            needed: MIN_PAIRS,
            got: pairs.len(),
        });
    }
    Ok(pairs)
}

/// Curve estimate of `b(z)` or `a(z)` on a grid of states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveEstimate {
    pub grid: Vec<f64>,
    #[serde(deserialize_with = "crate::nullable::vec")]
    pub values: Vec<f64>,
    pub n_local: Vec<usize>,
}

impl CurveEstimate {
    /// Grid points with enough local data to trust the estimate.
    pub fn reliable(&self) -> Vec<bool> {
        self.n_local
            .iter()
            .zip(&self.values)
            .map(|(n, v)| *n >= 5 && v.is_finite())
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["z", "value", "n_local"])?;
        for i in 0..self.grid.len() {
            w.write_record([
                self.grid[i].to_string(),
                self.values[i].to_string(),
                self.n_local[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Number of points on every curve-estimate grid.
pub const CURVE_GRID: usize = 201;

/// LOESS regression of the increment on the previous state, evaluated on an
/// equispaced grid between the 0.1% and 99.9% quantiles of `prev`.
pub fn drift_loess(pairs: &TransitionPairs, smoother: &SmootherConfig) -> Result<CurveEstimate> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| pairs.prev[a].total_cmp(&pairs.prev[b]));
    let x: Vec<f64> = order.iter().map(|&i| pairs.prev[i]).collect();
    let y: Vec<f64> = order.iter().map(|&i| pairs.incr[i]).collect();
    let (lo, hi) = pairs.central_interval(0.001, 0.999);
    let grid = stats::linspace(lo, hi, CURVE_GRID);
    let (_, weights) = trend::robustness_weights(&x, &y, smoother)?;
    let values = trend::loess_eval(&x, &y, weights.as_deref(), smoother, &grid)?;
    Ok(CurveEstimate {
        grid,
        values,
        n_local: vec![smoother.span; CURVE_GRID],
    })
}

/// Ordinary least squares of the increment on `(1, prev)` over pairs with
/// `prev` inside `central`.
pub fn drift_linear_ls(pairs: &TransitionPairs, central: (f64, f64)) -> Result<DriftParams> {
    let inside = pairs.restrict(central.0, central.1);
    if inside.len() < 50 {
        return Err(Error::InsufficientData {
            what: "linear drift (pairs in the central interval)".into(),
            needed: 50,
            got: inside.len(),
        });
    }
    let (alpha, beta, se_a, se_b, _) = stats::ols_line(&inside.prev, &inside.incr)
        .ok_or_else(|| Error::Degenerate("linear drift: singular design".into()))?;
    if beta >= 0.0 {
        log::warn!("drift slope {beta} is not mean-reverting");
    }
    Ok(DriftParams {
        alpha,
        beta,
        se: [se_a, se_b],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Epanechnikov,
    Gaussian,
}

impl Kernel {
    /// Kernel density (integrates to one).
    pub fn density(self, u: f64) -> f64 {
        match self {
            Kernel::Gaussian => stats::normal_pdf(u),
            Kernel::Epanechnikov => {
                if u.abs() < 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub kernel: Kernel,
    pub bandwidth: f64,
}

impl KernelConfig {
    /// Gaussian kernel with Silverman's bandwidth on `prev`.
    pub fn silverman(pairs: &TransitionPairs) -> Self {
        Self {
            kernel: Kernel::Gaussian,
            bandwidth: stats::silverman_bandwidth(&pairs.prev),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0) {
            return Err(Error::InvalidInput(format!(
                "kernel bandwidth must be positive, got {}",
                self.bandwidth
            )));
        }
        Ok(())
    }
}

fn kernel_weights(pairs: &TransitionPairs, y: f64, cfg: &KernelConfig) -> Result<(Vec<f64>, f64)> {
    cfg.validate()?;
    let h = cfg.bandwidth;
    let w: Vec<f64> = pairs
        .prev
        .iter()
        .map(|p| cfg.kernel.density((p - y) / h))
        .collect();
    let total: f64 = w.iter().sum();
    if !(total > 1e-300) {
        return Err(Error::InsufficientData {
            what: format!("kernel neighbourhood of {y}"),
            needed: 1,
            got: 0,
        });
    }
    Ok((w, total))
}

/// Nadaraya-Watson estimate of the density of `Z_n` at `x` given
/// `Z_{n-1} = y`. Each axis carries its own `1/h`, so the estimate
/// integrates to one in `x`.
pub fn conditional_density(
    pairs: &TransitionPairs,
    x: f64,
    y: f64,
    cfg: &KernelConfig,
) -> Result<f64> {
    let (w, total) = kernel_weights(pairs, y, cfg)?;
    let h = cfg.bandwidth;
    let num: f64 = (0..pairs.len())
        .filter(|&i| w[i] > 0.0)
        .map(|i| {
            let next = pairs.prev[i] + pairs.incr[i];
            w[i] * cfg.kernel.density((next - x) / h)
        })
        .sum();
    Ok(num / (h * total))
}

/// Kernel-weighted mean and variance of the increment near `y`.
pub fn conditional_moments(
    pairs: &TransitionPairs,
    y: f64,
    cfg: &KernelConfig,
) -> Result<(f64, f64)> {
    let (w, total) = kernel_weights(pairs, y, cfg)?;
    let mean = w.iter().zip(&pairs.incr).map(|(w, d)| w * d).sum::<f64>() / total;
    let var = w
        .iter()
        .zip(&pairs.incr)
        .map(|(w, d)| w * (d - mean) * (d - mean))
        .sum::<f64>()
        / total;
    Ok((mean, var.max(0.0)))
}

/// Kernel drift (conditional mean) and diffusion (conditional standard
/// deviation) curves on `grid`.
pub fn kernel_curves(
    pairs: &TransitionPairs,
    grid: &[f64],
    cfg: &KernelConfig,
) -> Result<(CurveEstimate, CurveEstimate)> {
    cfg.validate()?;
    let reach = match cfg.kernel {
        Kernel::Gaussian => cfg.bandwidth,
        Kernel::Epanechnikov => cfg.bandwidth,
    };
    let rows: Vec<(f64, f64, usize)> = grid
        .par_iter()
        .map(|&y| {
            let n_local = pairs.prev.iter().filter(|p| (*p - y).abs() <= reach).count();
            match conditional_moments(pairs, y, cfg) {
                Ok((m, v)) => (m, v.sqrt(), n_local),
                Err(_) => (f64::NAN, f64::NAN, n_local),
            }
        })
        .collect();
    let b = CurveEstimate {
        grid: grid.to_vec(),
        values: rows.iter().map(|r| r.0).collect(),
        n_local: rows.iter().map(|r| r.2).collect(),
    };
    let a = CurveEstimate {
        grid: grid.to_vec(),
        values: rows.iter().map(|r| r.1).collect(),
        n_local: rows.iter().map(|r| r.2).collect(),
    };
    Ok((b, a))
}

/// Diffusion coefficient as a natural cubic spline from the penalized
/// likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineFit {
    pub knots: Vec<f64>,
    /// Spline values `a(knot_k)`.
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    /// Penalized log-likelihood at the returned coefficients.
    pub objective: f64,
    pub n_pairs: usize,
}

impl SplineFit {
    pub fn eval(&self, z: f64) -> f64 {
        match NaturalSplineBasis::new(&self.knots) {
            Ok(b) => b.eval(&self.coefficients, z),
            Err(_) => f64::NAN,
        }
    }

    pub fn eval_many(&self, zs: &[f64]) -> Vec<f64> {
        match NaturalSplineBasis::new(&self.knots) {
            Ok(b) => b.eval_many(&self.coefficients, zs),
            Err(_) => vec![f64::NAN; zs.len()],
        }
    }

    pub fn curvature_many(&self, zs: &[f64]) -> Vec<f64> {
        match NaturalSplineBasis::new(&self.knots) {
            Ok(b) => zs.iter().map(|&z| b.eval_curvature(&self.coefficients, z)).collect(),
            Err(_) => vec![f64::NAN; zs.len()],
        }
    }

    /// Equispaced evaluation grid over the knot range.
    pub fn grid(&self) -> Vec<f64> {
        stats::linspace(self.knots[0], self.knots[self.knots.len() - 1], CURVE_GRID)
    }
}

/// `K` knots at equally spaced quantiles of `prev` between 1% and 99%.
pub fn default_knots(pairs: &TransitionPairs, count: usize) -> Vec<f64> {
    let s = stats::sorted(&pairs.prev);
    let mut knots: Vec<f64> = stats::linspace(0.01, 0.99, count.max(2))
        .into_iter()
        .map(|p| stats::quantile_sorted(&s, p))
        .collect();
    knots.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (1.0 + b.abs()));
    knots
}

/// Natural scale of the roughness weight: `n R^3 / var(residual)`, with `R`
/// the knot range. Makes a given multiplier mean the same thing for any
/// sample size or units.
pub fn lambda_scale(pairs: &TransitionPairs, b_hat: &DriftParams, knots: &[f64]) -> f64 {
    let lo = knots[0];
    let hi = knots[knots.len() - 1];
    let inside = pairs.restrict(lo, hi);
    let resid: Vec<f64> = (0..inside.len())
        .map(|i| inside.incr[i] - b_hat.eval(inside.prev[i]))
        .collect();
    let var = stats::mean(&resid.iter().map(|r| r * r).collect::<Vec<_>>());
    inside.len() as f64 * (hi - lo).powi(3) / var.max(1e-300)
}

/// Grid used for the positivity check and for curvature reporting.
const POSITIVITY_GRID: usize = 201;
/// Simpson grid for the roughness integral.
const ROUGHNESS_GRID: usize = 1001;

struct SplineProblem {
    design: DMatrix<f64>,
    check: DMatrix<f64>,
    omega: DMatrix<f64>,
    resid2: Vec<f64>,
    lambda: f64,
}

impl SplineProblem {
    fn new(
        pairs: &TransitionPairs,
        b_hat: &DriftParams,
        lambda: f64,
        basis: &NaturalSplineBasis,
    ) -> Self {
        let resid2 = (0..pairs.len())
            .map(|i| {
                let r = pairs.incr[i] - b_hat.eval(pairs.prev[i]);
                r * r
            })
            .collect();
        let k = basis.knots();
        let check_pts = stats::linspace(k[0], k[k.len() - 1], POSITIVITY_GRID);
        Self {
            design: basis.design(&pairs.prev),
            check: basis.design(&check_pts),
            omega: basis.roughness_matrix(ROUGHNESS_GRID),
            resid2,
            lambda,
        }
    }

    /// Penalized log-likelihood in terms of knot values `v`.
    fn value(&self, v: &DVector<f64>) -> Option<f64> {
        if (&self.check * v).iter().any(|a| !(*a > 0.0)) {
            return None;
        }
        let a = &self.design * v;
        let mut ll = 0.0;
        for (ai, r2) in a.iter().zip(&self.resid2) {
            if !(*ai > 0.0) {
                return None;
            }
            ll += -0.5 * r2 / (ai * ai) - ai.ln();
        }
        Some(ll - 0.5 * self.lambda * (v.transpose() * &self.omega * v)[(0, 0)])
    }

    /// Objective in knot values with gradient and Hessian; infeasible when
    /// `a` is not positive on the knot range.
    fn objective(&self, v: &[f64]) -> Option<Objective> {
        let v = DVector::from_column_slice(v);
        let value = self.value(&v)?;
        let a = &self.design * &v;
        let mut g_a = DVector::zeros(a.len());
        let mut h_a = DVector::zeros(a.len());
        for i in 0..a.len() {
            let ai = a[i];
            let r2 = self.resid2[i];
            g_a[i] = r2 / (ai * ai * ai) - 1.0 / ai;
            h_a[i] = -3.0 * r2 / (ai * ai * ai * ai) + 1.0 / (ai * ai);
        }
        let grad = self.design.transpose() * &g_a - self.lambda * (&self.omega * &v);
        let mut weighted = self.design.clone();
        for (i, mut row) in weighted.row_iter_mut().enumerate() {
            row *= h_a[i];
        }
        let hess = self.design.transpose() * weighted - self.lambda * &self.omega;
        Some(Objective { value, grad, hess })
    }
}

/// Knot values of the maximum-likelihood straight-line coefficient, or the
/// constant `rms` when that fit fails.
fn affine_start(problem: &SplineProblem, knots: &[f64], rms: f64) -> Vec<f64> {
    let c = (knots[0] + knots[knots.len() - 1]) / 2.0;
    let lift = |p: &[f64]| -> Vec<f64> { knots.iter().map(|k| p[0] + p[1] * (k - c)).collect() };
    let line = optim::damped_newton(
        |p| {
            let o = problem.objective(&lift(p))?;
            let (mut g, mut h) = (DVector::zeros(2), DMatrix::zeros(2, 2));
            for (i, &ki) in knots.iter().enumerate() {
                let di = [1.0, ki - c];
                for r in 0..2 {
                    g[r] += di[r] * o.grad[i];
                    for (j, &kj) in knots.iter().enumerate() {
                        let dj = [1.0, kj - c];
                        for col in 0..2 {
                            h[(r, col)] += di[r] * o.hess[(i, j)] * dj[col];
                        }
                    }
                }
            }
            Some(Objective {
                value: o.value,
                grad: g,
                hess: h,
            })
        },
        &[rms, 0.0],
        NewtonOptions::default(),
    );
    match line {
        Some(m) => lift(m.x.as_slice()),
        None => vec![rms; knots.len()],
    }
}

fn fit_spline(
    pairs: &TransitionPairs,
    b_hat: &DriftParams,
    lambda: f64,
    knots: &[f64],
    init: Option<&[f64]>,
) -> Result<SplineFit> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidInput(format!("lambda must be >= 0, got {lambda}")));
    }
    let basis = NaturalSplineBasis::new(knots)?;
    let inside = pairs.restrict(knots[0], knots[knots.len() - 1]);
    if inside.len() < 2 * knots.len() {
        return Err(Error::InsufficientData {
            what: "spline diffusion fit".into(),
            needed: 2 * knots.len(),
            got: inside.len(),
        });
    }
    let problem = SplineProblem::new(&inside, b_hat, lambda, &basis);

    // Start at the best straight line, where the penalty vanishes.
    let rms = stats::mean(&problem.resid2).sqrt();
    if !(rms > 0.0) {
        return Err(Error::Degenerate("spline fit: residuals are all zero".into()));
    }
    let flat = affine_start(&problem, knots, rms);
    let start: Vec<f64> = match init {
        Some(v) if v.len() == knots.len() && v.iter().all(|x| *x > 0.0) => v.to_vec(),
        _ => flat.clone(),
    };
    let start = if problem.objective(&start).is_some() {
        start
    } else {
        flat
    };
    let opts = NewtonOptions {
        max_iter: 1000,
        ..NewtonOptions::default()
    };
    let best = optim::damped_newton(|t| problem.objective(t), &start, opts).ok_or_else(|| {
        Error::NoConvergence {
            what: "spline diffusion fit".into(),
            iterations: 0,
            detail: "infeasible start".into(),
        }
    })?;
    if !best.converged {
        log::debug!(
            "spline fit stopped after {} iterations without meeting tolerance",
            best.iterations
        );
    }
    let coefficients = best.x;
    let grid = stats::linspace(knots[0], knots[knots.len() - 1], POSITIVITY_GRID);
    if basis.eval_many(&coefficients, &grid).iter().any(|a| !(*a > 0.0)) {
        return Err(Error::ConstraintsIncompatible(
            "spline diffusion coefficient is not positive on the knot range".into(),
        ));
    }
    Ok(SplineFit {
        knots: knots.to_vec(),
        coefficients,
        lambda,
        objective: best.value,
        n_pairs: inside.len(),
    })
}

/// Maximizes the roughness-penalized Gaussian likelihood of the increments
/// over natural-cubic-spline diffusion coefficients with the drift held at
/// `b_hat`. Only pairs with `prev` inside the knot range enter.
pub fn penalized_spline_a(
    pairs: &TransitionPairs,
    b_hat: &DriftParams,
    lambda: f64,
    knots: &[f64],
) -> Result<SplineFit> {
    fit_spline(pairs, b_hat, lambda, knots, None)
}

/// Penalized objective of arbitrary knot values (for comparisons).
pub fn spline_objective(
    pairs: &TransitionPairs,
    b_hat: &DriftParams,
    lambda: f64,
    knots: &[f64],
    values: &[f64],
) -> Result<f64> {
    let basis = NaturalSplineBasis::new(knots)?;
    let inside = pairs.restrict(knots[0], knots[knots.len() - 1]);
    let problem = SplineProblem::new(&inside, b_hat, lambda, &basis);
    Ok(problem
        .value(&DVector::from_column_slice(values))
        .unwrap_or(f64::NEG_INFINITY))
}

/// Held-out score of each candidate weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub candidates: Vec<f64>,
    pub holdout_loglik: Vec<f64>,
}

/// Picks the roughness weight maximizing the unpenalized likelihood on the
/// last 20% of transitions (in time order) after fitting on the first 80%.
/// Candidates are `lambda_scale * 10^k` for `k` in `-6..=2`.
pub fn select_lambda(
    pairs: &TransitionPairs,
    b_hat: &DriftParams,
    knots: &[f64],
) -> Result<LambdaSelection> {
    let cut = pairs.len() * 4 / 5;
    let train = pairs.slice(0..cut);
    let test = pairs
        .slice(cut..pairs.len())
        .restrict(knots[0], knots[knots.len() - 1]);
    let scale = lambda_scale(&train, b_hat, knots);
    let candidates: Vec<f64> = (-6..=2).map(|k| scale * 10f64.powi(k)).collect();
    let scores: Vec<f64> = candidates
        .par_iter()
        .map(|&lambda| match fit_spline(&train, b_hat, lambda, knots, None) {
            Ok(fit) => spline_objective(&test, b_hat, 0.0, knots, &fit.coefficients)
                .unwrap_or(f64::NEG_INFINITY),
            Err(_) => f64::NEG_INFINITY,
        })
        .collect();
    let best = (0..candidates.len())
        .max_by(|&a, &b| scores[a].total_cmp(&scores[b]))
        .filter(|&i| scores[i].is_finite())
        .ok_or_else(|| Error::NoConvergence {
            what: "roughness weight selection".into(),
            iterations: candidates.len(),
            detail: "no candidate produced a valid fit".into(),
        })?;
    Ok(LambdaSelection {
        lambda: candidates[best],
        candidates,
        holdout_loglik: scores,
    })
}

/// Result of alternating spline and weighted-drift refits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlternateRefit {
    pub spline: SplineFit,
    pub drift: DriftParams,
    /// Number of drift updates that changed the estimate beyond `tol`.
    pub iterations: usize,
    /// `(max drift change, max change of a on the grid)` per round.
    pub trace: Vec<(f64, f64)>,
}

/// Alternates (i) the spline fit of `a` given the drift and (ii) weighted
/// least squares for the linear drift with weights `1/a^2`, until both move
/// less than `tol`.
pub fn alternate_refit(
    pairs: &TransitionPairs,
    init_b: &DriftParams,
    lambda: f64,
    knots: &[f64],
    max_iters: usize,
    tol: f64,
) -> Result<AlternateRefit> {
    let inside = pairs.restrict(knots[0], knots[knots.len() - 1]);
    let mut drift = init_b.clone();
    let mut trace = Vec::new();
    let mut prev_a: Option<Vec<f64>> = None;
    let mut init: Option<Vec<f64>> = None;
    for round in 0..=max_iters {
        let spline = fit_spline(pairs, &drift, lambda, knots, init.as_deref())?;
        let grid = spline.grid();
        let a_grid = spline.eval_many(&grid);
        let da = prev_a
            .as_ref()
            .map(|p| {
                p.iter()
                    .zip(&a_grid)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max)
            })
            .unwrap_or(0.0);

        let a_pairs = spline.eval_many(&inside.prev);
        let w: Vec<f64> = a_pairs.iter().map(|a| 1.0 / (a * a)).collect();
        let (alpha, beta, se_a, se_b, _) = stats::wls_line(&inside.prev, &inside.incr, &w)
            .ok_or_else(|| Error::Degenerate("weighted drift: singular design".into()))?;
        let db = (alpha - drift.alpha).abs().max((beta - drift.beta).abs());
        trace.push((db, da));
        if db < tol && da < tol {
            return Ok(AlternateRefit {
                spline,
                drift,
                iterations: round,
                trace,
            });
        }
        drift = DriftParams {
            alpha,
            beta,
            se: [se_a, se_b],
        };
        init = Some(spline.coefficients.clone());
        prev_a = Some(a_grid);
    }
    Err(Error::NoConvergence {
        what: "alternating refit".into(),
        iterations: max_iters,
        detail: format!("trace {trace:?}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{Duration, NaiveDate};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn one_block(values: &[f64]) -> DailySeries {
        let start = NaiveDate::from_ymd_opt(2001, 1, 1).unwrap();
        let dates = (0..values.len())
            .map(|i| start + Duration::days(i as i64))
            .collect();
        DailySeries::from_calendar(dates, values.to_vec(), "t").unwrap()
    }

    fn normals(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn pairs_examples() {
        let s = one_block(&[1.0, 2.0, 4.0]);
        let p = TransitionPairs::from_values(&s.values, &s);
        assert_eq!((p.prev, p.incr), (vec![1.0, 2.0], vec![1.0, 2.0]));

        let text = "date,value\n2000-12-30,1\n2000-12-31,2\n2001-01-01,3\n2001-01-02,5\n";
        let s = crate::ingest::read_csv(text.as_bytes(), &Default::default()).unwrap();
        let p = TransitionPairs::from_values(&s.values, &s);
        assert_eq!((p.prev, p.incr), (vec![1.0, 3.0], vec![1.0, 2.0]));
        assert_eq!(p.excluded, 1);

        let text = "date,value\n2000-12-31,2\n2001-01-01,3\n2001-01-02,5\n";
        let s = crate::ingest::read_csv(text.as_bytes(), &Default::default()).unwrap();
        let p = TransitionPairs::from_values(&s.values, &s);
        assert_eq!((p.prev, p.incr), (vec![3.0], vec![2.0]));
    }

    #[test]
    fn make_pairs_requires_enough_transitions() {
        let s = one_block(&[0.0; 50]);
        let z = trend::normalize(&s, None, None).unwrap();
        assert!(matches!(make_pairs(&z), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn drift_loess_is_exact_for_affine_drift() {
        let prev: Vec<f64> = normals(500, 1);
        let incr: Vec<f64> = prev.iter().map(|p| -0.2 * p).collect();
        let pairs = TransitionPairs::from_raw(prev, incr);
        let c = drift_loess(&pairs, &SmootherConfig::with_span(100)).unwrap();
        for (z, v) in c.grid.iter().zip(&c.values) {
            assert!((v + 0.2 * z).abs() < 1e-10);
        }
    }

    #[test]
    fn drift_linear_ls_exact() {
        let prev: Vec<f64> = (0..100).map(|i| i as f64 / 10.0 - 5.0).collect();
        let incr: Vec<f64> = prev.iter().map(|p| 0.1 - 0.3 * p).collect();
        let pairs = TransitionPairs::from_raw(prev, incr);
        let d = drift_linear_ls(&pairs, (-10.0, 10.0)).unwrap();
        assert!((d.alpha - 0.1).abs() < 1e-12 && (d.beta + 0.3).abs() < 1e-12);
        assert!(drift_linear_ls(&pairs, (0.0, 1.0)).is_err());
    }

    #[test]
    fn single_pair_density_is_kernel_peak() {
        let pairs = TransitionPairs::from_raw(vec![0.0], vec![0.0]);
        let cfg = KernelConfig {
            kernel: Kernel::Gaussian,
            bandwidth: 0.3,
        };
        let d = conditional_density(&pairs, 0.0, 0.0, &cfg).unwrap();
        assert!((d - 1.0 / (0.3 * (2.0 * std::f64::consts::PI).sqrt())).abs() < 1e-14);
    }

    #[test]
    fn density_integrates_to_one() {
        let prev = normals(2000, 2);
        let noise = normals(2000, 3);
        let incr: Vec<f64> = prev.iter().zip(&noise).map(|(p, e)| -0.3 * p + 0.5 * e).collect();
        let pairs = TransitionPairs::from_raw(prev, incr);
        for kernel in [Kernel::Gaussian, Kernel::Epanechnikov] {
            let cfg = KernelConfig {
                kernel,
                bandwidth: stats::silverman_bandwidth(&pairs.prev),
            };
            for y in [-1.5, 0.0, 0.7] {
                let xs = stats::linspace(-8.0, 8.0, 4001);
                let ds: Vec<f64> = xs
                    .iter()
                    .map(|&x| conditional_density(&pairs, x, y, &cfg).unwrap())
                    .collect();
                assert!((stats::trapezoid(&xs, &ds) - 1.0).abs() < 1e-3);
            }
        }
        let far = KernelConfig {
            kernel: Kernel::Epanechnikov,
            bandwidth: 0.1,
        };
        assert!(conditional_density(&pairs, 0.0, 50.0, &far).is_err());
    }

    #[test]
    fn moments_of_constant_increments() {
        let pairs = TransitionPairs::from_raw(vec![0.0, 0.1, -0.2, 0.3], vec![0.7; 4]);
        let cfg = KernelConfig {
            kernel: Kernel::Gaussian,
            bandwidth: 0.5,
        };
        let (m, v) = conditional_moments(&pairs, 0.0, &cfg).unwrap();
        assert!((m - 0.7).abs() < 1e-15 && v.abs() < 1e-15);
    }

    fn synthetic_pairs(n: usize, a: impl Fn(f64) -> f64, seed: u64) -> TransitionPairs {
        let eps = normals(n + 1, seed);
        let mut z = 0.0;
        let mut prev = Vec::with_capacity(n);
        let mut incr = Vec::with_capacity(n);
        for e in eps.iter().take(n) {
            let d = -0.2 * z + a(z) * e;
            prev.push(z);
            incr.push(d);
            z += d;
        }
        TransitionPairs::from_raw(prev, incr)
    }

    #[test]
    fn huge_penalty_forces_affine_spline() {
        let pairs = synthetic_pairs(5000, |z| 0.4 + 0.1 * z * z, 4);
        let b = drift_linear_ls(&pairs, pairs.central_interval(0.01, 0.99)).unwrap();
        let knots = default_knots(&pairs, 12);
        let lambda = 1e8 * lambda_scale(&pairs, &b, &knots);
        let fit = penalized_spline_a(&pairs, &b, lambda, &knots).unwrap();
        let grid = fit.grid();
        let a = fit.eval_many(&grid);
        let range = a.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - a.iter().copied().fold(f64::INFINITY, f64::min);
        let curv = fit
            .curvature_many(&grid)
            .iter()
            .fold(0.0f64, |m, c| m.max(c.abs()));
        let level = stats::mean(&a);
        assert!(curv < 1e-6 * level, "curvature {curv} range {range}");
    }

    #[test]
    fn spline_objective_beats_constant_start() {
        let pairs = synthetic_pairs(3000, |z| 0.3 + 0.1 * z.abs(), 5);
        let b = drift_linear_ls(&pairs, pairs.central_interval(0.01, 0.99)).unwrap();
        let knots = default_knots(&pairs, 8);
        let lambda = lambda_scale(&pairs, &b, &knots) * 1e-3;
        let fit = penalized_spline_a(&pairs, &b, lambda, &knots).unwrap();
        let inside = pairs.restrict(knots[0], knots[knots.len() - 1]);
        let rms = (inside
            .prev
            .iter()
            .zip(&inside.incr)
            .map(|(p, d)| (d - b.eval(*p)).powi(2))
            .sum::<f64>()
            / inside.len() as f64)
            .sqrt();
        let flat = spline_objective(&pairs, &b, lambda, &knots, &vec![rms; knots.len()]).unwrap();
        assert!(fit.objective >= flat);
    }

    #[test]
    fn alternate_refit_fixed_point() {
        let pairs = synthetic_pairs(4000, |_| 0.5, 6);
        let b = drift_linear_ls(&pairs, pairs.central_interval(0.01, 0.99)).unwrap();
        let knots = default_knots(&pairs, 6);
        let lambda = lambda_scale(&pairs, &b, &knots) * 1e-2;
        let first = alternate_refit(&pairs, &b, lambda, &knots, 20, 1e-7).unwrap();
        let again = alternate_refit(&pairs, &first.drift, lambda, &knots, 20, 1e-7).unwrap();
        assert_eq!(again.iterations, 0);
    }
}
