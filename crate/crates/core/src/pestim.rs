//! Parametric estimation of the diffusion model, tail grafting, residual
//! diagnostics.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::extremes::{self, BoundaryInfo, GevParams, LemmaVariant, Tail};
use crate::npestim::{self, KernelConfig, TransitionPairs};
use crate::optim::{self, NewtonOptions, Objective};
use crate::stats;
use crate::trend::NormalizedSeries;

/// Drift, diffusion coefficient and open support of a one-day Euler model.
pub trait Diffusion: Sync {
    fn drift(&self, z: f64) -> f64;
    fn diffusion(&self, z: f64) -> f64;
    /// Open support `(lower, upper)`, possibly infinite.
    fn support(&self) -> (f64, f64);
}

/// Linear drift with a constant diffusion coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantDiffusion {
    pub alpha: f64,
    pub beta: f64,
    pub a: f64,
}

impl Diffusion for ConstantDiffusion {
    fn drift(&self, z: f64) -> f64 {
        self.alpha + self.beta * z
    }
    fn diffusion(&self, _z: f64) -> f64 {
        self.a
    }
    fn support(&self) -> (f64, f64) {
        (f64::NEG_INFINITY, f64::INFINITY)
    }
}

/// Linear drift `b(z) = alpha + beta z`, per day on the normalized scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftParams {
    pub alpha: f64,
    pub beta: f64,
    /// Standard errors of `(alpha, beta)`.
    pub se: [f64; 2],
}

impl DriftParams {
    pub fn new(alpha: f64, beta: f64) -> Self {
        Self {
            alpha,
            beta,
            se: [0.0, 0.0],
        }
    }

    pub fn eval(&self, z: f64) -> f64 {
        self.alpha + self.beta * z
    }
}

/// Polynomial diffusion coefficient on the central domain, in the scaled
/// argument `u = (z - center) / half_width`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralPoly {
    /// Coefficients of `u^0, u^1, ...`.
    pub coeffs: Vec<f64>,
    pub center: f64,
    pub half_width: f64,
    pub domain: (f64, f64),
    /// Standard errors of `coeffs`, empty when unavailable.
    #[serde(default)]
    pub se: Vec<f64>,
}

impl CentralPoly {
    pub fn on_domain(coeffs: Vec<f64>, domain: (f64, f64)) -> Self {
        Self {
            coeffs,
            center: 0.5 * (domain.0 + domain.1),
            half_width: 0.5 * (domain.1 - domain.0),
            domain,
            se: Vec::new(),
        }
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    fn scaled(&self, z: f64) -> f64 {
        (z - self.center) / self.half_width
    }

    pub fn eval(&self, z: f64) -> f64 {
        let u = self.scaled(z);
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * u + c)
    }

    pub fn derivative(&self, z: f64) -> f64 {
        let u = self.scaled(z);
        let mut acc = 0.0;
        for (k, c) in self.coeffs.iter().enumerate().skip(1).rev() {
            acc = acc * u + k as f64 * c;
        }
        acc / self.half_width
    }

    /// Minimum over an evenly spaced grid on the domain.
    pub fn min_on_domain(&self, points: usize) -> f64 {
        stats::linspace(self.domain.0, self.domain.1, points)
            .into_iter()
            .map(|z| self.eval(z))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Quadratic diffusion coefficient between a finite endpoint and a junction,
/// stored in powers of `(z - endpoint)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailQuadratic {
    pub coeffs: [f64; 3],
    pub side: Tail,
    pub junction: f64,
    pub endpoint: f64,
}

impl TailQuadratic {
    pub fn eval(&self, z: f64) -> f64 {
        let t = z - self.endpoint;
        self.coeffs[0] + t * (self.coeffs[1] + t * self.coeffs[2])
    }

    pub fn derivative(&self, z: f64) -> f64 {
        self.coeffs[1] + 2.0 * self.coeffs[2] * (z - self.endpoint)
    }

    /// The quadratic through `(r, 0)` and `(q, value)` with slope `slope`
    /// at `q`.
    pub fn through(r: f64, q: f64, value: f64, slope: f64) -> Result<Self> {
        let side = if r < q {
            Tail::Lower
        } else if r > q {
            Tail::Upper
        } else {
            return Err(Error::Degenerate(format!(
                "tail quadratic: endpoint equals junction ({r})"
            )));
        };
        let h = q - r;
        let m = Matrix3::new(1.0, 0.0, 0.0, 1.0, h, h * h, 0.0, 1.0, 2.0 * h);
        let rhs = Vector3::new(0.0, value, slope);
        let sol = m
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Degenerate("tail quadratic: singular system".into()))?;
        let tail = Self {
            coeffs: [sol[0], sol[1], sol[2]],
            side,
            junction: q,
            endpoint: r,
        };
        let sign = h.signum();
        let grid = stats::linspace(r, q, 201);
        let interior_ok = value > 0.0
            && tail.coeffs[1] * sign >= 0.0
            && grid[1..].iter().all(|&z| tail.eval(z) > 0.0);
        if !interior_ok {
            return Err(Error::ConstraintsIncompatible(format!(
                "tail quadratic with a({q}) = {value}, a'({q}) = {slope}, a({r}) = 0 is not positive in between"
            )));
        }
        Ok(tail)
    }
}

/// Largest (lower side) or smallest (upper side) junction slope for which a
/// positive tail quadratic exists; `slope` is returned unchanged when it is
/// already admissible, together with a flag telling whether it was moved.
pub fn admissible_slope(r: f64, q: f64, value: f64, slope: f64) -> (f64, bool) {
    let h = q - r;
    let bound = 2.0 * value / h;
    if (h > 0.0 && slope > bound) || (h < 0.0 && slope < bound) {
        (bound, true)
    } else {
        (slope, false)
    }
}

/// Tail quadratic grafted onto `central` at `q`, vanishing at `r`, with
/// slope `d` at the junction.
pub fn build_tail_quadratic(central: &CentralPoly, r: f64, q: f64, d: f64) -> Result<TailQuadratic> {
    let v = central.eval(q);
    if !(v > 0.0) {
        return Err(Error::ConstraintsIncompatible(format!(
            "central diffusion coefficient is not positive at the junction {q} ({v})"
        )));
    }
    TailQuadratic::through(r, q, v, d)
}

/// Junction slope from the boundary form of the diffusion coefficient.
pub fn junction_slope(
    drift: &DriftParams,
    gev: &GevParams,
    q: f64,
    variant: LemmaVariant,
) -> Result<f64> {
    extremes::tail_linear_slope(drift.eval(q), drift.beta, gev, q, variant)
}

/// How the diffusion coefficient continues past a junction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TailPiece {
    Quadratic(TailQuadratic),
    /// The central polynomial itself.
    Central,
    /// Constant at the junction value.
    Flat { level: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TailPolicy {
    #[default]
    Quadratic,
    UseCentral,
}

/// Assembled drift and piecewise diffusion coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseDiffusion {
    pub drift: DriftParams,
    pub central: CentralPoly,
    pub lower_tail: TailPiece,
    pub upper_tail: TailPiece,
    pub boundaries: BoundaryInfo,
    pub junctions: (f64, f64),
}

/// Tolerance for continuity of the diffusion coefficient at junctions.
pub const CONTINUITY_TOL: f64 = 1e-8;

pub fn assemble(
    drift: DriftParams,
    central: CentralPoly,
    lower_tail: TailPiece,
    upper_tail: TailPiece,
    boundaries: BoundaryInfo,
) -> Result<PiecewiseDiffusion> {
    let (ql, qu) = central.domain;
    if !(ql < qu) {
        return Err(Error::InvalidInput(format!("empty central domain [{ql}, {qu}]")));
    }
    if central.min_on_domain(201) <= 0.0 {
        return Err(Error::ConstraintsIncompatible(
            "central diffusion coefficient is not positive on its domain".into(),
        ));
    }
    if !(boundaries.lower() < ql && boundaries.upper() > qu) {
        return Err(Error::InvalidInput(format!(
            "boundaries ({}, {}) must lie outside the junctions ({ql}, {qu})",
            boundaries.lower(),
            boundaries.upper()
        )));
    }
    for (piece, q, r, side) in [
        (&lower_tail, ql, boundaries.r_lower, Tail::Lower),
        (&upper_tail, qu, boundaries.r_upper, Tail::Upper),
    ] {
        let v = central.eval(q);
        match piece {
            TailPiece::Central => {}
            TailPiece::Flat { level } => {
                if (level - v).abs() > CONTINUITY_TOL {
                    return Err(Error::ConstraintsIncompatible(format!(
                        "flat tail level {level} differs from a({q}) = {v}"
                    )));
                }
            }
            TailPiece::Quadratic(t) => {
                if t.side != side || Some(t.endpoint) != r || t.junction != q {
                    return Err(Error::InvalidInput(format!(
                        "{side:?} tail quadratic does not match junction {q} and boundary {r:?}"
                    )));
                }
                if (t.eval(q) - v).abs() > CONTINUITY_TOL {
                    return Err(Error::ConstraintsIncompatible(format!(
                        "diffusion coefficient jumps at junction {q}: {} vs {v}",
                        t.eval(q)
                    )));
                }
            }
        }
    }
    Ok(PiecewiseDiffusion {
        drift,
        central,
        lower_tail,
        upper_tail,
        boundaries,
        junctions: (ql, qu),
    })
}

impl PiecewiseDiffusion {
    pub fn eval_drift(&self, z: f64) -> f64 {
        self.drift.eval(z)
    }

    /// Diffusion coefficient; only defined inside the open support.
    pub fn eval_diff(&self, z: f64) -> Result<f64> {
        let (lo, hi) = (self.boundaries.lower(), self.boundaries.upper());
        if !(z > lo && z < hi) {
            return Err(Error::OutsideSupport {
                z,
                lower: lo,
                upper: hi,
            });
        }
        Ok(self.diff_unchecked(z))
    }

    fn diff_unchecked(&self, z: f64) -> f64 {
        let piece = if z < self.junctions.0 {
            &self.lower_tail
        } else if z > self.junctions.1 {
            &self.upper_tail
        } else {
            &TailPiece::Central
        };
        let v = match piece {
            TailPiece::Central => self.central.eval(z),
            TailPiece::Flat { level } => *level,
            TailPiece::Quadratic(t) => t.eval(z),
        };
        v.max(0.0)
    }

    /// `a` on `zs`, with zero outside the support.
    pub fn eval_diff_many(&self, zs: &[f64]) -> Vec<f64> {
        zs.iter()
            .map(|&z| self.eval_diff(z).unwrap_or(0.0))
            .collect()
    }
}

impl Diffusion for PiecewiseDiffusion {
    fn drift(&self, z: f64) -> f64 {
        self.drift.eval(z)
    }
    fn diffusion(&self, z: f64) -> f64 {
        self.eval_diff(z).unwrap_or(0.0)
    }
    fn support(&self) -> (f64, f64) {
        (self.boundaries.lower(), self.boundaries.upper())
    }
}

/// Points of the positivity grid for the central polynomial.
const POSITIVITY_GRID: usize = 201;

struct JointProblem {
    prev: Vec<f64>,
    incr: Vec<f64>,
    /// Powers of the scaled argument per pair.
    powers: Vec<Vec<f64>>,
    check: Vec<Vec<f64>>,
}

impl JointProblem {
    fn new(pairs: &TransitionPairs, poly: &CentralPoly) -> Self {
        let deg = poly.degree();
        let pow = |z: f64| {
            let u = poly.scaled(z);
            let mut v = Vec::with_capacity(deg + 1);
            let mut p = 1.0;
            for _ in 0..=deg {
                v.push(p);
                p *= u;
            }
            v
        };
        Self {
            prev: pairs.prev.clone(),
            incr: pairs.incr.clone(),
            powers: pairs.prev.iter().map(|&z| pow(z)).collect(),
            check: stats::linspace(poly.domain.0, poly.domain.1, POSITIVITY_GRID)
                .into_iter()
                .map(pow)
                .collect(),
        }
    }

    fn poly(c: &[f64], powers: &[f64]) -> f64 {
        c.iter().zip(powers).map(|(c, p)| c * p).sum()
    }

    fn feasible(&self, c: &[f64]) -> bool {
        self.check.iter().all(|pw| Self::poly(c, pw) > 0.0)
    }

    fn value(&self, theta: &[f64]) -> Option<f64> {
        let (alpha, beta, c) = (theta[0], theta[1], &theta[2..]);
        if !self.feasible(c) {
            return None;
        }
        let mut ll = 0.0;
        for i in 0..self.prev.len() {
            let p = Self::poly(c, &self.powers[i]);
            if !(p > 0.0) {
                return None;
            }
            let r = self.incr[i] - alpha - beta * self.prev[i];
            ll += -0.5 * (r / p).powi(2) - p.ln();
        }
        Some(ll)
    }

    fn objective(&self, theta: &[f64]) -> Option<Objective> {
        let value = self.value(theta)?;
        let (alpha, beta, c) = (theta[0], theta[1], &theta[2..]);
        let dim = theta.len();
        let mut grad = DVector::zeros(dim);
        let mut hess = DMatrix::zeros(dim, dim);
        for i in 0..self.prev.len() {
            let x = self.prev[i];
            let pw = &self.powers[i];
            let p = Self::poly(c, pw);
            let r = self.incr[i] - alpha - beta * x;
            let p2 = p * p;
            let p3 = p2 * p;
            let lin = [1.0, x];
            let dp = r * r / p3 - 1.0 / p;
            let dpp = -3.0 * r * r / (p3 * p) + 1.0 / p2;
            for a in 0..2 {
                grad[a] += r * lin[a] / p2;
                for b in 0..2 {
                    hess[(a, b)] -= lin[a] * lin[b] / p2;
                }
                for k in 0..pw.len() {
                    let v = -2.0 * r * lin[a] * pw[k] / p3;
                    hess[(a, 2 + k)] += v;
                    hess[(2 + k, a)] += v;
                }
            }
            for k in 0..pw.len() {
                grad[2 + k] += dp * pw[k];
                for l in 0..pw.len() {
                    hess[(2 + k, 2 + l)] += dpp * pw[k] * pw[l];
                }
            }
        }
        Some(Objective { value, grad, hess })
    }
}

/// Result of [`fit_joint_mle`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointFit {
    pub drift: DriftParams,
    pub central: CentralPoly,
    pub loglik: f64,
    pub initial_loglik: f64,
    pub iterations: usize,
    pub n_pairs: usize,
}

/// Least-squares polynomial in the scaled argument through `(zs, values)`.
fn poly_least_squares(zs: &[f64], values: &[f64], template: &CentralPoly) -> Option<Vec<f64>> {
    let k = template.coeffs.len();
    let m = DMatrix::from_fn(zs.len(), k, |i, j| template.scaled(zs[i]).powi(j as i32));
    let y = DVector::from_column_slice(values);
    let sol = m.svd(true, true).solve(&y, 1e-12).ok()?;
    Some(sol.iter().copied().collect())
}

/// Joint Gaussian maximum likelihood for the linear drift and the central
/// polynomial diffusion coefficient, over pairs with `prev` in the central
/// interval `[q_0.01, q_0.99]` of `prev`.
pub fn fit_joint_mle(pairs: &TransitionPairs, degree_a: usize) -> Result<JointFit> {
    let domain = pairs.central_interval(0.01, 0.99);
    fit_joint_mle_on(pairs, degree_a, domain)
}

/// [`fit_joint_mle`] on an explicit central domain.
pub fn fit_joint_mle_on(
    pairs: &TransitionPairs,
    degree_a: usize,
    domain: (f64, f64),
) -> Result<JointFit> {
    if !(domain.0 < domain.1) {
        return Err(Error::Degenerate(format!(
            "central domain [{}, {}] is empty",
            domain.0, domain.1
        )));
    }
    let drift0 = npestim::drift_linear_ls(pairs, domain)?;
    let inside = pairs.restrict(domain.0, domain.1);
    let needed = 2 * (degree_a + 3);
    if inside.len() < needed {
        return Err(Error::InsufficientData {
            what: "joint likelihood pairs".into(),
            needed,
            got: inside.len(),
        });
    }
    let template = CentralPoly::on_domain(vec![0.0; degree_a + 1], domain);
    let problem = JointProblem::new(&inside, &template);

    let resid_rms = (inside
        .prev
        .iter()
        .zip(&inside.incr)
        .map(|(p, d)| (d - drift0.eval(*p)).powi(2))
        .sum::<f64>()
        / inside.len() as f64)
        .sqrt();
    if !(resid_rms > 0.0) {
        return Err(Error::Degenerate("joint likelihood: residuals are all zero".into()));
    }
    let mut flat = vec![0.0; degree_a + 1];
    flat[0] = resid_rms;

    let kernel_start = (|| {
        let grid = stats::linspace(domain.0, domain.1, npestim::CURVE_GRID);
        let (_, a_k) = npestim::kernel_curves(&inside, &grid, &KernelConfig::silverman(&inside)).ok()?;
        let (zs, vs): (Vec<f64>, Vec<f64>) = grid
            .iter()
            .zip(&a_k.values)
            .filter(|(_, v)| v.is_finite())
            .map(|(z, v)| (*z, *v))
            .unzip();
        if zs.len() < degree_a + 1 {
            return None;
        }
        poly_least_squares(&zs, &vs, &template)
    })();

    let mut candidates: Vec<Vec<f64>> = Vec::new();
    if let Some(c) = kernel_start {
        candidates.push(c);
    }
    candidates.push(flat);
    let start = candidates
        .into_iter()
        .map(|c| {
            let mut t = vec![drift0.alpha, drift0.beta];
            t.extend(c);
            t
        })
        .filter_map(|t| problem.value(&t).map(|v| (t, v)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or_else(|| Error::ConstraintsIncompatible("no feasible starting point".into()))?;

    let best = optim::damped_newton(|t| problem.objective(t), &start.0, NewtonOptions::default())
        .ok_or_else(|| Error::NoConvergence {
            what: "joint likelihood".into(),
            iterations: 0,
            detail: "infeasible start".into(),
        })?;
    if !best.converged {
        return Err(Error::NoConvergence {
            what: "joint likelihood".into(),
            iterations: best.iterations,
            detail: format!("best iterate {:?} with log-likelihood {}", best.x, best.value),
        });
    }
    let hess = optim::numeric_hessian(
        |t| problem.value(t).unwrap_or(f64::NEG_INFINITY),
        &best.x,
    );
    let se = optim::standard_errors(&hess).unwrap_or_else(|| {
        log::warn!("joint likelihood: observed information is not positive definite");
        vec![f64::NAN; best.x.len()]
    });
    let se: Vec<f64> = se.into_iter().map(|s| if s.is_finite() { s } else { 0.0 }).collect();

    let mut central = template;
    central.coeffs = best.x[2..].to_vec();
    central.se = se[2..].to_vec();
    Ok(JointFit {
        drift: DriftParams {
            alpha: best.x[0],
            beta: best.x[1],
            se: [se[0], se[1]],
        },
        central,
        loglik: best.value,
        initial_loglik: start.1,
        iterations: best.iterations,
        n_pairs: inside.len(),
    })
}

/// Standardized innovations aligned with the pairs they come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSeries {
    pub eps: Vec<f64>,
    pub index: Vec<usize>,
}

/// Smallest diffusion coefficient accepted as a divisor.
pub const EPS_FLOOR: f64 = 1e-8;

pub fn residuals<D: Diffusion + ?Sized>(pairs: &TransitionPairs, model: &D) -> Result<ResidualSeries> {
    let mut eps = Vec::with_capacity(pairs.len());
    let mut bad = Vec::new();
    let (lo, hi) = model.support();
    for i in 0..pairs.len() {
        let z = pairs.prev[i];
        let a = if z > lo && z < hi { model.diffusion(z) } else { 0.0 };
        if !(a > EPS_FLOOR) {
            bad.push(pairs.index[i]);
            continue;
        }
        eps.push((pairs.incr[i] - model.drift(z)) / a);
    }
    if !bad.is_empty() {
        let shown: Vec<String> = bad.iter().take(20).map(|i| i.to_string()).collect();
        return Err(Error::Degenerate(format!(
            "diffusion coefficient below {EPS_FLOOR} at {} record(s): {}{}",
            bad.len(),
            shown.join(", "),
            if bad.len() > 20 { ", ..." } else { "" }
        )));
    }
    Ok(ResidualSeries {
        eps,
        index: pairs.index.clone(),
    })
}

/// One entry of the whiteness battery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhitenessCheck {
    pub name: String,
    #[serde(deserialize_with = "crate::nullable::f64")]
    pub statistic: f64,
    #[serde(deserialize_with = "crate::nullable::f64")]
    pub p_value: f64,
    /// `p_value` times the number of checks, capped at 1.
    #[serde(deserialize_with = "crate::nullable::f64")]
    pub adjusted_p: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhitenessReport {
    pub n: usize,
    pub mean: f64,
    pub mean_se: f64,
    pub variance: f64,
    pub variance_se: f64,
    pub skewness: f64,
    pub skewness_se: f64,
    pub excess_kurtosis: f64,
    pub kurtosis_se: f64,
    /// Autocorrelations at lags `1..=max_lag`.
    pub acf: Vec<f64>,
    pub acf_squared: Vec<f64>,
    /// Ljung-Box p-values using lags `1..=k`, for each `k`.
    pub ljung_box_p: Vec<f64>,
    pub ljung_box_squared_p: Vec<f64>,
    pub ks_statistic: f64,
    pub qq_max_deviation: f64,
    pub alpha: f64,
    pub checks: Vec<WhitenessCheck>,
    pub pass: bool,
}

pub const WHITENESS_LAGS: usize = 20;

fn normal_two_sided(z: f64) -> f64 {
    let n = Normal::standard();
    2.0 * n.sf(z.abs())
}

fn autocorrelations(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let m = stats::mean(x);
    let c0: f64 = x.iter().map(|v| (v - m) * (v - m)).sum();
    (1..=max_lag)
        .map(|k| {
            if k >= n || c0 <= 0.0 {
                return 0.0;
            }
            (k..n).map(|t| (x[t] - m) * (x[t - k] - m)).sum::<f64>() / c0
        })
        .collect()
}

fn ljung_box(acf: &[f64], n: usize) -> Vec<f64> {
    let n_f = n as f64;
    let mut q = 0.0;
    acf.iter()
        .enumerate()
        .map(|(i, r)| {
            let k = i + 1;
            q += r * r / (n_f - k as f64);
            let stat = n_f * (n_f + 2.0) * q;
            ChiSquared::new(k as f64).map(|c| c.sf(stat)).unwrap_or(f64::NAN)
        })
        .collect()
}

/// Asymptotic Kolmogorov distribution tail with Stephens' small-sample
/// correction.
fn kolmogorov_p(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Moments, serial dependence of `eps` and `eps^2`, and normality of the
/// standardized innovations. The battery passes when every check's
/// Bonferroni-adjusted p-value exceeds `alpha`.
pub fn whiteness_tests(eps: &ResidualSeries, alpha: f64) -> Result<WhitenessReport> {
    let x = &eps.eps;
    let n = x.len();
    if n < 100 {
        return Err(Error::InsufficientData {
            what: "residual whiteness battery".into(),
            needed: 100,
            got: n,
        });
    }
    let n_f = n as f64;
    let mean = stats::mean(x);
    let variance = stats::variance(x);
    let skewness = stats::skewness(x);
    let kurt = stats::excess_kurtosis(x);
    let mean_se = 1.0 / n_f.sqrt();
    let variance_se = (2.0 / (n_f - 1.0)).sqrt();
    let skewness_se = (6.0 / n_f).sqrt();
    let kurtosis_se = (24.0 / n_f).sqrt();

    let acf = autocorrelations(x, WHITENESS_LAGS);
    let sq: Vec<f64> = x.iter().map(|v| v * v).collect();
    let acf_squared = autocorrelations(&sq, WHITENESS_LAGS);
    let ljung_box_p = ljung_box(&acf, n);
    let ljung_box_squared_p = ljung_box(&acf_squared, n);

    let s = stats::sorted(x);
    let normal = Normal::standard();
    let mut ks: f64 = 0.0;
    let mut qq: f64 = 0.0;
    for (i, v) in s.iter().enumerate() {
        let f = normal.cdf(*v);
        ks = ks.max(f - i as f64 / n_f).max((i + 1) as f64 / n_f - f);
        let theo = normal.inverse_cdf((i as f64 + 0.5) / n_f);
        qq = qq.max((v - theo).abs());
    }

    let raw = [
        ("mean", mean / mean_se, normal_two_sided(mean / mean_se)),
        (
            "variance",
            (variance - 1.0) / variance_se,
            normal_two_sided((variance - 1.0) / variance_se),
        ),
        ("skewness", skewness / skewness_se, normal_two_sided(skewness / skewness_se)),
        ("kurtosis", kurt / kurtosis_se, normal_two_sided(kurt / kurtosis_se)),
        ("ljung_box", WHITENESS_LAGS as f64, ljung_box_p[WHITENESS_LAGS - 1]),
        (
            "ljung_box_squared",
            WHITENESS_LAGS as f64,
            ljung_box_squared_p[WHITENESS_LAGS - 1],
        ),
        ("kolmogorov_smirnov", ks, kolmogorov_p(ks, n)),
    ];
    let m = raw.len() as f64;
    let checks: Vec<WhitenessCheck> = raw
        .iter()
        .map(|(name, stat, p)| {
            let adjusted_p = (p * m).min(1.0);
            WhitenessCheck {
                name: name.to_string(),
                statistic: *stat,
                p_value: *p,
                adjusted_p,
                pass: adjusted_p > alpha,
            }
        })
        .collect();
    let pass = checks.iter().all(|c| c.pass);
    Ok(WhitenessReport {
        n,
        mean,
        mean_se,
        variance,
        variance_se,
        skewness,
        skewness_se,
        excess_kurtosis: kurt,
        kurtosis_se,
        acf,
        acf_squared,
        ljung_box_p,
        ljung_box_squared_p,
        ks_statistic: ks,
        qq_max_deviation: qq,
        alpha,
        checks,
        pass,
    })
}

/// Mask keeping values inside `[q_{p_low}, q_{1 - p_high}]`.
pub fn trim_mask(values: &[f64], p_low: f64, p_high: f64) -> Result<Vec<bool>> {
    if !(p_low >= 0.0 && p_high >= 0.0 && p_low + p_high < 0.5) {
        return Err(Error::InvalidInput(format!(
            "trim fractions ({p_low}, {p_high}) must be non-negative with sum below 0.5"
        )));
    }
    let s = stats::sorted(values);
    let lo = stats::quantile_sorted(&s, p_low);
    let hi = stats::quantile_sorted(&s, 1.0 - p_high);
    Ok(values.iter().map(|v| *v >= lo && *v <= hi).collect())
}

/// Copy of `z` without its extreme values; removed records become gaps so
/// transitions across them disappear.
pub fn trim_sample(z: &NormalizedSeries, p_low: f64, p_high: f64) -> Result<NormalizedSeries> {
    let mask = trim_mask(&z.z, p_low, p_high)?;
    z.retain(&mask)
}

/// L1 distance between two coefficient vectors.
pub fn robustness_delta(theta_x: &[f64], theta_y: &[f64]) -> Result<f64> {
    if theta_x.len() != theta_y.len() {
        return Err(Error::InvalidInput(format!(
            "coefficient vectors differ in length ({} vs {})",
            theta_x.len(),
            theta_y.len()
        )));
    }
    Ok(theta_x.iter().zip(theta_y).map(|(a, b)| (a - b).abs()).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryVerdict {
    /// The scale function diverges: the boundary cannot be reached.
    Inaccessible,
    /// No divergence seen before the cutoff.
    Inconclusive,
    /// The side has no finite boundary.
    NotEquipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleFunction {
    pub z0: f64,
    pub grid: Vec<f64>,
    /// `s'` on the grid; `None` where it overflows.
    pub s_prime: Vec<Option<f64>>,
    pub s: Vec<Option<f64>>,
    pub lower: BoundaryVerdict,
    pub upper: BoundaryVerdict,
    /// `|s|` reached at the cutoff on each side.
    pub lower_extent: Option<f64>,
    pub upper_extent: Option<f64>,
}

/// Distance from a finite boundary where the integration stops.
pub const SCALE_CUTOFF: f64 = 1e-4;
/// `|s|` beyond which the scale function counts as divergent.
pub const SCALE_DIVERGENCE: f64 = 1e6;

/// Integrates `(y1, y2)' = (2 b / a^2, exp(-y1))` with RK4 from `from` to
/// `to`, returning `None` once the state overflows.
fn rk4_scale<D: Diffusion + ?Sized>(model: &D, state: (f64, f64), from: f64, to: f64, steps: usize) -> Option<(f64, f64)> {
    let f = |z: f64, y1: f64| {
        let a = model.diffusion(z);
        (2.0 * model.drift(z) / (a * a), (-y1).exp())
    };
    let h = (to - from) / steps as f64;
    let (mut y1, mut y2) = state;
    let mut z = from;
    for _ in 0..steps {
        let k1 = f(z, y1);
        let k2 = f(z + 0.5 * h, y1 + 0.5 * h * k1.0);
        let k3 = f(z + 0.5 * h, y1 + 0.5 * h * k2.0);
        let k4 = f(z + h, y1 + h * k3.0);
        y1 += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        y2 += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        z += h;
        if !(y1.is_finite() && y2.is_finite()) || y1.abs() > 700.0 {
            return None;
        }
    }
    Some((y1, y2))
}

fn integrate_to<D: Diffusion + ?Sized>(model: &D, z0: f64, targets: &[f64]) -> Vec<Option<(f64, f64)>> {
    const MAX_STEP: f64 = 1e-3;
    let mut out = vec![None; targets.len()];
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by(|&a, &b| targets[a].total_cmp(&targets[b]));
    let (below, above): (Vec<usize>, Vec<usize>) = order.into_iter().partition(|&i| targets[i] < z0);
    for side in [above, below.into_iter().rev().collect::<Vec<_>>()] {
        let mut state = Some((0.0, 0.0));
        let mut at = z0;
        for i in side {
            let to = targets[i];
            state = state.and_then(|s| {
                let steps = (((to - at).abs() / MAX_STEP).ceil() as usize).max(1);
                rk4_scale(model, s, at, to, steps)
            });
            at = to;
            out[i] = state;
        }
    }
    out
}

fn boundary_verdict<D: Diffusion + ?Sized>(model: &D, z0: f64, r: f64) -> (BoundaryVerdict, Option<f64>) {
    if !r.is_finite() {
        return (BoundaryVerdict::NotEquipped, None);
    }
    let d0 = (z0 - r).abs();
    if d0 <= SCALE_CUTOFF {
        return (BoundaryVerdict::Inconclusive, None);
    }
    let dir = (r - z0).signum();
    const MESH: usize = 400;
    const SUBSTEPS: usize = 16;
    let ratio = (SCALE_CUTOFF / d0).powf(1.0 / MESH as f64);
    let mut state = (0.0, 0.0);
    let mut at = z0;
    let mut dist = d0;
    for _ in 0..MESH {
        dist *= ratio;
        let to = r - dir * dist;
        match rk4_scale(model, state, at, to, SUBSTEPS) {
            Some(s) => state = s,
            None => return (BoundaryVerdict::Inaccessible, None),
        }
        at = to;
        if state.1.abs() > SCALE_DIVERGENCE {
            return (BoundaryVerdict::Inaccessible, Some(state.1.abs()));
        }
    }
    (BoundaryVerdict::Inconclusive, Some(state.1.abs()))
}

/// Scale function `s(x) = int_{z0}^{x} exp(-int_{z0}^{y} 2 b / a^2)` on
/// `grid`, and whether it diverges towards each finite boundary.
pub fn scale_function_diagnostic<D: Diffusion + ?Sized>(model: &D, grid: &[f64], z0: f64) -> Result<ScaleFunction> {
    let (lo, hi) = model.support();
    if !(z0 > lo && z0 < hi) || model.diffusion(z0) <= 0.0 {
        return Err(Error::OutsideSupport {
            z: z0,
            lower: lo,
            upper: hi,
        });
    }
    let inside: Vec<f64> = grid
        .iter()
        .map(|&z| z.clamp(lo + SCALE_CUTOFF, hi - SCALE_CUTOFF))
        .collect();
    let states = integrate_to(model, z0, &inside);
    let (lower, lower_extent) = boundary_verdict(model, z0, lo);
    let (upper, upper_extent) = boundary_verdict(model, z0, hi);
    Ok(ScaleFunction {
        z0,
        grid: grid.to_vec(),
        s_prime: states.iter().map(|s| s.map(|s| (-s.0).exp())).collect(),
        s: states.iter().map(|s| s.map(|s| s.1)).collect(),
        lower,
        upper,
        lower_extent,
        upper_extent,
    })
}
