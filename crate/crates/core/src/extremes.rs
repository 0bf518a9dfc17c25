//! Block extremes, GEV fits and the boundary constraints they imply.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::ingest::YearBlock;
use crate::optim::{self, NelderMeadOptions};
use crate::stats;

/// Shapes with `|xi|` below this are treated as Gumbel-ambiguous.
pub const GUMBEL_BAND: f64 = 1e-4;

const Z90: f64 = 1.644_853_626_951_472_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tail {
    Upper,
    Lower,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Max,
    Min,
}

/// One extreme per block, plus the blocks that were too short to use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockExtremes {
    pub values: Vec<f64>,
    pub used_blocks: Vec<usize>,
    pub dropped_blocks: Vec<usize>,
}

/// Takes the maximum (or minimum) of each block. Blocks shorter than half
/// the modal block length are dropped and reported.
pub fn block_extremes(
    values: &[f64],
    blocks: &[YearBlock],
    direction: Direction,
    min_blocks: usize,
) -> Result<BlockExtremes> {
    let mut counts = std::collections::BTreeMap::new();
    for b in blocks {
        *counts.entry(b.len).or_insert(0usize) += 1;
    }
    let modal = counts
        .iter()
        .max_by_key(|(len, c)| (**c, **len))
        .map(|(len, _)| *len)
        .unwrap_or(0);
    let mut out = BlockExtremes {
        values: Vec::new(),
        used_blocks: Vec::new(),
        dropped_blocks: Vec::new(),
    };
    for (i, b) in blocks.iter().enumerate() {
        if b.len == 0 || 2 * b.len < modal {
            out.dropped_blocks.push(i);
            continue;
        }
        let slice = &values[b.range()];
        let v = match direction {
            Direction::Max => slice.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Direction::Min => slice.iter().copied().fold(f64::INFINITY, f64::min),
        };
        out.values.push(v);
        out.used_blocks.push(i);
    }
    if out.values.len() < min_blocks {
        return Err(Error::InsufficientData {
            what: "block extremes".into(),
            needed: min_blocks,
            got: out.values.len(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GevParams {
    pub mu: f64,
    pub sigma: f64,
    pub xi: f64,
    /// Standard errors of `(mu, sigma, xi)`.
    pub se: [f64; 3],
    /// Normal-approximation 90% intervals for `(mu, sigma, xi)`.
    pub ci90: [[f64; 2]; 3],
    pub tail: Tail,
    pub n_blocks: usize,
    #[serde(deserialize_with = "crate::nullable::f64")]
    pub loglik: f64,
    /// Finite endpoint on the tail side, when `xi` is clearly negative.
    pub endpoint: Option<f64>,
}

impl GevParams {
    /// Parameters without uncertainty, mainly for evaluation and tests.
    pub fn new(mu: f64, sigma: f64, xi: f64, tail: Tail) -> Self {
        let mut g = Self {
            mu,
            sigma,
            xi,
            se: [0.0; 3],
            ci90: [[mu, mu], [sigma, sigma], [xi, xi]],
            tail,
            n_blocks: 0,
            loglik: f64::NAN,
            endpoint: None,
        };
        g.endpoint = endpoint(&g).ok();
        g
    }

    /// Upper-tail parameters of the negated variable for a lower-tail fit.
    fn as_upper(&self) -> (f64, f64, f64) {
        match self.tail {
            Tail::Upper => (self.mu, self.sigma, self.xi),
            Tail::Lower => (-self.mu, self.sigma, self.xi),
        }
    }
}

/// Upper endpoint `mu - sigma/xi` (lower endpoint `mu + sigma/xi` for a
/// lower-tail fit).
pub fn endpoint(gev: &GevParams) -> Result<f64> {
    if gev.xi.abs() < GUMBEL_BAND {
        return Err(Error::GumbelAmbiguous { xi: gev.xi });
    }
    if gev.xi >= 0.0 {
        return Err(Error::UnboundedTail { xi: gev.xi });
    }
    let (mu, sigma, xi) = gev.as_upper();
    let r = mu - sigma / xi;
    Ok(match gev.tail {
        Tail::Upper => r,
        Tail::Lower => -r,
    })
}

fn upper_cdf(mu: f64, sigma: f64, xi: f64, x: f64) -> f64 {
    let y = (x - mu) / sigma;
    if xi.abs() < 1e-12 {
        return (-(-y).exp()).exp();
    }
    let t = 1.0 + xi * y;
    if t <= 0.0 {
        return if xi > 0.0 { 0.0 } else { 1.0 };
    }
    (-t.powf(-1.0 / xi)).exp()
}

fn upper_quantile(mu: f64, sigma: f64, xi: f64, p: f64) -> f64 {
    let l = -p.ln();
    if xi.abs() < 1e-12 {
        mu - sigma * l.ln()
    } else {
        mu + sigma * (l.powf(-xi) - 1.0) / xi
    }
}

/// Distribution function of the block extreme. Outside the support the
/// result is 0 or 1 according to the side.
pub fn gev_cdf(gev: &GevParams, x: f64) -> f64 {
    let (mu, sigma, xi) = gev.as_upper();
    match gev.tail {
        Tail::Upper => upper_cdf(mu, sigma, xi, x),
        Tail::Lower => 1.0 - upper_cdf(mu, sigma, xi, -x),
    }
}

/// Exact inverse of [`gev_cdf`] for `0 < p < 1`.
pub fn gev_quantile(gev: &GevParams, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidInput(format!("probability {p} not in (0, 1)")));
    }
    let (mu, sigma, xi) = gev.as_upper();
    Ok(match gev.tail {
        Tail::Upper => upper_quantile(mu, sigma, xi, p),
        Tail::Lower => -upper_quantile(mu, sigma, xi, 1.0 - p),
    })
}

/// GEV log-likelihood of upper-tail data (without constants). Returns
/// `-inf` outside the support or for non-positive scale.
pub fn gev_loglik(data: &[f64], mu: f64, sigma: f64, xi: f64) -> f64 {
    if !(sigma > 0.0) || !mu.is_finite() || !xi.is_finite() {
        return f64::NEG_INFINITY;
    }
    let n = data.len() as f64;
    let mut ll = -n * sigma.ln();
    if xi.abs() < 1e-7 {
        for &x in data {
            let y = (x - mu) / sigma;
            ll -= y + (-y).exp();
        }
        return ll;
    }
    let inv = 1.0 / xi;
    for &x in data {
        let t = 1.0 + xi * (x - mu) / sigma;
        if !(t > 0.0) {
            return f64::NEG_INFINITY;
        }
        let lt = t.ln();
        ll -= (1.0 + inv) * lt + (-inv * lt).exp();
    }
    ll
}

/// Probability-weighted-moment estimates (Hosking, Wallis & Wood).
pub fn gev_pwm(data: &[f64]) -> Result<(f64, f64, f64)> {
    let n = data.len();
    if n < 3 {
        return Err(Error::InsufficientData {
            what: "GEV probability-weighted moments".into(),
            needed: 3,
            got: n,
        });
    }
    let s = stats::sorted(data);
    let nf = n as f64;
    let mut b0 = 0.0;
    let mut b1 = 0.0;
    let mut b2 = 0.0;
    for (i, &x) in s.iter().enumerate() {
        let j = i as f64;
        b0 += x;
        b1 += j / (nf - 1.0) * x;
        b2 += j * (j - 1.0) / ((nf - 1.0) * (nf - 2.0)) * x;
    }
    b0 /= nf;
    b1 /= nf;
    b2 /= nf;
    let l2 = 2.0 * b1 - b0;
    if !(l2 > 0.0) {
        return Err(Error::Degenerate("GEV fit: data have no spread".into()));
    }
    let c = l2 / (3.0 * b2 - b0) - std::f64::consts::LN_2 / 3f64.ln();
    let k = (7.8590 * c + 2.9554 * c * c).clamp(-0.9, 0.9);
    if k.abs() < 1e-6 {
        let sigma = l2 / std::f64::consts::LN_2;
        return Ok((b0 - 0.577_215_664_901_532_9 * sigma, sigma, 0.0));
    }
    let g = gamma(1.0 + k);
    let sigma = l2 * k / (g * (1.0 - 2f64.powf(-k)));
    let mu = b0 + sigma * (g - 1.0) / k;
    Ok((mu, sigma, -k))
}

#[derive(Debug, Clone, Copy)]
pub struct GevFitOptions {
    pub restarts: usize,
    pub seed: u64,
    pub simplex: NelderMeadOptions,
}

impl Default for GevFitOptions {
    fn default() -> Self {
        Self {
            restarts: 3,
            seed: 0x05ee_d6e7,
            simplex: NelderMeadOptions {
                max_evals: 4000,
                f_tol: 1e-8,
                x_tol: 1e-7,
            },
        }
    }
}

/// Maximum-likelihood GEV fit of block maxima.
///
/// Data are standardized by the probability-weighted-moment start, so the
/// search is affine-equivariant; the simplex runs over `(m, log s, xi)` in
/// standardized units with `xi` restricted to `(-1, inf)`, where the
/// likelihood is bounded.
pub fn fit_gev(extremes: &[f64], opts: &GevFitOptions) -> Result<GevParams> {
    let n = extremes.len();
    if n < 3 {
        return Err(Error::InsufficientData {
            what: "GEV fit".into(),
            needed: 3,
            got: n,
        });
    }
    if let Some(x) = extremes.iter().find(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite block extreme {x}")));
    }
    let (mu0, sigma0, xi0) = gev_pwm(extremes)?;
    let y: Vec<f64> = extremes.iter().map(|x| (x - mu0) / sigma0).collect();

    let objective = |p: &[f64]| -> f64 {
        if p[2] <= -1.0 {
            return f64::INFINITY;
        }
        -gev_loglik(&y, p[0], p[1].exp(), p[2])
    };

    // Pull an infeasible moment start back towards Gumbel until it covers
    // the data.
    let mut start = vec![0.0, 0.0, xi0];
    let mut shrink = 0;
    while !objective(&start).is_finite() && shrink < 60 {
        start[2] *= 0.5;
        start[1] += 0.05;
        shrink += 1;
    }
    let start_ll = -objective(&start);

    let steps = [0.2, 0.2, 0.1];
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut starts = vec![start.clone()];
    for _ in 0..opts.restarts {
        let jitter = |rng: &mut ChaCha8Rng, s: f64| s * rng.sample::<f64, _>(StandardNormal);
        let cand = vec![
            start[0] + jitter(&mut rng, 0.3),
            start[1] + jitter(&mut rng, 0.2),
            (start[2] + jitter(&mut rng, 0.1)).max(-0.9),
        ];
        starts.push(cand);
    }

    let mut best: Option<optim::Minimum> = None;
    for s in &starts {
        if !objective(s).is_finite() {
            continue;
        }
        let m = optim::nelder_mead(objective, s, &steps, opts.simplex);
        if best.as_ref().is_none_or(|b| m.value < b.value) {
            best = Some(m);
        }
    }
    let Some(mut best) = best else {
        return Err(Error::NoConvergence {
            what: "GEV fit".into(),
            iterations: 0,
            detail: "no feasible starting point".into(),
        });
    };
    // Polish from the best point with a fresh, smaller simplex.
    let polish = optim::nelder_mead(objective, &best.x, &[0.02, 0.02, 0.01], opts.simplex);
    if polish.value <= best.value {
        best = optim::Minimum {
            converged: polish.converged,
            ..polish
        };
    }
    if !best.converged {
        return Err(Error::NoConvergence {
            what: "GEV fit".into(),
            iterations: best.evals,
            detail: format!(
                "best so far mu = {}, sigma = {}, xi = {}",
                mu0 + sigma0 * best.x[0],
                sigma0 * best.x[1].exp(),
                best.x[2]
            ),
        });
    }

    let (m, s, xi) = (best.x[0], best.x[1].exp(), best.x[2]);
    let ll_std = -best.value;
    if ll_std < start_ll {
        return Err(Error::NoConvergence {
            what: "GEV fit".into(),
            iterations: best.evals,
            detail: "optimum worse than start".into(),
        });
    }
    let hess = optim::numeric_hessian(|p| gev_loglik(&y, p[0], p[1], p[2]), &[m, s, xi]);
    let se_std = optim::standard_errors(&hess).ok_or_else(|| {
        Error::Degenerate("GEV fit: observed information is not positive definite".into())
    })?;

    let mu = mu0 + sigma0 * m;
    let sigma = sigma0 * s;
    let se = [sigma0 * se_std[0], sigma0 * se_std[1], se_std[2]];
    let est = [mu, sigma, xi];
    let ci90 = std::array::from_fn(|i| [est[i] - Z90 * se[i], est[i] + Z90 * se[i]]);
    let mut g = GevParams {
        mu,
        sigma,
        xi,
        se,
        ci90,
        tail: Tail::Upper,
        n_blocks: n,
        loglik: ll_std - n as f64 * sigma0.ln(),
        endpoint: None,
    };
    g.endpoint = endpoint(&g).ok();
    Ok(g)
}

/// Fits block minima by negation: the upper-tail fit of `-x` mapped back
/// with `mu -> -mu` and the endpoint mirrored.
pub fn fit_gev_minima(minima: &[f64], opts: &GevFitOptions) -> Result<GevParams> {
    let neg: Vec<f64> = minima.iter().map(|x| -x).collect();
    let up = fit_gev(&neg, opts)?;
    let mut g = GevParams {
        mu: -up.mu,
        ci90: [[-up.ci90[0][1], -up.ci90[0][0]], up.ci90[1], up.ci90[2]],
        tail: Tail::Lower,
        endpoint: None,
        ..up
    };
    g.endpoint = endpoint(&g).ok();
    Ok(g)
}

pub fn fit_block_extremes(
    extremes: &[f64],
    direction: Direction,
    opts: &GevFitOptions,
) -> Result<GevParams> {
    match direction {
        Direction::Max => fit_gev(extremes, opts),
        Direction::Min => fit_gev_minima(extremes, opts),
    }
}

/// Which factor multiplies the plug-in boundary form of the diffusion
/// coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LemmaVariant {
    /// `-1/xi`.
    #[default]
    PlugIn,
    /// `-1/xi - 1`.
    Lemma,
}

impl LemmaVariant {
    pub fn factor(self, xi: f64) -> f64 {
        match self {
            LemmaVariant::PlugIn => -1.0 / xi,
            LemmaVariant::Lemma => -1.0 / xi - 1.0,
        }
    }
}

fn tail_side_check(gev: &GevParams, x: f64) -> Result<f64> {
    let r = endpoint(gev)?;
    let inside = match gev.tail {
        Tail::Upper => x <= r,
        Tail::Lower => x >= r,
    };
    if !inside {
        let (lower, upper) = match gev.tail {
            Tail::Upper => (f64::NEG_INFINITY, r),
            Tail::Lower => (r, f64::INFINITY),
        };
        return Err(Error::OutsideSupport { z: x, lower, upper });
    }
    Ok(r)
}

/// Plug-in boundary form of the diffusion coefficient,
/// `-2 b(x) (r - x) c(xi)`, with `r` the endpoint on the fitted tail's side.
/// The same expression is non-negative on both sides for a mean-reverting
/// drift; a negative value is reported as a sign misconfiguration.
pub fn tail_linear_form<B>(b: B, gev: &GevParams, x: f64, variant: LemmaVariant) -> Result<f64>
where
    B: Fn(f64) -> f64,
{
    let r = tail_side_check(gev, x)?;
    let v = -2.0 * b(x) * (r - x) * variant.factor(gev.xi);
    if v < 0.0 {
        return Err(Error::ConstraintsIncompatible(format!(
            "boundary form is negative ({v}) at x = {x}: drift is not mean-reverting towards the bound"
        )));
    }
    Ok(v)
}

/// Derivative in `x` of [`tail_linear_form`], given `b(x)` and `b'(x)`:
/// `-2 c (b'(x) (r - x) - b(x))`.
pub fn tail_linear_slope(
    b_value: f64,
    b_slope: f64,
    gev: &GevParams,
    x: f64,
    variant: LemmaVariant,
) -> Result<f64> {
    let r = tail_side_check(gev, x)?;
    Ok(-2.0 * variant.factor(gev.xi) * (b_slope * (r - x) - b_value))
}

/// Finite or infinite inaccessible boundaries of the normalized process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryInfo {
    /// `None` means `-inf`.
    pub r_lower: Option<f64>,
    /// `None` means `+inf`.
    pub r_upper: Option<f64>,
    pub source: BoundarySource,
    pub xi_lower: Option<f64>,
    pub xi_upper: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundarySource {
    Gev,
    Manual,
}

impl BoundaryInfo {
    pub fn unbounded() -> Self {
        Self {
            r_lower: None,
            r_upper: None,
            source: BoundarySource::Manual,
            xi_lower: None,
            xi_upper: None,
        }
    }

    pub fn manual(r_lower: Option<f64>, r_upper: Option<f64>) -> Self {
        Self {
            r_lower,
            r_upper,
            ..Self::unbounded()
        }
    }

    /// Endpoints from lower- and upper-tail fits; a tail without a clearly
    /// negative shape leaves that side unbounded.
    pub fn from_gev(lower: Option<&GevParams>, upper: Option<&GevParams>) -> Self {
        Self {
            r_lower: lower.and_then(|g| endpoint(g).ok()),
            r_upper: upper.and_then(|g| endpoint(g).ok()),
            source: BoundarySource::Gev,
            xi_lower: lower.map(|g| g.xi),
            xi_upper: upper.map(|g| g.xi),
        }
    }

    pub fn lower(&self) -> f64 {
        self.r_lower.unwrap_or(f64::NEG_INFINITY)
    }

    pub fn upper(&self) -> f64 {
        self.r_upper.unwrap_or(f64::INFINITY)
    }

    /// Checks `r_lower < min(z)` and `r_upper > max(z)`.
    pub fn check_contains(&self, z: &[f64]) -> Result<()> {
        let lo = z.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(self.lower() < lo && self.upper() > hi) {
            return Err(Error::InvalidInput(format!(
                "boundaries ({}, {}) do not strictly contain the data range [{lo}, {hi}]",
                self.lower(),
                self.upper()
            )));
        }
        Ok(())
    }
}
