//! Synthetic series with known trends and dynamics, for tests and fixtures.

use chrono::{Duration, NaiveDate};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::extremes::BoundaryInfo;
use crate::ingest::DailySeries;
use crate::pestim::{self, CentralPoly, Diffusion, DriftParams, PiecewiseDiffusion, TailPiece};
use crate::sim::{self, BoundaryPolicy};

/// `n_seasons` runs of `season_len` consecutive days starting each June 1st
/// from `start_year`.
pub fn seasonal_dates(n_seasons: usize, season_len: usize, start_year: i32) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n_seasons * season_len);
    for y in 0..n_seasons {
        let start = NaiveDate::from_ymd_opt(start_year + y as i32, 6, 1).expect("valid date");
        out.extend((0..season_len).map(|i| start + Duration::days(i as i64)));
    }
    out
}

/// Unit-variance Gaussian AR(1) series.
pub fn ar1(n: usize, phi: f64, seed: u64) -> Vec<f64> {
    let mut rng = sim::path_rng(seed, 0);
    let sd = (1.0 - phi * phi).sqrt();
    let mut x: f64 = rng.sample(StandardNormal);
    (0..n)
        .map(|i| {
            if i > 0 {
                let e: f64 = rng.sample(StandardNormal);
                x = phi * x + sd * e;
            }
            x
        })
        .collect()
}

/// Euler path of `model` after 200 discarded steps from its start state.
pub fn euler_path<D: Diffusion + ?Sized>(model: &D, n: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = sim::path_rng(seed, 0);
    let burn = sim::simulate_path(model, sim::start_state(model), 201, &mut rng, BoundaryPolicy::Resample, 100)?;
    let start = burn.values[200];
    Ok(sim::simulate_path(model, start, n, &mut rng, BoundaryPolicy::Resample, 100)?.values)
}

/// `x_t = scale(u) z_t + mean(u)` with `u = t / (n - 1)` the record
/// position in `[0, 1]`.
pub fn compose(
    dates: Vec<NaiveDate>,
    z: &[f64],
    mean: impl Fn(f64) -> f64,
    scale: impl Fn(f64) -> f64,
) -> Result<DailySeries> {
    let n = z.len();
    let values = z
        .iter()
        .enumerate()
        .map(|(t, v)| {
            let u = t as f64 / (n.max(2) - 1) as f64;
            scale(u) * v + mean(u)
        })
        .collect();
    DailySeries::from_calendar(dates, values, "06-01 onwards")
}

/// Slow sinusoid plus ramp.
pub fn reference_mean(u: f64) -> f64 {
    10.0 + 2.0 * (1.5 * std::f64::consts::PI * u).sin() + 1.5 * u
}

/// Linear ramp from 1 to 2.
pub fn reference_scale(u: f64) -> f64 {
    1.0 + u
}

/// Mean-reverting model with a quadratic central diffusion coefficient and
/// quadratic tails vanishing at -3 and 3.
pub fn reference_model() -> PiecewiseDiffusion {
    let central = CentralPoly::on_domain(vec![0.45, 0.0, 0.08], (-2.0, 2.0));
    let lower = pestim::build_tail_quadratic(&central, -3.0, -2.0, 0.4).expect("feasible tail");
    let upper = pestim::build_tail_quadratic(&central, 3.0, 2.0, -0.4).expect("feasible tail");
    pestim::assemble(
        DriftParams::new(0.0, -0.2),
        central,
        TailPiece::Quadratic(lower),
        TailPiece::Quadratic(upper),
        BoundaryInfo::manual(Some(-3.0), Some(3.0)),
    )
    .expect("consistent reference model")
}

/// Observations from [`reference_model`] carried by [`reference_mean`] and
/// [`reference_scale`].
pub fn reference_series(n_seasons: usize, season_len: usize, seed: u64) -> Result<DailySeries> {
    let dates = seasonal_dates(n_seasons, season_len, 1961);
    let z = euler_path(&reference_model(), dates.len(), seed)?;
    compose(dates, &z, reference_mean, reference_scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_determinism() {
        let s = reference_series(4, 30, 1).unwrap();
        assert_eq!(s.len(), 120);
        assert_eq!(s.block_lengths(), vec![30; 4]);
        assert_eq!(s, reference_series(4, 30, 1).unwrap());
        let m = reference_model();
        assert!(s.values.iter().all(|v| v.is_finite()));
        assert!((m.eval_diff(-2.0).unwrap() - m.central.eval(-2.0)).abs() < 1e-12);
    }

    #[test]
    fn ar1_has_unit_variance() {
        let x = ar1(50_000, 0.7, 2);
        assert!((crate::stats::variance(&x) - 1.0).abs() < 0.05);
    }
}
