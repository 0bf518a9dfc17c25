//! Long time-scale mean and scale trends, and the normalized series.
//!
//! Trends are smoothed with local-linear LOESS over the in-season record
//! index, so off-season stretches and gaps do not widen a window.

use std::path::Path;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::DailySeries;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKernel {
    Tricube,
    Triangular,
}

impl WeightKernel {
    fn weight(self, u: f64) -> f64 {
        if u >= 1.0 {
            return 0.0;
        }
        match self {
            WeightKernel::Tricube => {
                let t = 1.0 - u * u * u;
                t * t * t
            }
            WeightKernel::Triangular => 1.0 - u,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKernel {
    /// Keep the interior kernel everywhere.
    Same,
    /// Switch to the triangular kernel within half a span of either end.
    Triangular,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmootherConfig {
    /// Number of nearest neighbours in each local fit (days, for time trends).
    pub span: usize,
    /// Local polynomial degree, 0 or 1.
    pub degree: u8,
    pub weight_kernel: WeightKernel,
    pub boundary_kernel: BoundaryKernel,
    pub robust_iters: usize,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        Self {
            span: 1049,
            degree: 1,
            weight_kernel: WeightKernel::Tricube,
            boundary_kernel: BoundaryKernel::Triangular,
            robust_iters: 2,
        }
    }
}

impl SmootherConfig {
    pub fn with_span(span: usize) -> Self {
        Self {
            span,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.degree > 1 {
            return Err(Error::InvalidInput(format!(
                "LOESS degree must be 0 or 1, got {}",
                self.degree
            )));
        }
        if self.span < self.degree as usize + 2 {
            return Err(Error::InvalidInput(format!(
                "span {} too small for degree {}",
                self.span, self.degree
            )));
        }
        Ok(())
    }
}

fn check_inputs(x: &[f64], y: &[f64], cfg: &SmootherConfig) -> Result<()> {
    cfg.validate()?;
    if x.len() != y.len() {
        return Err(Error::InvalidInput(format!(
            "x has {} points but y has {}",
            x.len(),
            y.len()
        )));
    }
    if cfg.span > x.len() {
        return Err(Error::InsufficientData {
            what: "LOESS span".into(),
            needed: cfg.span,
            got: x.len(),
        });
    }
    if x.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidInput("LOESS abscissae must be sorted".into()));
    }
    Ok(())
}

/// Local fit at `x0` over the `span` nearest neighbours of sorted `x`.
fn local_fit(
    x: &[f64],
    y: &[f64],
    robustness: Option<&[f64]>,
    cfg: &SmootherConfig,
    x0: f64,
) -> Result<f64> {
    let n = x.len();
    let q = cfg.span;
    let pos = x.partition_point(|&v| v < x0);
    let mut lo = pos.saturating_sub(q).min(n - q);
    while lo + q < n && x0 - x[lo] > x[lo + q] - x0 {
        lo += 1;
    }
    let hi = lo + q;
    // Widened by 1/q so the farthest neighbour keeps a small positive weight;
    // otherwise a minimal symmetric window would leave a single point.
    let bandwidth = (x0 - x[lo]).max(x[hi - 1] - x0) * (1.0 + 1.0 / q as f64);
    if !(bandwidth > 0.0) {
        return Err(Error::Degenerate(format!(
            "local design at x = {x0}: all abscissae in the window coincide"
        )));
    }

    let left = pos;
    let right = n - x.partition_point(|&v| v <= x0);
    let at_boundary = left < q / 2 || right < q / 2;
    let kernel = match (at_boundary, cfg.boundary_kernel) {
        (true, BoundaryKernel::Triangular) => WeightKernel::Triangular,
        _ => cfg.weight_kernel,
    };

    let solve = |use_robust: bool| -> Option<f64> {
        let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in lo..hi {
            let dx = x[i] - x0;
            let mut w = kernel.weight(dx.abs() / bandwidth);
            if use_robust {
                if let Some(r) = robustness {
                    w *= r[i];
                }
            }
            s0 += w;
            s1 += w * dx;
            s2 += w * dx * dx;
            t0 += w * y[i];
            t1 += w * dx * y[i];
        }
        if !(s0 > 0.0) {
            return None;
        }
        if cfg.degree == 0 {
            return Some(t0 / s0);
        }
        let det = s0 * s2 - s1 * s1;
        if !(det > 1e-12 * s0 * s2) {
            return None;
        }
        Some((s2 * t0 - s1 * t1) / det)
    };

    solve(true)
        .or_else(|| robustness.and_then(|_| solve(false)))
        .ok_or_else(|| {
            Error::Degenerate(format!("local design at x = {x0} is singular"))
        })
}

/// Evaluates the smoother at arbitrary points, optionally with robustness
/// weights attached to the data.
pub fn loess_eval(
    x: &[f64],
    y: &[f64],
    robustness: Option<&[f64]>,
    cfg: &SmootherConfig,
    at: &[f64],
) -> Result<Vec<f64>> {
    check_inputs(x, y, cfg)?;
    at.par_iter()
        .map(|&x0| local_fit(x, y, robustness, cfg, x0))
        .collect()
}

/// Single-pass LOESS fitted values at the data points. `robust_iters` is
/// ignored here; see [`robust_loess_fit`].
pub fn loess_fit(x: &[f64], y: &[f64], cfg: &SmootherConfig) -> Result<Vec<f64>> {
    loess_eval(x, y, None, cfg, x)
}

/// Tukey biweight weights from residuals, cut at six median absolute
/// residuals. Returns `None` when the residuals are numerically zero.
pub fn biweight_weights(residuals: &[f64], scale_hint: f64) -> Option<Vec<f64>> {
    let abs: Vec<f64> = residuals.iter().map(|r| r.abs()).collect();
    let s = stats::median(&abs);
    if !(s > 1e-13 * scale_hint.max(1e-300)) {
        return None;
    }
    let cut = 6.0 * s;
    Some(
        abs.iter()
            .map(|a| {
                let u = a / cut;
                if u < 1.0 {
                    (1.0 - u * u).powi(2)
                } else {
                    0.0
                }
            })
            .collect(),
    )
}

/// Robustness weights after `cfg.robust_iters` biweight passes
/// (`None` = all ones).
pub fn robustness_weights(
    x: &[f64],
    y: &[f64],
    cfg: &SmootherConfig,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let mut fit = loess_fit(x, y, cfg)?;
    let mut weights: Option<Vec<f64>> = None;
    let scale_hint = y.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for _ in 0..cfg.robust_iters {
        let resid: Vec<f64> = y.iter().zip(&fit).map(|(a, b)| a - b).collect();
        let Some(w) = biweight_weights(&resid, scale_hint) else {
            break;
        };
        fit = loess_eval(x, y, Some(&w), cfg, x)?;
        weights = Some(w);
    }
    Ok((fit, weights))
}

/// LOESS with `cfg.robust_iters` Tukey-biweight reweighting passes after the
/// initial fit. With zero passes this is exactly [`loess_fit`].
pub fn robust_loess_fit(x: &[f64], y: &[f64], cfg: &SmootherConfig) -> Result<Vec<f64>> {
    robustness_weights(x, y, cfg).map(|(fit, _)| fit)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendKind {
    Mean,
    Scale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCurve {
    pub kind: TrendKind,
    pub t_index: Vec<usize>,
    pub dates: Vec<NaiveDate>,
    pub fitted: Vec<f64>,
    pub span: usize,
    pub robust_iters: usize,
    /// Grid points where a scale estimate was floored.
    #[serde(default)]
    pub floored: Vec<usize>,
}

impl TrendCurve {
    pub fn len(&self) -> usize {
        self.fitted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fitted.is_empty()
    }

    pub fn constant(series: &DailySeries, kind: TrendKind, value: f64) -> Self {
        Self {
            kind,
            t_index: (0..series.len()).collect(),
            dates: series.dates.clone(),
            fitted: vec![value; series.len()],
            span: 0,
            robust_iters: 0,
            floored: Vec::new(),
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t_index", "date", "fitted"])?;
        for i in 0..self.len() {
            w.write_record([
                self.t_index[i].to_string(),
                self.dates[i].format("%Y-%m-%d").to_string(),
                self.fitted[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn record_grid(series: &DailySeries) -> Vec<f64> {
    (0..series.len()).map(|i| i as f64).collect()
}

pub fn estimate_mean_trend(series: &DailySeries, cfg: &SmootherConfig) -> Result<TrendCurve> {
    if series.len() < 2 * cfg.span {
        return Err(Error::InsufficientData {
            what: "mean trend (two spans of records)".into(),
            needed: 2 * cfg.span,
            got: series.len(),
        });
    }
    let x = record_grid(series);
    let fitted = robust_loess_fit(&x, &series.values, cfg)?;
    Ok(TrendCurve {
        kind: TrendKind::Mean,
        t_index: (0..series.len()).collect(),
        dates: series.dates.clone(),
        fitted,
        span: cfg.span,
        robust_iters: cfg.robust_iters,
        floored: Vec::new(),
    })
}

/// Centered moving mean; windows shrink at the ends.
pub fn moving_average(series: &DailySeries, window: usize) -> Result<TrendCurve> {
    let n = series.len();
    if window == 0 || window > n {
        return Err(Error::InvalidInput(format!(
            "moving-average window {window} not in 1..={n}"
        )));
    }
    let left = (window - 1) / 2;
    let right = window / 2;
    let fitted = (0..n)
        .map(|i| {
            let a = i.saturating_sub(left);
            let b = (i + right + 1).min(n);
            if b - a == 1 {
                series.values[i]
            } else {
                series.values[a..b].iter().sum::<f64>() / (b - a) as f64
            }
        })
        .collect();
    Ok(TrendCurve {
        kind: TrendKind::Mean,
        t_index: (0..n).collect(),
        dates: series.dates.clone(),
        fitted,
        span: window,
        robust_iters: 0,
        floored: Vec::new(),
    })
}

/// Scale trend from LOESS-smoothed squared residuals about the mean trend,
/// with the same span and no robustness iterations.
pub fn estimate_scale_trend(
    series: &DailySeries,
    mean_trend: &TrendCurve,
    cfg: &SmootherConfig,
) -> Result<TrendCurve> {
    if mean_trend.len() != series.len() {
        return Err(Error::InvalidInput(format!(
            "mean trend has {} points, series {}",
            mean_trend.len(),
            series.len()
        )));
    }
    let sq: Vec<f64> = series
        .values
        .iter()
        .zip(&mean_trend.fitted)
        .map(|(x, m)| (x - m) * (x - m))
        .collect();
    let sd = stats::std_dev(&series.values);
    if sq.iter().all(|&v| v <= 1e-24 * (1.0 + sd * sd)) {
        return Err(Error::Degenerate(
            "scale: residuals about the mean trend are all zero".into(),
        ));
    }
    let var_cfg = SmootherConfig {
        robust_iters: 0,
        ..*cfg
    };
    let x = record_grid(series);
    let smoothed = loess_fit(&x, &sq, &var_cfg)?;
    let floor = 1e-6 * sd;
    let mut floored = Vec::new();
    let fitted = smoothed
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let s = if v > 0.0 { v.sqrt() } else { 0.0 };
            if s <= floor {
                floored.push(i);
                floor
            } else {
                s
            }
        })
        .collect();
    if !floored.is_empty() {
        log::warn!("scale trend floored at {} grid points", floored.len());
    }
    Ok(TrendCurve {
        kind: TrendKind::Scale,
        t_index: (0..series.len()).collect(),
        dates: series.dates.clone(),
        fitted,
        span: cfg.span,
        robust_iters: 0,
        floored,
    })
}

/// Series after removing the mean trend and dividing by the scale trend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedSeries {
    pub base: DailySeries,
    pub z: Vec<f64>,
    pub mean_trend: Option<TrendCurve>,
    pub scale_trend: Option<TrendCurve>,
}

impl NormalizedSeries {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// Maps normalized values at record positions back to the data scale.
    pub fn denormalize_at(&self, i: usize, z: f64) -> f64 {
        let s = self.scale_trend.as_ref().map_or(1.0, |c| c.fitted[i]);
        let m = self.mean_trend.as_ref().map_or(0.0, |c| c.fitted[i]);
        s * z + m
    }

    /// Same normalization restricted to the records kept by `keep`.
    pub fn retain(&self, keep: &[bool]) -> Result<Self> {
        let base = self.base.retain(keep)?;
        let pick = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .zip(keep)
                .filter_map(|(x, k)| k.then_some(*x))
                .collect()
        };
        let pick_curve = |c: &TrendCurve| TrendCurve {
            t_index: (0..base.len()).collect(),
            dates: base.dates.clone(),
            fitted: pick(&c.fitted),
            floored: Vec::new(),
            ..c.clone()
        };
        Ok(Self {
            z: pick(&self.z),
            mean_trend: self.mean_trend.as_ref().map(pick_curve),
            scale_trend: self.scale_trend.as_ref().map(pick_curve),
            base,
        })
    }
}

/// `z = (x - m) / s`; `s = 1` without a scale trend and `z = x` without
/// either trend.
pub fn normalize(
    series: &DailySeries,
    mean_trend: Option<&TrendCurve>,
    scale_trend: Option<&TrendCurve>,
) -> Result<NormalizedSeries> {
    let n = series.len();
    for c in mean_trend.iter().chain(scale_trend.iter()) {
        if c.len() != n {
            return Err(Error::InvalidInput(format!(
                "trend grid has {} points, series {n}",
                c.len()
            )));
        }
    }
    if scale_trend.is_some() && mean_trend.is_none() {
        return Err(Error::InvalidInput(
            "a scale trend requires a mean trend".into(),
        ));
    }
    if let Some(s) = scale_trend {
        if let Some(i) = s.fitted.iter().position(|&v| !(v > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "scale trend not positive at record {i}"
            )));
        }
    }
    let z = (0..n)
        .map(|i| {
            let m = mean_trend.map_or(0.0, |c| c.fitted[i]);
            let s = scale_trend.map_or(1.0, |c| c.fitted[i]);
            (series.values[i] - m) / s
        })
        .collect();
    Ok(NormalizedSeries {
        base: series.clone(),
        z,
        mean_trend: mean_trend.cloned(),
        scale_trend: scale_trend.cloned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Duration;
    use nalgebra::{DMatrix, DVector};

    fn series(values: Vec<f64>) -> DailySeries {
        let start = NaiveDate::from_ymd_opt(2000, 1, 1).unwrap();
        let dates = (0..values.len())
            .map(|i| start + Duration::days(i as i64))
            .collect();
        DailySeries::from_calendar(dates, values, "test").unwrap()
    }

    fn cfg(span: usize) -> SmootherConfig {
        SmootherConfig {
            robust_iters: 0,
            ..SmootherConfig::with_span(span)
        }
    }

    #[test]
    fn reproduces_lines_for_every_kernel() {
        let x: Vec<f64> = (0..200).map(|i| i as f64 * 0.37).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        for wk in [WeightKernel::Tricube, WeightKernel::Triangular] {
            for bk in [BoundaryKernel::Same, BoundaryKernel::Triangular] {
                for span in [3, 10, 57, 200] {
                    let c = SmootherConfig {
                        span,
                        degree: 1,
                        weight_kernel: wk,
                        boundary_kernel: bk,
                        robust_iters: 0,
                    };
                    let fit = loess_fit(&x, &y, &c).unwrap();
                    for (f, t) in fit.iter().zip(&y) {
                        assert!((f - t).abs() < 1e-10, "{wk:?} {bk:?} {span}");
                    }
                }
            }
        }
    }

    #[test]
    fn constant_input_gives_constant_fit() {
        let x: Vec<f64> = (0..50).map(f64::from).collect();
        let y = vec![3.25; 50];
        for degree in [0, 1] {
            let c = SmootherConfig { degree, ..cfg(9) };
            assert!(loess_fit(&x, &y, &c)
                .unwrap()
                .iter()
                .all(|v| (v - 3.25).abs() < 1e-12));
        }
    }

    #[test]
    fn interior_point_matches_brute_force_weighted_least_squares() {
        let x: Vec<f64> = (0..40).map(|i| (i as f64).powf(1.1)).collect();
        let y: Vec<f64> = x.iter().map(|v| (v * 0.3).sin() + 0.05 * v).collect();
        let c = cfg(11);
        let i0 = 20;
        let x0 = x[i0];
        // Oracle: the 11 nearest neighbours by brute force, tricube weights,
        // full weighted least squares via a QR-free normal-equation solve.
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&a, &b| (x[a] - x0).abs().total_cmp(&(x[b] - x0).abs()));
        let window = &idx[..11];
        let h = window.iter().map(|&i| (x[i] - x0).abs()).fold(0.0, f64::max) * (1.0 + 1.0 / 11.0);
        let mut a = DMatrix::zeros(11, 2);
        let mut b = DVector::zeros(11);
        for (r, &i) in window.iter().enumerate() {
            let u = (x[i] - x0).abs() / h;
            let w = if u < 1.0 { (1.0 - u.powi(3)).powi(3) } else { 0.0 };
            a[(r, 0)] = w.sqrt();
            a[(r, 1)] = w.sqrt() * x[i];
            b[r] = w.sqrt() * y[i];
        }
        let coef = (a.transpose() * &a)
            .lu()
            .solve(&(a.transpose() * b))
            .unwrap();
        let expected = coef[0] + coef[1] * x0;
        let fit = loess_fit(&x, &y, &c).unwrap();
        assert!((fit[i0] - expected).abs() < 1e-10);
    }

    #[test]
    fn loess_errors() {
        let x = vec![0.0, 1.0, 2.0];
        assert!(loess_fit(&x, &[1.0, 2.0, 3.0], &cfg(4)).is_err());
        let flat = vec![1.0; 10];
        assert!(matches!(
            loess_fit(&flat, &flat, &cfg(4)),
            Err(Error::Degenerate(_))
        ));
        assert!(SmootherConfig { span: 2, ..cfg(2) }.validate().is_err());
    }

    #[test]
    fn robust_zero_iterations_is_plain_loess() {
        let x: Vec<f64> = (0..60).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| (v * 0.2).cos()).collect();
        assert_eq!(
            robust_loess_fit(&x, &y, &cfg(15)).unwrap(),
            loess_fit(&x, &y, &cfg(15)).unwrap()
        );
        let lin: Vec<f64> = x.iter().map(|v| 0.5 * v - 2.0).collect();
        let robust = SmootherConfig { robust_iters: 3, ..cfg(15) };
        assert_eq!(
            robust_loess_fit(&x, &lin, &robust).unwrap(),
            loess_fit(&x, &lin, &cfg(15)).unwrap()
        );
    }

    #[test]
    fn robust_fit_resists_an_outlier() {
        let x: Vec<f64> = (0..101).map(f64::from).collect();
        // Deterministic small wiggle so residuals are not all zero.
        let clean: Vec<f64> = x
            .iter()
            .map(|v| 1.0 + 0.1 * v + 0.05 * (v * 1.7).sin())
            .collect();
        let mut dirty = clean.clone();
        dirty[50] += 40.0;
        let c = cfg(21);
        let rc = SmootherConfig { robust_iters: 4, ..c };
        let plain = loess_fit(&x, &dirty, &c).unwrap();
        let robust = robust_loess_fit(&x, &dirty, &rc).unwrap();
        // Oracle: plain fit with the outlier removed.
        let xs: Vec<f64> = x.iter().enumerate().filter(|(i, _)| *i != 50).map(|(_, v)| *v).collect();
        let ys: Vec<f64> = clean.iter().enumerate().filter(|(i, _)| *i != 50).map(|(_, v)| *v).collect();
        let oracle = loess_eval(&xs, &ys, None, &c, &x).unwrap();
        for i in [45, 48, 49, 51, 52, 55] {
            let dev_plain = (plain[i] - oracle[i]).abs();
            let dev_robust = (robust[i] - oracle[i]).abs();
            assert!(dev_plain > 0.5);
            assert!(dev_robust < 0.1 * dev_plain, "i={i}: {dev_robust} vs {dev_plain}");
        }
    }

    #[test]
    fn moving_average_cases() {
        let s = series(vec![4.0; 9]);
        assert!(moving_average(&s, 3).unwrap().fitted.iter().all(|v| *v == 4.0));
        let mut imp = vec![0.0; 9];
        imp[4] = 1.0;
        let ma = moving_average(&series(imp), 3).unwrap().fitted;
        for (i, v) in ma.iter().enumerate() {
            let want = if (3..=5).contains(&i) { 1.0 / 3.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-15);
        }
        let lin: Vec<f64> = (0..20).map(|i| 2.0 * i as f64).collect();
        let ma = moving_average(&series(lin.clone()), 5).unwrap().fitted;
        for i in 2..18 {
            assert!((ma[i] - lin[i]).abs() < 1e-12);
        }
        assert!(moving_average(&series(vec![1.0; 3]), 4).is_err());
    }

    #[test]
    fn scale_trend_degenerate_when_mean_equals_series() {
        let s = series((0..40).map(|i| (i as f64).sin()).collect());
        let m = TrendCurve {
            fitted: s.values.clone(),
            ..TrendCurve::constant(&s, TrendKind::Mean, 0.0)
        };
        assert!(matches!(
            estimate_scale_trend(&s, &m, &cfg(9)),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn normalize_round_trip_and_identities() {
        let s = series((0..30).map(|i| 10.0 + (i as f64 * 0.7).sin()).collect());
        let z = normalize(&s, None, None).unwrap();
        assert_eq!(z.z, s.values);
        let m = TrendCurve {
            fitted: s.values.clone(),
            ..TrendCurve::constant(&s, TrendKind::Mean, 0.0)
        };
        assert!(normalize(&s, Some(&m), None).unwrap().z.iter().all(|v| *v == 0.0));
        let m = TrendCurve::constant(&s, TrendKind::Mean, 9.5);
        let sc = TrendCurve {
            fitted: (0..30).map(|i| 1.0 + 0.1 * i as f64).collect(),
            ..TrendCurve::constant(&s, TrendKind::Scale, 1.0)
        };
        let z = normalize(&s, Some(&m), Some(&sc)).unwrap();
        for i in 0..30 {
            let back = z.denormalize_at(i, z.z[i]);
            assert!(((back - s.values[i]) / s.values[i]).abs() < 1e-12);
        }
        let short = TrendCurve::constant(&series(vec![1.0; 5]), TrendKind::Mean, 0.0);
        assert!(normalize(&s, Some(&short), None).is_err());
    }
}
