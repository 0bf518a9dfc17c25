//! Small descriptive-statistics helpers shared across the crate.
//!
//! Every quantile in the crate goes through [`quantile_sorted`]: linear
//! interpolation between order statistics at position `p(n-1)` (zero-based),
//! the "type 7" definition. Junctions, trims and validation tables all rely
//! on this one convention.

use std::f64::consts::PI;

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Unbiased sample variance; 0 for fewer than two values.
pub fn variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64
}

pub fn std_dev(values: &[f64]) -> f64 {
    variance(values).sqrt()
}

pub fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Type-7 quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty sample");
    let p = p.clamp(0.0, 1.0);
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = h - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

pub fn quantile(values: &[f64], p: f64) -> f64 {
    quantile_sorted(&sorted(values), p)
}

pub fn quantiles(values: &[f64], probs: &[f64]) -> Vec<f64> {
    let s = sorted(values);
    probs.iter().map(|&p| quantile_sorted(&s, p)).collect()
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

pub fn iqr(values: &[f64]) -> f64 {
    let s = sorted(values);
    quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25)
}

/// Silverman's rule of thumb, `0.9 min(sd, IQR/1.34) n^(-1/5)`.
///
/// Falls back to the sd (or 1) when the IQR collapses.
pub fn silverman_bandwidth(values: &[f64]) -> f64 {
    let n = values.len().max(1) as f64;
    let sd = std_dev(values);
    let spread = iqr(values) / 1.34;
    let s = match (sd > 0.0, spread > 0.0) {
        (true, true) => sd.min(spread),
        (true, false) => sd,
        (false, true) => spread,
        (false, false) => 1.0,
    };
    0.9 * s * n.powf(-0.2)
}

/// Sample skewness `m3 / m2^{3/2}` with biased central moments.
pub fn skewness(values: &[f64]) -> f64 {
    let m = mean(values);
    let n = values.len() as f64;
    let m2 = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    let m3 = values.iter().map(|v| (v - m).powi(3)).sum::<f64>() / n;
    m3 / m2.powf(1.5)
}

/// Sample excess kurtosis `m4 / m2^2 - 3`.
pub fn excess_kurtosis(values: &[f64]) -> f64 {
    let m = mean(values);
    let n = values.len() as f64;
    let m2 = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    let m4 = values.iter().map(|v| (v - m).powi(4)).sum::<f64>() / n;
    m4 / (m2 * m2) - 3.0
}

/// `n` equispaced points from `a` to `b` inclusive.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![a],
        _ => (0..n)
            .map(|i| {
                if i == n - 1 {
                    b
                } else {
                    a + (b - a) * i as f64 / (n - 1) as f64
                }
            })
            .collect(),
    }
}

/// Composite Simpson rule over equispaced samples (odd count).
pub fn simpson(values: &[f64], step: f64) -> f64 {
    let n = values.len();
    assert!(n >= 3 && n % 2 == 1, "Simpson needs an odd number of samples");
    let mut s = values[0] + values[n - 1];
    for (i, v) in values.iter().enumerate().take(n - 1).skip(1) {
        s += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    s * step / 3.0
}

/// Trapezoid rule over arbitrary abscissae.
pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xw, yw)| 0.5 * (xw[1] - xw[0]) * (yw[0] + yw[1]))
        .sum()
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Ordinary least squares of `y` on `(1, x)`.
///
/// Returns `(intercept, slope, se_intercept, se_slope, residual_variance)`,
/// or `None` when the design is singular.
pub fn ols_line(x: &[f64], y: &[f64]) -> Option<(f64, f64, f64, f64, f64)> {
    let w = vec![1.0; x.len()];
    wls_line(x, y, &w)
}

/// Weighted least squares of `y` on `(1, x)` with weights `w`.
///
/// Standard errors use the residual variance estimate
/// `sum w r^2 / (n - 2)` scaled through `(X'WX)^{-1}`.
pub fn wls_line(x: &[f64], y: &[f64], w: &[f64]) -> Option<(f64, f64, f64, f64, f64)> {
    let n = x.len();
    if n < 3 {
        return None;
    }
    let sw: f64 = w.iter().sum();
    let xm = x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let ym = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for i in 0..n {
        let dx = x[i] - xm;
        sxx += w[i] * dx * dx;
        sxy += w[i] * dx * (y[i] - ym);
    }
    if !(sxx > 1e-300 * sw.max(1.0)) {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let rss: f64 = (0..n)
        .map(|i| {
            let r = y[i] - intercept - slope * x[i];
            w[i] * r * r
        })
        .sum();
    let s2 = rss / (n - 2) as f64;
    let se_slope = (s2 / sxx).sqrt();
    let se_intercept = (s2 * (1.0 / sw + xm * xm / sxx)).sqrt();
    Some((intercept, slope, se_intercept, se_slope, s2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn type7_quantiles() {
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.5), 3.0);
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((quantile(&v, 0.02) - 2.98).abs() < 1e-12);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 100.0);
    }

    #[test]
    fn moments() {
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(variance(&[1.0, 2.0, 3.0]), 1.0);
        assert_eq!(variance(&[0.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn ols_exact_line() {
        let x: Vec<f64> = (0..20).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.1 - 0.3 * v).collect();
        let (a, b, ..) = ols_line(&x, &y).unwrap();
        assert!((a - 0.1).abs() < 1e-12);
        assert!((b + 0.3).abs() < 1e-12);
        assert!(ols_line(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_none());
    }
}
