//! Natural cubic splines parameterized by their values at the knots.
//!
//! A natural spline is linear in its knot values, so it is handled through
//! cardinal basis functions: `s(z) = sum_k v_k phi_k(z)`. Beyond the end
//! knots the spline continues linearly (zero curvature).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct NaturalSplineBasis {
    knots: Vec<f64>,
    /// Maps knot values to second derivatives at the knots.
    curvature: DMatrix<f64>,
}

impl NaturalSplineBasis {
    pub fn new(knots: &[f64]) -> Result<Self> {
        let k = knots.len();
        if k < 2 {
            return Err(Error::InvalidInput(format!(
                "a spline needs at least two knots, got {k}"
            )));
        }
        if knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput(
                "spline knots must be strictly increasing".into(),
            ));
        }
        let mut curvature = DMatrix::zeros(k, k);
        if k > 2 {
            let m = k - 2;
            let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
            let mut lhs = DMatrix::zeros(m, m);
            let mut rhs = DMatrix::zeros(m, k);
            for r in 0..m {
                let i = r + 1;
                lhs[(r, r)] = 2.0 * (h[i - 1] + h[i]);
                if r > 0 {
                    lhs[(r, r - 1)] = h[i - 1];
                }
                if r + 1 < m {
                    lhs[(r, r + 1)] = h[i];
                }
                rhs[(r, i - 1)] += 6.0 / h[i - 1];
                rhs[(r, i)] -= 6.0 / h[i - 1] + 6.0 / h[i];
                rhs[(r, i + 1)] += 6.0 / h[i];
            }
            let inner = lhs
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::Degenerate("spline curvature system".into()))?;
            for r in 0..m {
                for c in 0..k {
                    curvature[(r + 1, c)] = inner[(r, c)];
                }
            }
        }
        Ok(Self {
            knots: knots.to_vec(),
            curvature,
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn dim(&self) -> usize {
        self.knots.len()
    }

    fn interval(&self, z: f64) -> usize {
        let k = self.knots.len();
        self.knots
            .partition_point(|&t| t <= z)
            .saturating_sub(1)
            .min(k - 2)
    }

    /// Values of every basis function at `z`.
    pub fn row(&self, z: f64) -> Vec<f64> {
        let k = self.knots.len();
        let t = &self.knots;
        let mut out = vec![0.0; k];
        if z < t[0] || z > t[k - 1] {
            // Linear continuation from the nearest end.
            let (i, end) = if z < t[0] { (0, t[0]) } else { (k - 2, t[k - 1]) };
            let h = t[i + 1] - t[i];
            for (c, o) in out.iter_mut().enumerate() {
                let (mi, mj) = (self.curvature[(i, c)], self.curvature[(i + 1, c)]);
                let vi = if c == i { 1.0 } else { 0.0 };
                let vj = if c == i + 1 { 1.0 } else { 0.0 };
                let slope = if z < t[0] {
                    (vj - vi) / h - h * (2.0 * mi + mj) / 6.0
                } else {
                    (vj - vi) / h + h * (mi + 2.0 * mj) / 6.0
                };
                let at_end = if z < t[0] { vi } else { vj };
                *o = at_end + slope * (z - end);
            }
            return out;
        }
        let i = self.interval(z);
        let h = t[i + 1] - t[i];
        let a = (t[i + 1] - z) / h;
        let b = (z - t[i]) / h;
        let ca = (a * a * a - a) * h * h / 6.0;
        let cb = (b * b * b - b) * h * h / 6.0;
        for (c, o) in out.iter_mut().enumerate() {
            *o = ca * self.curvature[(i, c)] + cb * self.curvature[(i + 1, c)];
        }
        out[i] += a;
        out[i + 1] += b;
        out
    }

    /// Second derivatives of every basis function at `z`.
    pub fn curvature_row(&self, z: f64) -> Vec<f64> {
        let k = self.knots.len();
        let t = &self.knots;
        if z < t[0] || z > t[k - 1] {
            return vec![0.0; k];
        }
        let i = self.interval(z);
        let h = t[i + 1] - t[i];
        let a = (t[i + 1] - z) / h;
        let b = (z - t[i]) / h;
        (0..k)
            .map(|c| a * self.curvature[(i, c)] + b * self.curvature[(i + 1, c)])
            .collect()
    }

    pub fn eval(&self, values: &[f64], z: f64) -> f64 {
        self.row(z).iter().zip(values).map(|(p, v)| p * v).sum()
    }

    pub fn eval_curvature(&self, values: &[f64], z: f64) -> f64 {
        self.curvature_row(z)
            .iter()
            .zip(values)
            .map(|(p, v)| p * v)
            .sum()
    }

    /// Gram matrix `int phi_j'' phi_k''` over the knot range, by composite
    /// Simpson on `points` equispaced abscissae.
    pub fn roughness_matrix(&self, points: usize) -> DMatrix<f64> {
        let k = self.dim();
        let t0 = self.knots[0];
        let t1 = self.knots[k - 1];
        let grid = crate::stats::linspace(t0, t1, points);
        let step = (t1 - t0) / (points - 1) as f64;
        let rows: Vec<Vec<f64>> = grid.iter().map(|&z| self.curvature_row(z)).collect();
        let mut omega = DMatrix::zeros(k, k);
        for a in 0..k {
            for b in a..k {
                let vals: Vec<f64> = rows.iter().map(|r| r[a] * r[b]).collect();
                let v = crate::stats::simpson(&vals, step);
                omega[(a, b)] = v;
                omega[(b, a)] = v;
            }
        }
        omega
    }

    /// Basis values at many points, one row per point.
    pub fn design(&self, zs: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(zs.len(), self.dim());
        for (r, &z) in zs.iter().enumerate() {
            for (c, v) in self.row(z).into_iter().enumerate() {
                m[(r, c)] = v;
            }
        }
        m
    }

    pub fn eval_many(&self, values: &[f64], zs: &[f64]) -> Vec<f64> {
        let v = DVector::from_column_slice(values);
        (self.design(zs) * v).as_slice().to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolates_knot_values() {
        let knots = [0.0, 0.5, 1.7, 2.0, 3.5];
        let v = [1.0, -2.0, 0.5, 3.0, 1.0];
        let s = NaturalSplineBasis::new(&knots).unwrap();
        for (t, want) in knots.iter().zip(&v) {
            assert!((s.eval(&v, *t) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn reproduces_affine_functions_with_zero_curvature() {
        let knots = [-2.0, -1.0, 0.3, 1.0, 2.5];
        let v: Vec<f64> = knots.iter().map(|t| 0.4 + 0.7 * t).collect();
        let s = NaturalSplineBasis::new(&knots).unwrap();
        for z in [-3.0, -1.5, 0.0, 0.9, 2.4, 4.0] {
            assert!((s.eval(&v, z) - (0.4 + 0.7 * z)).abs() < 1e-12);
            assert!(s.eval_curvature(&v, z).abs() < 1e-12);
        }
        let omega = s.roughness_matrix(1001);
        let vv = DVector::from_vec(v);
        assert!((vv.transpose() * &omega * &vv)[(0, 0)].abs() < 1e-12);
    }

    #[test]
    fn natural_end_conditions_and_continuity() {
        let knots = [0.0, 1.0, 2.0, 3.0];
        let v = [0.0, 1.0, 0.0, 2.0];
        let s = NaturalSplineBasis::new(&knots).unwrap();
        assert!(s.eval_curvature(&v, 0.0).abs() < 1e-12);
        assert!(s.eval_curvature(&v, 3.0).abs() < 1e-12);
        let e = 1e-7;
        for t in [1.0, 2.0] {
            assert!((s.eval(&v, t - e) - s.eval(&v, t + e)).abs() < 1e-6);
            let dl = (s.eval(&v, t) - s.eval(&v, t - e)) / e;
            let dr = (s.eval(&v, t + e) - s.eval(&v, t)) / e;
            assert!((dl - dr).abs() < 1e-5);
        }
        // Linear continuation joins smoothly at the ends.
        let dl = (s.eval(&v, 3.0 + e) - s.eval(&v, 3.0)) / e;
        let di = (s.eval(&v, 3.0) - s.eval(&v, 3.0 - e)) / e;
        assert!((dl - di).abs() < 1e-5);
    }

    #[test]
    fn rejects_bad_knots() {
        assert!(NaturalSplineBasis::new(&[1.0]).is_err());
        assert!(NaturalSplineBasis::new(&[0.0, 1.0, 1.0]).is_err());
    }
}
