//! Optimizers used by the likelihood fits.
//!
//! * [`nelder_mead`]: derivative-free simplex search (GEV fits, where the
//!   likelihood has a moving support and is non-smooth near xi = 0).
//! * [`damped_newton`]: Levenberg-damped Newton ascent for the smooth
//!   diffusion likelihoods, where analytic gradients and Hessians are cheap.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct NelderMeadOptions {
    pub max_evals: usize,
    /// Relative tolerance on the spread of objective values over the simplex.
    pub f_tol: f64,
    /// Absolute tolerance on the simplex diameter.
    pub x_tol: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self {
            max_evals: 20_000,
            f_tol: 1e-8,
            x_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Minimize `f` starting from `x0` with initial simplex offsets `steps`.
///
/// Non-finite objective values are treated as `+inf`, so constraint
/// violations can be signalled by returning `f64::INFINITY` (or NaN).
pub fn nelder_mead<F>(mut f: F, x0: &[f64], steps: &[f64], opts: NelderMeadOptions) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(dim + 1);
    simplex.push(x0.to_vec());
    for i in 0..dim {
        let mut p = x0.to_vec();
        p[i] += steps[i];
        simplex.push(p);
    }
    let mut values: Vec<f64> = simplex.iter().map(|p| eval(p, &mut evals)).collect();

    // Adaptive coefficients (Gao & Han) behave better beyond a few dimensions.
    let n = dim as f64;
    let (alpha, gamma, rho, shrink) = if dim > 2 {
        (1.0, 1.0 + 2.0 / n, 0.75 - 1.0 / (2.0 * n), 1.0 - 1.0 / n)
    } else {
        (1.0, 2.0, 0.5, 0.5)
    };

    let mut converged = false;
    while evals < opts.max_evals {
        let mut order: Vec<usize> = (0..=dim).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let best = values[0];
        let worst = values[dim];
        let spread = worst - best;
        let diameter = simplex[1..]
            .iter()
            .flat_map(|p| p.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if best.is_finite()
            && spread.is_finite()
            && spread <= opts.f_tol * best.abs() + 1e-14
            && diameter <= opts.x_tol
        {
            converged = true;
            break;
        }

        let mut centroid = vec![0.0; dim];
        for p in &simplex[..dim] {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v / n;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&simplex[dim])
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };

        let reflected = along(alpha);
        let fr = eval(&reflected, &mut evals);
        if fr < values[0] {
            let expanded = along(alpha * gamma);
            let fe = eval(&expanded, &mut evals);
            if fe < fr {
                simplex[dim] = expanded;
                values[dim] = fe;
            } else {
                simplex[dim] = reflected;
                values[dim] = fr;
            }
            continue;
        }
        if fr < values[dim - 1] {
            simplex[dim] = reflected;
            values[dim] = fr;
            continue;
        }
        let (contracted, fc) = if fr < values[dim] {
            let c = along(alpha * rho);
            let v = eval(&c, &mut evals);
            (c, v)
        } else {
            let c = along(-rho);
            let v = eval(&c, &mut evals);
            (c, v)
        };
        if fc < values[dim].min(fr) {
            simplex[dim] = contracted;
            values[dim] = fc;
            continue;
        }
        for i in 1..=dim {
            let p: Vec<f64> = simplex[0]
                .iter()
                .zip(&simplex[i])
                .map(|(b, x)| b + shrink * (x - b))
                .collect();
            values[i] = eval(&p, &mut evals);
            simplex[i] = p;
        }
    }

    let best = (0..=dim)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]))
        .unwrap_or(0);
    Minimum {
        x: simplex[best].clone(),
        value: values[best],
        evals,
        converged,
    }
}

/// Objective value with its gradient and Hessian.
#[derive(Debug, Clone)]
pub struct Objective {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub max_iter: usize,
    /// Relative tolerance on the objective change of an accepted step.
    pub f_tol: f64,
    /// Stop once the Newton decrement `g' (-H)^{-1} g / 2` falls below this.
    pub decrement_tol: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            f_tol: 1e-14,
            decrement_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Maximum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Maximize a smooth objective with Levenberg-damped Newton steps.
///
/// `eval` returns `None` for infeasible points; such steps are rejected and
/// the damping increased. The start must be feasible.
pub fn damped_newton<F>(mut eval: F, x0: &[f64], opts: NewtonOptions) -> Option<Maximum>
where
    F: FnMut(&[f64]) -> Option<Objective>,
{
    let dim = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let mut cur = eval(x.as_slice())?;
    if !cur.value.is_finite() {
        return None;
    }
    let mut mu = 1e-6;
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iter {
        let neg_h = -&cur.hess;
        let scale: Vec<f64> = (0..dim)
            .map(|i| neg_h[(i, i)].abs().max(1e-12))
            .collect();

        // Undamped Newton decrement as the stopping test.
        if let Some(ch) = neg_h.clone().cholesky() {
            let step = ch.solve(&cur.grad);
            let dec = 0.5 * cur.grad.dot(&step);
            if dec.abs() <= opts.decrement_tol * (1.0 + cur.value.abs()) {
                converged = true;
                break;
            }
        }

        let mut damped = neg_h.clone();
        for i in 0..dim {
            damped[(i, i)] += mu * scale[i];
        }
        let step = match damped.cholesky() {
            Some(ch) => ch.solve(&cur.grad),
            None => {
                mu = (mu * 10.0).max(1e-4);
                if mu > 1e20 {
                    break;
                }
                continue;
            }
        };
        iterations += 1;
        let cand_x = &x + &step;
        match eval(cand_x.as_slice()) {
            Some(cand) if cand.value.is_finite() && cand.value >= cur.value => {
                let gain = cand.value - cur.value;
                x = cand_x;
                cur = cand;
                mu = (mu * 0.1).max(1e-15);
                if gain <= opts.f_tol * (1.0 + cur.value.abs()) && mu <= 1e-6 {
                    converged = true;
                    break;
                }
            }
            _ => {
                mu *= 10.0;
                if mu > 1e20 {
                    break;
                }
            }
        }
    }

    Some(Maximum {
        x: x.as_slice().to_vec(),
        value: cur.value,
        iterations,
        converged,
    })
}

/// Central finite-difference Hessian of `f` at `x` with step
/// `1e-4 (1 + |x_i|)` per coordinate.
pub fn numeric_hessian<F>(mut f: F, x: &[f64]) -> DMatrix<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = x.len();
    let h: Vec<f64> = x.iter().map(|v| 1e-4 * (1.0 + v.abs())).collect();
    let f0 = f(x);
    let mut hess = DMatrix::zeros(dim, dim);
    let mut p = x.to_vec();
    for i in 0..dim {
        p[i] = x[i] + h[i];
        let fp = f(&p);
        p[i] = x[i] - h[i];
        let fm = f(&p);
        p[i] = x[i];
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in (i + 1)..dim {
            let mut eval_at = |si: f64, sj: f64| {
                p[i] = x[i] + si * h[i];
                p[j] = x[j] + sj * h[j];
                let v = f(&p);
                p[i] = x[i];
                p[j] = x[j];
                v
            };
            let v = (eval_at(1.0, 1.0) - eval_at(1.0, -1.0) - eval_at(-1.0, 1.0)
                + eval_at(-1.0, -1.0))
                / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

/// Standard errors from the inverse of the negated log-likelihood Hessian.
///
/// Returns `None` when the observed information is not positive definite.
pub fn standard_errors(hess: &DMatrix<f64>) -> Option<Vec<f64>> {
    let info = -hess;
    let inv = info.cholesky()?.inverse();
    let se: Vec<f64> = (0..inv.nrows()).map(|i| inv[(i, i)].sqrt()).collect();
    se.iter().all(|v| v.is_finite()).then_some(se)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nelder_mead_rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let m = nelder_mead(f, &[-1.2, 1.0], &[0.5, 0.5], NelderMeadOptions::default());
        assert!(m.converged);
        assert!((m.x[0] - 1.0).abs() < 1e-4 && (m.x[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn nelder_mead_respects_infinite_barrier() {
        let f = |x: &[f64]| if x[0] < 0.5 { f64::INFINITY } else { (x[0] - 0.2).powi(2) };
        let m = nelder_mead(f, &[2.0], &[0.5], NelderMeadOptions::default());
        assert!(m.x[0] >= 0.5 && m.x[0] < 0.5 + 1e-6);
    }

    #[test]
    fn newton_on_concave_quadratic() {
        let eval = |x: &[f64]| {
            let v = -(x[0] - 3.0).powi(2) - 2.0 * (x[1] + 1.0).powi(2);
            Some(Objective {
                value: v,
                grad: DVector::from_vec(vec![-2.0 * (x[0] - 3.0), -4.0 * (x[1] + 1.0)]),
                hess: DMatrix::from_diagonal(&DVector::from_vec(vec![-2.0, -4.0])),
            })
        };
        let m = damped_newton(eval, &[0.0, 0.0], NewtonOptions::default()).unwrap();
        assert!(m.converged);
        assert!((m.x[0] - 3.0).abs() < 1e-9 && (m.x[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn hessian_and_standard_errors() {
        let f = |x: &[f64]| -0.5 * (x[0] * x[0] / 4.0 + x[1] * x[1]);
        let h = numeric_hessian(f, &[0.0, 0.0]);
        let se = standard_errors(&h).unwrap();
        assert!((se[0] - 2.0).abs() < 1e-5 && (se[1] - 1.0).abs() < 1e-5);
    }
}
