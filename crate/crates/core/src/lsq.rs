//! Box-constrained Levenberg-Marquardt.
//!
//! A trust-region style LM with Marquardt diagonal scaling. Bounds are
//! handled by projection: a parameter sitting on a bound whose gradient
//! points outward is frozen for the step, the rest take the damped
//! Gauss-Newton step, and the trial point is clamped back into the box.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub trait LeastSquaresProblem {
    fn num_params(&self) -> usize;
    fn num_residuals(&self) -> usize;
    fn residuals(&self, params: &[f64], out: &mut [f64]);

    /// Fills `jac` (residuals x params). Defaults to central differences.
    fn jacobian(&self, params: &[f64], jac: &mut DMatrix<f64>) {
        let steps: Vec<f64> = params.iter().map(|p| 1e-6 * p.abs().max(1.0)).collect();
        central_difference_jacobian(self, params, &steps, jac);
    }
}

/// Central-difference Jacobian with per-parameter steps.
pub fn central_difference_jacobian<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    params: &[f64],
    steps: &[f64],
    jac: &mut DMatrix<f64>,
) {
    let m = problem.num_residuals();
    let mut p = params.to_vec();
    let mut plus = vec![0.0; m];
    let mut minus = vec![0.0; m];
    for j in 0..params.len() {
        let h = steps[j];
        p[j] = params[j] + h;
        problem.residuals(&p, &mut plus);
        p[j] = params[j] - h;
        problem.residuals(&p, &mut minus);
        p[j] = params[j];
        for i in 0..m {
            jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * h);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn unbounded(n: usize) -> Self {
        Bounds {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn clamp(&self, p: &mut [f64]) {
        for (i, v) in p.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub ftol: f64,
    /// Stop when the step is this small relative to the parameters.
    pub xtol: f64,
    /// Stop when the projected gradient infinity norm falls below this.
    pub gtol: f64,
    pub initial_damping: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            max_iterations: 200,
            ftol: 1e-12,
            xtol: 1e-12,
            gtol: 1e-14,
            initial_damping: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    ZeroResidual,
    CostTolerance,
    StepTolerance,
    GradientTolerance,
    /// No damped step lowered the cost any further.
    Stalled,
    MaxIterations,
    NonFinite,
}

impl Termination {
    pub fn converged(self) -> bool {
        !matches!(self, Termination::MaxIterations | Termination::NonFinite)
    }
}

#[derive(Debug, Clone)]
pub struct LmReport {
    pub params: Vec<f64>,
    /// Half the residual sum of squares.
    pub cost: f64,
    pub initial_cost: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub at_lower: Vec<bool>,
    pub at_upper: Vec<bool>,
    pub residuals: Vec<f64>,
    pub jacobian: DMatrix<f64>,
}

/// Parameter covariance from the Gauss-Newton curvature `J^T J`.
#[derive(Debug, Clone)]
pub struct Covariance {
    pub matrix: DMatrix<f64>,
    /// False for parameters touching a null direction of `J^T J`.
    pub identifiable: Vec<bool>,
}

impl Covariance {
    /// Standard errors; unidentifiable parameters get infinity.
    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.identifiable.len())
            .map(|i| {
                if self.identifiable[i] {
                    self.matrix[(i, i)].max(0.0).sqrt()
                } else {
                    f64::INFINITY
                }
            })
            .collect()
    }
}

impl LmReport {
    pub fn converged(&self) -> bool {
        self.termination.converged()
    }

    pub fn rms(&self) -> f64 {
        if self.residuals.is_empty() {
            0.0
        } else {
            (2.0 * self.cost / self.residuals.len() as f64).sqrt()
        }
    }

    /// Covariance of the parameters. With `scale_by_residual` it is
    /// multiplied by the reduced chi-square `2 cost / (m - n)`.
    pub fn covariance(&self, scale_by_residual: bool) -> Covariance {
        let n = self.params.len();
        let m = self.residuals.len();
        let jtj = self.jacobian.transpose() * &self.jacobian;
        let mut identifiable = vec![true; n];
        let d: Vec<f64> = (0..n).map(|i| jtj[(i, i)].sqrt()).collect();
        let max_d = d.iter().cloned().fold(0.0, f64::max);
        for i in 0..n {
            if !(d[i] > 1e-12 * max_d.max(f64::MIN_POSITIVE)) {
                identifiable[i] = false;
            }
        }
        let idx: Vec<usize> = (0..n).filter(|&i| identifiable[i]).collect();
        let k = idx.len();
        let mut cov = DMatrix::zeros(n, n);
        if k > 0 {
            // correlation-scaled curvature for a scale-free rank test
            let c = DMatrix::from_fn(k, k, |a, b| jtj[(idx[a], idx[b])] / (d[idx[a]] * d[idx[b]]));
            let eig = SymmetricEigen::new(c);
            let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
            let threshold = 1e-12 * lmax.max(f64::MIN_POSITIVE);
            let mut pinv = DMatrix::zeros(k, k);
            for e in 0..k {
                let lambda = eig.eigenvalues[e];
                let v = eig.eigenvectors.column(e);
                if lambda > threshold {
                    pinv += (v * v.transpose()) / lambda;
                } else {
                    for a in 0..k {
                        if v[a].abs() > 1e-6 {
                            identifiable[idx[a]] = false;
                        }
                    }
                }
            }
            for a in 0..k {
                for b in 0..k {
                    cov[(idx[a], idx[b])] = pinv[(a, b)] / (d[idx[a]] * d[idx[b]]);
                }
            }
        }
        if scale_by_residual {
            let s2 = if m > n {
                2.0 * self.cost / (m - n) as f64
            } else {
                f64::INFINITY
            };
            cov *= s2;
        }
        Covariance {
            matrix: cov,
            identifiable,
        }
    }
}

fn half_sq(r: &[f64]) -> f64 {
    0.5 * r.iter().map(|v| v * v).sum::<f64>()
}

/// Minimizes `0.5 * |r(p)|^2` inside `bounds` starting from `initial`.
pub fn minimize<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    initial: &[f64],
    bounds: &Bounds,
    opts: &LmOptions,
) -> LmReport {
    let n = problem.num_params();
    let m = problem.num_residuals();
    let mut p = initial.to_vec();
    bounds.clamp(&mut p);
    let mut r = vec![0.0; m];
    problem.residuals(&p, &mut r);
    let mut cost = half_sq(&r);
    let initial_cost = cost;
    let mut jac = DMatrix::zeros(m, n);
    let mut lambda = opts.initial_damping;
    let mut nu = 2.0;
    let mut iterations = 0;
    let mut trial = vec![0.0; n];
    let mut r_trial = vec![0.0; m];

    let termination = 'outer: loop {
        if !cost.is_finite() {
            break Termination::NonFinite;
        }
        if cost == 0.0 {
            break Termination::ZeroResidual;
        }
        if iterations >= opts.max_iterations {
            break Termination::MaxIterations;
        }
        iterations += 1;
        problem.jacobian(&p, &mut jac);
        let rv = DVector::from_column_slice(&r);
        let g = jac.transpose() * &rv;
        let a = jac.transpose() * &jac;
        let free: Vec<usize> = (0..n)
            .filter(|&i| {
                !((p[i] <= bounds.lower[i] && g[i] > 0.0)
                    || (p[i] >= bounds.upper[i] && g[i] < 0.0))
            })
            .collect();
        let pg = free.iter().map(|&i| g[i].abs()).fold(0.0, f64::max);
        if free.is_empty() || pg <= opts.gtol {
            break Termination::GradientTolerance;
        }
        let k = free.len();
        loop {
            let mut sys = DMatrix::from_fn(k, k, |x, y| a[(free[x], free[y])]);
            for x in 0..k {
                let dii = a[(free[x], free[x])].max(1e-12);
                sys[(x, x)] += lambda * dii;
            }
            let rhs = DVector::from_fn(k, |x, _| -g[free[x]]);
            let step = match sys.cholesky() {
                Some(ch) => ch.solve(&rhs),
                None => {
                    lambda *= nu;
                    nu *= 2.0;
                    if lambda > 1e20 {
                        break 'outer Termination::Stalled;
                    }
                    continue;
                }
            };
            trial.copy_from_slice(&p);
            for x in 0..k {
                trial[free[x]] += step[x];
            }
            bounds.clamp(&mut trial);
            problem.residuals(&trial, &mut r_trial);
            let cost_trial = half_sq(&r_trial);
            let s = DVector::from_fn(n, |i, _| trial[i] - p[i]);
            if cost_trial.is_finite() && cost_trial < cost {
                let predicted = -(g.dot(&s) + 0.5 * s.dot(&(&a * &s)));
                let actual = cost - cost_trial;
                let rho = if predicted > 0.0 {
                    actual / predicted
                } else {
                    0.0
                };
                lambda *= (1.0 - (2.0 * rho - 1.0).powi(3)).max(1.0 / 3.0);
                nu = 2.0;
                let pnorm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                p.copy_from_slice(&trial);
                r.copy_from_slice(&r_trial);
                let old = cost;
                cost = cost_trial;
                // A heavily damped step is short whatever the distance left.
                let undamped = lambda <= 1.0;
                if undamped && actual <= opts.ftol * old {
                    break 'outer Termination::CostTolerance;
                }
                if undamped && s.norm() <= opts.xtol * (pnorm + opts.xtol) {
                    break 'outer Termination::StepTolerance;
                }
                break;
            }
            lambda *= nu;
            nu *= 2.0;
            if lambda > 1e20 {
                break 'outer Termination::Stalled;
            }
        }
    };

    problem.jacobian(&p, &mut jac);
    let at_lower = (0..n).map(|i| p[i] <= bounds.lower[i]).collect();
    let at_upper = (0..n).map(|i| p[i] >= bounds.upper[i]).collect();
    LmReport {
        params: p,
        cost,
        initial_cost,
        iterations,
        termination,
        at_lower,
        at_upper,
        residuals: r,
        jacobian: jac,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// y = a * exp(-b x)
    struct Decay {
        x: Vec<f64>,
        y: Vec<f64>,
    }

    impl LeastSquaresProblem for Decay {
        fn num_params(&self) -> usize {
            2
        }
        fn num_residuals(&self) -> usize {
            self.x.len()
        }
        fn residuals(&self, p: &[f64], out: &mut [f64]) {
            for i in 0..self.x.len() {
                out[i] = p[0] * (-p[1] * self.x[i]).exp() - self.y[i];
            }
        }
    }

    fn decay(a: f64, b: f64) -> Decay {
        let x: Vec<f64> = (0..30).map(|i| i as f64 * 0.2).collect();
        let y = x.iter().map(|x| a * (-b * x).exp()).collect();
        Decay { x, y }
    }

    #[test]
    fn recovers_exact_parameters() {
        let prob = decay(3.0, 0.7);
        let rep = minimize(
            &prob,
            &[1.0, 0.1],
            &Bounds::unbounded(2),
            &LmOptions::default(),
        );
        assert!(rep.converged(), "{:?}", rep.termination);
        assert!((rep.params[0] - 3.0).abs() < 1e-9);
        assert!((rep.params[1] - 0.7).abs() < 1e-9);
        assert!(rep.cost <= rep.initial_cost);
    }

    #[test]
    fn respects_bounds() {
        let prob = decay(3.0, 0.7);
        let bounds = Bounds {
            lower: vec![0.0, 0.0],
            upper: vec![2.0, 10.0],
        };
        let rep = minimize(&prob, &[1.0, 0.1], &bounds, &LmOptions::default());
        assert_eq!(rep.params[0], 2.0);
        assert!(rep.at_upper[0]);
        assert!(!rep.at_lower[1] && !rep.at_upper[1]);
    }

    #[test]
    fn flags_unidentifiable_parameter() {
        // third parameter does not enter the residuals
        struct Extra(Decay);
        impl LeastSquaresProblem for Extra {
            fn num_params(&self) -> usize {
                3
            }
            fn num_residuals(&self) -> usize {
                self.0.num_residuals()
            }
            fn residuals(&self, p: &[f64], out: &mut [f64]) {
                self.0.residuals(&p[..2], out)
            }
        }
        let prob = Extra(decay(3.0, 0.7));
        let rep = minimize(
            &prob,
            &[2.0, 0.5, 1.0],
            &Bounds::unbounded(3),
            &LmOptions::default(),
        );
        let se = rep.covariance(false).standard_errors();
        assert!(se[0].is_finite() && se[1].is_finite());
        assert!(se[2].is_infinite());
    }

    #[test]
    fn flags_degenerate_combination() {
        // residual depends only on p0 + p1
        struct Sum;
        impl LeastSquaresProblem for Sum {
            fn num_params(&self) -> usize {
                2
            }
            fn num_residuals(&self) -> usize {
                3
            }
            fn residuals(&self, p: &[f64], out: &mut [f64]) {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (p[0] + p[1]) * i as f64 - 1.0;
                }
            }
        }
        let rep = minimize(
            &Sum,
            &[0.0, 0.0],
            &Bounds::unbounded(2),
            &LmOptions::default(),
        );
        let se = rep.covariance(false).standard_errors();
        assert!(se.iter().all(|s| s.is_infinite()));
    }

    #[test]
    fn covariance_matches_linear_regression() {
        // straight line: known closed form for the slope variance
        struct Line {
            x: Vec<f64>,
            y: Vec<f64>,
        }
        impl LeastSquaresProblem for Line {
            fn num_params(&self) -> usize {
                2
            }
            fn num_residuals(&self) -> usize {
                self.x.len()
            }
            fn residuals(&self, p: &[f64], out: &mut [f64]) {
                for i in 0..self.x.len() {
                    out[i] = p[0] + p[1] * self.x[i] - self.y[i];
                }
            }
        }
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let noise = [0.1, -0.2, 0.05, 0.3, -0.1, 0.0, -0.25, 0.15, 0.2, -0.05];
        let y: Vec<f64> = x
            .iter()
            .zip(noise)
            .map(|(x, e)| 1.0 + 2.0 * x + e)
            .collect();
        let prob = Line { x: x.clone(), y };
        let rep = minimize(
            &prob,
            &[0.0, 0.0],
            &Bounds::unbounded(2),
            &LmOptions::default(),
        );
        let se = rep.covariance(true).standard_errors();
        let mean = x.iter().sum::<f64>() / 10.0;
        let sxx: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
        let s2 = 2.0 * rep.cost / 8.0;
        assert!((se[1] - (s2 / sxx).sqrt()).abs() < 1e-9);
    }
}
