//! Joint multi-Lorentzian fits on single image columns.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::image::Axis;
use crate::lsq::{minimize, Bounds, LeastSquaresProblem, LmOptions};
use nalgebra::DMatrix;

/// Unit-height Lorentzian with full width at half maximum `width`.
pub fn lorentzian(x: f64, center: f64, width: f64) -> f64 {
    let u = 2.0 * (x - center) / width;
    1.0 / (1.0 + u * u)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lorentzian {
    pub center: f64,
    pub width: f64,
    pub amplitude: f64,
}

impl Lorentzian {
    pub fn eval(&self, x: f64) -> f64 {
        self.amplitude * lorentzian(x, self.center, self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// A constant offset fitted together with the peaks.
    #[default]
    Fit,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakFitOptions {
    pub width_bounds: (f64, f64),
    pub initial_width: f64,
    pub baseline: Baseline,
    /// Only pixels within this distance of some seed enter the fit.
    pub window_halfwidth: f64,
    pub lm: LmOptions,
}

impl PeakFitOptions {
    /// Width bounds `[linewidth/4, 4 linewidth]`, fit window three linewidths.
    pub fn for_linewidth(linewidth: f64) -> Self {
        PeakFitOptions {
            width_bounds: (0.25 * linewidth, 4.0 * linewidth),
            initial_width: linewidth,
            baseline: Baseline::Fit,
            window_halfwidth: 3.0 * linewidth,
            lm: LmOptions {
                max_iterations: 100,
                ..LmOptions::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakEstimate {
    pub peak: Lorentzian,
    pub center_sigma: f64,
    pub width_sigma: f64,
    pub amplitude_sigma: f64,
    pub converged: bool,
    pub width_at_bound: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnFit {
    /// One estimate per seed, in seed order.
    pub peaks: Vec<PeakEstimate>,
    pub baseline: f64,
    pub converged: bool,
    pub rms: f64,
    pub points_used: usize,
}

struct ColumnProblem {
    x: Vec<f64>,
    y: Vec<f64>,
    peaks: usize,
    baseline: Baseline,
}

impl ColumnProblem {
    fn base(&self, p: &[f64]) -> f64 {
        match self.baseline {
            Baseline::Fit => p[3 * self.peaks],
            Baseline::Fixed(b) => b,
        }
    }
}

impl LeastSquaresProblem for ColumnProblem {
    fn num_params(&self) -> usize {
        3 * self.peaks + usize::from(matches!(self.baseline, Baseline::Fit))
    }

    fn num_residuals(&self) -> usize {
        self.x.len()
    }

    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        let b = self.base(p);
        for (i, &x) in self.x.iter().enumerate() {
            let model: f64 = (0..self.peaks)
                .map(|k| p[3 * k + 2] * lorentzian(x, p[3 * k], p[3 * k + 1]))
                .sum();
            out[i] = model + b - self.y[i];
        }
    }

    fn jacobian(&self, p: &[f64], jac: &mut DMatrix<f64>) {
        for (i, &x) in self.x.iter().enumerate() {
            for k in 0..self.peaks {
                let (c, w, a) = (p[3 * k], p[3 * k + 1], p[3 * k + 2]);
                let u = 2.0 * (x - c) / w;
                let q = 1.0 / (1.0 + u * u);
                jac[(i, 3 * k)] = 4.0 * a * u * q * q / w;
                jac[(i, 3 * k + 1)] = 2.0 * a * u * u * q * q / w;
                jac[(i, 3 * k + 2)] = q;
            }
            if matches!(self.baseline, Baseline::Fit) {
                jac[(i, 3 * self.peaks)] = 1.0;
            }
        }
    }
}

fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[((v.len() - 1) as f64 * q).round() as usize]
}

/// Fits one Lorentzian per seed, jointly, to `column` sampled on `axis`.
///
/// Non-convergence is reported through the flags, never as an error.
pub fn fit_column_peaks(
    axis: &Axis,
    column: &[f64],
    seeds: &[f64],
    opts: &PeakFitOptions,
) -> Result<ColumnFit> {
    if seeds.is_empty() {
        return invalid("at least one seed is required");
    }
    if column.len() != axis.count {
        return invalid(format!(
            "column has {} samples, axis has {}",
            column.len(),
            axis.count
        ));
    }
    let (lo, hi) = opts.width_bounds;
    if !(lo > 0.0 && lo < hi) {
        return invalid(format!(
            "width bounds must satisfy 0 < lo < hi, got ({lo}, {hi})"
        ));
    }
    for &s in seeds {
        if !axis.contains(s) {
            return invalid(format!(
                "seed {s} lies outside the axis [{}, {}]",
                axis.min(),
                axis.max()
            ));
        }
    }
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for (i, &v) in column.iter().enumerate() {
        let d = axis.value(i);
        if seeds.iter().any(|s| (d - s).abs() <= opts.window_halfwidth) {
            x.push(d);
            y.push(v);
        }
    }
    let problem = ColumnProblem {
        x,
        y,
        peaks: seeds.len(),
        baseline: opts.baseline,
    };
    let n = problem.num_params();
    if problem.num_residuals() <= n {
        return invalid(format!(
            "fit window holds {} points for {n} parameters",
            problem.num_residuals()
        ));
    }

    let base0 = match opts.baseline {
        Baseline::Fit => percentile(&problem.y, 0.1),
        Baseline::Fixed(b) => b,
    };
    let span = problem.y.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - base0;
    let mut p0 = Vec::with_capacity(n);
    let mut bounds = Bounds::unbounded(n);
    for (k, &s) in seeds.iter().enumerate() {
        let at = axis.nearest(s).map_or(base0, |i| column[i]);
        p0.extend([
            s,
            opts.initial_width.clamp(lo, hi),
            (at - base0).max(1e-3 * span.max(1e-12)),
        ]);
        bounds.lower[3 * k] = axis.min();
        bounds.upper[3 * k] = axis.max();
        bounds.lower[3 * k + 1] = lo;
        bounds.upper[3 * k + 1] = hi;
        bounds.lower[3 * k + 2] = 0.0;
    }
    if matches!(opts.baseline, Baseline::Fit) {
        p0.push(base0);
    }

    let rep = minimize(&problem, &p0, &bounds, &opts.lm);
    let se = rep.covariance(true).standard_errors();
    let converged = rep.converged();
    let peaks = (0..seeds.len())
        .map(|k| {
            let width_at_bound = rep.at_lower[3 * k + 1] || rep.at_upper[3 * k + 1];
            let amplitude = rep.params[3 * k + 2];
            let sig = [se[3 * k], se[3 * k + 1], se[3 * k + 2]];
            PeakEstimate {
                peak: Lorentzian {
                    center: rep.params[3 * k],
                    width: rep.params[3 * k + 1],
                    amplitude,
                },
                center_sigma: sig[0],
                width_sigma: sig[1],
                amplitude_sigma: sig[2],
                converged: converged
                    && amplitude > 0.0
                    && sig.iter().all(|s| s.is_finite())
                    && !width_at_bound,
                width_at_bound,
            }
        })
        .collect();
    Ok(ColumnFit {
        peaks,
        baseline: problem.base(&rep.params),
        converged,
        rms: rep.rms(),
        points_used: problem.num_residuals(),
    })
}
