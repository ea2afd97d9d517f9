//! Anticrossing hyperbola fits, integer-pixel image alignment, masked
//! averaging and dot/lead line classification.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, DaxsError, Result};
use crate::image::{MaskedImage, SpectralImage};
use crate::lsq::{minimize, Bounds, LeastSquaresProblem, LmOptions};
use crate::tracks::{PeakTracks, TrackPoint};
use nalgebra::DMatrix;

/// Relative uncertainty of the gap above which a hyperbola fit is flagged.
pub const MAX_RELATIVE_GAP_ERROR: f64 = 0.5;

/// `delta(eps) = c + m (eps - eps0) - sqrt(a^2 (eps - eps0)^2 + t^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperbolaFit {
    pub eps0: f64,
    /// Branch value at `eps0`, i.e. `c - t`.
    pub vertex_delta: f64,
    pub c: f64,
    pub m: f64,
    pub a: f64,
    pub t: f64,
    /// Slopes of the left and right asymptotes, `m + a` and `m - a`.
    pub asymptote_slopes: [f64; 2],
    pub rms: f64,
    pub t_stderr: f64,
    pub eps0_stderr: f64,
    pub converged: bool,
    /// Set when the gap is poorly determined by the sampled span.
    pub poorly_constrained: bool,
}

impl HyperbolaFit {
    pub fn eval(&self, eps: f64) -> f64 {
        let u = eps - self.eps0;
        self.c + self.m * u - (self.a * self.a * u * u + self.t * self.t).sqrt()
    }
}

struct HyperbolaProblem<'a> {
    points: &'a [TrackPoint],
}

impl LeastSquaresProblem for HyperbolaProblem<'_> {
    fn num_params(&self) -> usize {
        5
    }

    fn num_residuals(&self) -> usize {
        self.points.len()
    }

    fn residuals(&self, p: &[f64], out: &mut [f64]) {
        let [c, m, e0, a, t] = [p[0], p[1], p[2], p[3], p[4]];
        for (o, pt) in out.iter_mut().zip(self.points) {
            let u = pt.x - e0;
            *o = (c + m * u - (a * a * u * u + t * t).sqrt() - pt.delta) / pt.delta_sigma;
        }
    }

    fn jacobian(&self, p: &[f64], jac: &mut DMatrix<f64>) {
        let [_, m, e0, a, t] = [p[0], p[1], p[2], p[3], p[4]];
        for (i, pt) in self.points.iter().enumerate() {
            let u = pt.x - e0;
            let r = (a * a * u * u + t * t).sqrt();
            let w = 1.0 / pt.delta_sigma;
            jac[(i, 0)] = w;
            jac[(i, 1)] = u * w;
            jac[(i, 2)] = (-m + a * a * u / r) * w;
            jac[(i, 3)] = -a * u * u / r * w;
            jac[(i, 4)] = -t / r * w;
        }
    }
}

/// Least-squares line `y = b + k x`; returns `(b, k, max |residual|)`.
fn line_fit(pts: &[TrackPoint]) -> (f64, f64, f64) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.x).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.delta).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.x - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.x - mx) * (p.delta - my)).sum();
    let k = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let b = my - k * mx;
    let worst = pts
        .iter()
        .map(|p| (p.delta - b - k * p.x).abs())
        .fold(0.0, f64::max);
    (b, k, worst)
}

/// Fits one hyperbola branch to the lower branch of an anticrossing.
pub fn fit_anticrossing(points: &[TrackPoint]) -> Result<HyperbolaFit> {
    if points.len() < 5 {
        return invalid(format!(
            "hyperbola fit needs at least 5 points, got {}",
            points.len()
        ));
    }
    if points
        .iter()
        .any(|p| !(p.delta_sigma > 0.0) || !p.x.is_finite() || !p.delta.is_finite())
    {
        return invalid("hyperbola points need finite values and positive delta_sigma");
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x));
    let span_y = pts
        .iter()
        .map(|p| p.delta)
        .fold(f64::NEG_INFINITY, f64::max)
        - pts.iter().map(|p| p.delta).fold(f64::INFINITY, f64::min);
    let (_, _, worst) = line_fit(&pts);
    if worst <= 1e-9 * span_y.max(1.0) {
        return Err(DaxsError::Degenerate(
            "anticrossing points are collinear".into(),
        ));
    }

    let third = (pts.len() / 3).max(2);
    let (bl, kl, _) = line_fit(&pts[..third]);
    let (br, kr, _) = line_fit(&pts[pts.len() - third..]);
    let (x_lo, x_hi) = (pts[0].x, pts[pts.len() - 1].x);
    let mut a0 = 0.5 * (kl - kr);
    let m0 = 0.5 * (kl + kr);
    let apex = pts
        .iter()
        .max_by(|p, q| (p.delta - m0 * p.x).total_cmp(&(q.delta - m0 * q.x)))
        .expect("points");
    let (e0, c0) = if a0 > 1e-12 {
        let e = ((br - bl) / (kl - kr)).clamp(x_lo, x_hi);
        (e, bl + kl * e)
    } else {
        (apex.x, apex.delta)
    };
    if a0 <= 1e-12 {
        a0 = (span_y / (x_hi - x_lo)).max(1e-3);
    }
    let t0 = (c0 + m0 * (apex.x - e0) - apex.delta)
        .abs()
        .max(1e-3 * span_y.max(1e-9));

    let problem = HyperbolaProblem { points: &pts };
    let mut bounds = Bounds::unbounded(5);
    bounds.lower[3] = 0.0;
    bounds.lower[4] = 1e-12;
    let rep = minimize(
        &problem,
        &[c0, m0, e0, a0, t0],
        &bounds,
        &LmOptions {
            max_iterations: 500,
            ..LmOptions::default()
        },
    );
    let reduced = if pts.len() > 5 {
        2.0 * rep.cost / (pts.len() - 5) as f64
    } else {
        f64::INFINITY
    };
    let mut cov = rep.covariance(false);
    cov.matrix *= reduced.max(1.0);
    let se = cov.standard_errors();
    let [c, m, eps0, a, t] = [
        rep.params[0],
        rep.params[1],
        rep.params[2],
        rep.params[3],
        rep.params[4],
    ];
    let rms = (pts
        .iter()
        .map(|p| {
            let u = p.x - eps0;
            (c + m * u - (a * a * u * u + t * t).sqrt() - p.delta).powi(2)
        })
        .sum::<f64>()
        / pts.len() as f64)
        .sqrt();
    Ok(HyperbolaFit {
        eps0,
        vertex_delta: c - t,
        c,
        m,
        a,
        t,
        asymptote_slopes: [m + a, m - a],
        rms,
        t_stderr: se[4],
        eps0_stderr: se[2],
        converged: rep.converged(),
        poorly_constrained: !(se[4] <= MAX_RELATIVE_GAP_ERROR * t),
    })
}

/// Pixel `[ix, iy]` nearest to the vertex, if it lies on the image.
pub fn vertex_pixel(fit: &HyperbolaFit, img: &SpectralImage) -> Option<[usize; 2]> {
    Some([
        img.x_axis.nearest(fit.eps0)?,
        img.y_axis.nearest(fit.vertex_delta)?,
    ])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub image_id: String,
    pub ref_pixel: [usize; 2],
    /// Translation applied, in pixels.
    pub shift: [i64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aligned {
    pub image: MaskedImage,
    pub shift: [i64; 2],
}

fn same_step(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs())
}

/// Translates every image by whole pixels so that its reference pixel lands
/// on the first image's reference pixel. Outputs use the first image's
/// axes; pixels with no source are marked missing.
pub fn align_masked(images: &[MaskedImage], refs: &[[usize; 2]]) -> Result<Vec<Aligned>> {
    if images.is_empty() || images.len() != refs.len() {
        return invalid("alignment needs one reference pixel per image");
    }
    let first = &images[0].image;
    for (k, (m, r)) in images.iter().zip(refs).enumerate() {
        let img = &m.image;
        if !same_step(img.x_axis.step, first.x_axis.step)
            || !same_step(img.y_axis.step, first.y_axis.step)
        {
            return invalid(format!("image {k} has different axis steps"));
        }
        if r[0] >= img.width() || r[1] >= img.height() {
            return invalid(format!(
                "reference pixel {r:?} of image {k} lies outside the image"
            ));
        }
        if m.valid.len() != img.data.len() {
            return invalid(format!("mask of image {k} does not match its data"));
        }
    }
    let (w, h) = (first.width(), first.height());
    Ok(images
        .iter()
        .zip(refs)
        .map(|(m, r)| {
            let dx = refs[0][0] as i64 - r[0] as i64;
            let dy = refs[0][1] as i64 - r[1] as i64;
            let mut out = SpectralImage::zeros(first.x_axis.clone(), first.y_axis.clone());
            let mut valid = vec![false; w * h];
            for iy in 0..h {
                for ix in 0..w {
                    let (sx, sy) = (ix as i64 - dx, iy as i64 - dy);
                    if sx < 0
                        || sy < 0
                        || sx >= m.image.width() as i64
                        || sy >= m.image.height() as i64
                    {
                        continue;
                    }
                    let (sx, sy) = (sx as usize, sy as usize);
                    if m.is_valid(sx, sy) {
                        out.set(ix, iy, m.image.get(sx, sy));
                        valid[iy * w + ix] = true;
                    }
                }
            }
            Aligned {
                image: MaskedImage { image: out, valid },
                shift: [dx, dy],
            }
        })
        .collect())
}

pub fn align_images(images: &[SpectralImage], refs: &[[usize; 2]]) -> Result<Vec<Aligned>> {
    let masked: Vec<MaskedImage> = images.iter().cloned().map(MaskedImage::full).collect();
    align_masked(&masked, refs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Averaged {
    /// Mean over valid inputs; pixels with no valid input are 0 and masked.
    pub image: MaskedImage,
    pub counts: Vec<usize>,
}

/// Per-pixel mean over the non-missing values of aligned images.
pub fn average_images(aligned: &[MaskedImage]) -> Result<Averaged> {
    if aligned.len() < 2 {
        return invalid("averaging needs at least two images");
    }
    let first = &aligned[0].image;
    if aligned
        .iter()
        .any(|m| m.image.width() != first.width() || m.image.height() != first.height())
    {
        return invalid("aligned images must share dimensions");
    }
    let n = first.data.len();
    let mut sum = vec![0.0; n];
    let mut counts = vec![0usize; n];
    for m in aligned {
        for i in 0..n {
            if m.valid[i] {
                sum[i] += m.image.data[i];
                counts[i] += 1;
            }
        }
    }
    if !counts.contains(&aligned.len()) {
        return Err(DaxsError::Degenerate(
            "aligned images have no pixel in common".into(),
        ));
    }
    let data = sum
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let image = SpectralImage {
        x_axis: first.x_axis.clone(),
        y_axis: first.y_axis.clone(),
        data,
    };
    let valid = counts.iter().map(|&c| c > 0).collect();
    Ok(Averaged {
        image: MaskedImage { image, valid },
        counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LineKind {
    Dot,
    Lead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineClass {
    pub track_id: String,
    /// Least-absolute-deviation slope, GHz per unit of x.
    pub slope: f64,
    pub class: LineKind,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LineClassification {
    pub lines: Vec<LineClass>,
    pub warnings: Vec<String>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn lad_cost(xs: &[f64], ys: &[f64], k: f64, scratch: &mut Vec<f64>) -> f64 {
    scratch.clear();
    scratch.extend(xs.iter().zip(ys).map(|(x, y)| y - k * x));
    let b = median(scratch);
    xs.iter().zip(ys).map(|(x, y)| (y - k * x - b).abs()).sum()
}

/// Least-absolute-deviation slope. The profile over the slope is convex and
/// its minimum lies between the extreme slopes of consecutive points.
pub fn lad_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let slopes: Vec<f64> = order
        .windows(2)
        .filter(|w| xs[w[1]] > xs[w[0]])
        .map(|w| (ys[w[1]] - ys[w[0]]) / (xs[w[1]] - xs[w[0]]))
        .collect();
    let (mut lo, mut hi) = slopes
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| {
            (a.min(s), b.max(s))
        });
    if !(lo < hi) {
        return if lo.is_finite() { lo } else { 0.0 };
    }
    let mut scratch = Vec::with_capacity(xs.len());
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = hi - g * (hi - lo);
    let mut d = lo + g * (hi - lo);
    let mut fc = lad_cost(xs, ys, c, &mut scratch);
    let mut fd = lad_cost(xs, ys, d, &mut scratch);
    for _ in 0..200 {
        if hi - lo <= 1e-14 * (lo.abs() + hi.abs()).max(1e-300) {
            break;
        }
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = lad_cost(xs, ys, c, &mut scratch);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = lad_cost(xs, ys, d, &mut scratch);
        }
    }
    0.5 * (lo + hi)
}

/// Labels each track as a dot line (`|slope| < threshold`) or a lead line.
pub fn classify_lines(tracks: &PeakTracks, slope_threshold: f64) -> Result<LineClassification> {
    if !(slope_threshold > 0.0 && slope_threshold.is_finite()) {
        return invalid("slope threshold must be positive");
    }
    let mut out = LineClassification::default();
    for t in &tracks.tracks {
        let mut xs: Vec<f64> = t.points.iter().map(|p| p.x).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        if xs.len() < 3 {
            out.warnings.push(format!(
                "track '{}' spans fewer than 3 sweep points and was skipped",
                t.track_id
            ));
            continue;
        }
        let xs: Vec<f64> = t.points.iter().map(|p| p.x).collect();
        let ys: Vec<f64> = t.points.iter().map(|p| p.delta).collect();
        let slope = lad_slope(&xs, &ys);
        let class = if slope.abs() < slope_threshold {
            LineKind::Dot
        } else {
            LineKind::Lead
        };
        out.lines.push(LineClass {
            track_id: t.track_id.clone(),
            slope,
            class,
        });
    }
    Ok(out)
}
