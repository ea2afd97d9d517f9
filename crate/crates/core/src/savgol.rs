//! Savitzky-Golay smoothing along image columns.
//!
//! Interior points use the centered window. Points within half a window of
//! an edge are evaluated from a polynomial fitted to the truncated window
//! that fits inside the data, so polynomials up to `poly_order` are still
//! reproduced exactly everywhere.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Result};
use crate::image::SpectralImage;

/// Convolution weights that evaluate the least-squares polynomial fitted to
/// `window` samples at sample position `at` (0-based inside the window).
pub fn savgol_weights(window: usize, poly_order: usize, at: usize) -> Vec<f64> {
    let half = (window as f64 - 1.0) / 2.0;
    let cols = poly_order + 1;
    // centered abscissa keeps the Vandermonde matrix well conditioned
    let a = DMatrix::from_fn(window, cols, |i, k| (i as f64 - half).powi(k as i32));
    let ata = a.transpose() * &a;
    let x0 = at as f64 - half;
    let e = DVector::from_fn(cols, |k, _| x0.powi(k as i32));
    let chol = ata
        .cholesky()
        .expect("Vandermonde normal matrix is positive definite");
    let z = chol.solve(&e);
    (a * z).iter().copied().collect()
}

fn check(window: usize, poly_order: usize, len: usize) -> Result<()> {
    if window < 3 || window.is_multiple_of(2) {
        return invalid(format!(
            "Savitzky-Golay window must be odd and >= 3, got {window}"
        ));
    }
    if poly_order >= window {
        return invalid(format!(
            "polynomial order {poly_order} must be below the window {window}"
        ));
    }
    if window >= len {
        return invalid(format!(
            "Savitzky-Golay window {window} must be shorter than the column ({len})"
        ));
    }
    Ok(())
}

/// Precomputed weights for one window and order.
#[derive(Debug, Clone)]
pub struct SavgolKernel {
    window: usize,
    center: Vec<f64>,
    /// `leading[i]` covers samples `0..=i + half`, evaluated at `i`.
    leading: Vec<Vec<f64>>,
    /// `trailing[i]` mirrors `leading[i]` at the far edge.
    trailing: Vec<Vec<f64>>,
}

impl SavgolKernel {
    pub fn new(window: usize, poly_order: usize, len: usize) -> Result<Self> {
        check(window, poly_order, len)?;
        let half = window / 2;
        Ok(SavgolKernel {
            window,
            center: savgol_weights(window, poly_order, half),
            leading: (0..half)
                .map(|i| savgol_weights(half + 1 + i, poly_order.min(half + i), i))
                .collect(),
            trailing: (0..half)
                .map(|i| savgol_weights(half + 1 + i, poly_order.min(half + i), half))
                .collect(),
        })
    }

    pub fn apply(&self, data: &[f64]) -> Vec<f64> {
        let window = self.window;
        let half = window / 2;
        let n = data.len();
        let dot = |w: &[f64], start: usize| -> f64 {
            w.iter().zip(&data[start..]).map(|(a, b)| a * b).sum()
        };
        let mut out = vec![0.0; n];
        for i in half..n - half {
            out[i] = dot(&self.center, i - half);
        }
        for i in 0..half {
            out[i] = dot(&self.leading[i], 0);
            out[n - 1 - i] = dot(&self.trailing[i], n - 1 - i - half);
        }
        out
    }
}

/// Smooths one sequence.
pub fn savgol_filter(data: &[f64], window: usize, poly_order: usize) -> Result<Vec<f64>> {
    Ok(SavgolKernel::new(window, poly_order, data.len())?.apply(data))
}

/// Applies the filter to every column of `img`; axes are unchanged.
pub fn smooth_columns(
    img: &SpectralImage,
    window: usize,
    poly_order: usize,
) -> Result<SpectralImage> {
    let kernel = SavgolKernel::new(window, poly_order, img.height())?;
    let mut out = img.clone();
    for ix in 0..img.width() {
        out.set_column(ix, &kernel.apply(&img.column(ix)));
    }
    Ok(out)
}
