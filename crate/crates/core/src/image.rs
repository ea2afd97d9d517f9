//! Spectral images and the `daxs-img` file format.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, DaxsError, Result};

pub const IMAGE_FORMAT: &str = "daxs-img";
pub const IMAGE_VERSION: u32 = 1;

/// A uniform grid: `start + i * step` for `i` in `0..count`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisSpec {
    pub start: f64,
    pub step: f64,
    pub count: usize,
}

impl AxisSpec {
    pub fn new(start: f64, step: f64, count: usize) -> Self {
        AxisSpec { start, step, count }
    }

    /// Grid from `start` to `stop` inclusive with `count` points.
    pub fn linspace(start: f64, stop: f64, count: usize) -> Self {
        let step = if count > 1 {
            (stop - start) / (count - 1) as f64
        } else {
            1.0
        };
        AxisSpec { start, step, count }
    }

    pub fn validate(&self, what: &str) -> Result<()> {
        if self.count == 0 {
            return invalid(format!("{what} axis is empty"));
        }
        if !self.start.is_finite() || !self.step.is_finite() || self.step == 0.0 {
            return invalid(format!("{what} axis must be finite and strictly monotone"));
        }
        Ok(())
    }

    pub fn named(self, name: &str, unit: &str) -> Axis {
        Axis {
            name: name.to_string(),
            unit: unit.to_string(),
            start: self.start,
            step: self.step,
            count: self.count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub unit: String,
    pub start: f64,
    pub step: f64,
    pub count: usize,
}

impl Axis {
    pub fn value(&self, i: usize) -> f64 {
        self.start + i as f64 * self.step
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.count).map(|i| self.value(i)).collect()
    }

    pub fn last(&self) -> f64 {
        self.value(self.count.saturating_sub(1))
    }

    pub fn min(&self) -> f64 {
        self.start.min(self.last())
    }

    pub fn max(&self) -> f64 {
        self.start.max(self.last())
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.min() && v <= self.max()
    }

    /// Fractional pixel coordinate of `v`.
    pub fn position(&self, v: f64) -> f64 {
        (v - self.start) / self.step
    }

    /// Nearest pixel index, if `v` lies on the axis (half a pixel of slack).
    pub fn nearest(&self, v: f64) -> Option<usize> {
        let p = self.position(v).round();
        (p >= 0.0 && p < self.count as f64).then_some(p as usize)
    }

    pub fn spec(&self) -> AxisSpec {
        AxisSpec {
            start: self.start,
            step: self.step,
            count: self.count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec().validate(&self.name)
    }
}

/// Row-major intensity map; row `iy` holds `y_axis.value(iy)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralImage {
    pub x_axis: Axis,
    pub y_axis: Axis,
    pub data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ImageDocument {
    format: String,
    version: u32,
    x_axis: Axis,
    y_axis: Axis,
    data: Vec<Vec<f64>>,
}

impl SpectralImage {
    pub fn zeros(x_axis: Axis, y_axis: Axis) -> Self {
        let n = x_axis.count * y_axis.count;
        SpectralImage {
            x_axis,
            y_axis,
            data: vec![0.0; n],
        }
    }

    pub fn new(x_axis: Axis, y_axis: Axis, data: Vec<f64>) -> Result<Self> {
        let img = SpectralImage {
            x_axis,
            y_axis,
            data,
        };
        img.validate()?;
        Ok(img)
    }

    /// Builds an image from per-column vectors (each of length `y.count`).
    pub fn from_columns(x_axis: Axis, y_axis: Axis, columns: &[Vec<f64>]) -> Self {
        let mut img = SpectralImage::zeros(x_axis, y_axis);
        for (ix, col) in columns.iter().enumerate() {
            img.set_column(ix, col);
        }
        img
    }

    pub fn width(&self) -> usize {
        self.x_axis.count
    }

    pub fn height(&self) -> usize {
        self.y_axis.count
    }

    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.data[iy * self.width() + ix]
    }

    pub fn set(&mut self, ix: usize, iy: usize, v: f64) {
        let w = self.width();
        self.data[iy * w + ix] = v;
    }

    pub fn column(&self, ix: usize) -> Vec<f64> {
        (0..self.height()).map(|iy| self.get(ix, iy)).collect()
    }

    pub fn set_column(&mut self, ix: usize, col: &[f64]) {
        for (iy, v) in col.iter().enumerate() {
            self.set(ix, iy, *v);
        }
    }

    pub fn row(&self, iy: usize) -> &[f64] {
        let w = self.width();
        &self.data[iy * w..(iy + 1) * w]
    }

    pub fn validate(&self) -> Result<()> {
        self.x_axis.validate()?;
        self.y_axis.validate()?;
        if self.data.len() != self.width() * self.height() {
            return invalid(format!(
                "image data has {} values, axes need {}",
                self.data.len(),
                self.width() * self.height()
            ));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return invalid("image data must be finite");
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ImageDocument {
            format: IMAGE_FORMAT.to_string(),
            version: IMAGE_VERSION,
            x_axis: self.x_axis.clone(),
            y_axis: self.y_axis.clone(),
            data: (0..self.height()).map(|iy| self.row(iy).to_vec()).collect(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ImageDocument = serde_json::from_str(text)?;
        if doc.format != IMAGE_FORMAT || doc.version != IMAGE_VERSION {
            return Err(DaxsError::Format(format!(
                "expected {IMAGE_FORMAT} v{IMAGE_VERSION}, got {} v{}",
                doc.format, doc.version
            )));
        }
        if doc.data.len() != doc.y_axis.count
            || doc.data.iter().any(|r| r.len() != doc.x_axis.count)
        {
            return invalid("image rows do not match the axis counts");
        }
        let data = doc.data.into_iter().flatten().collect();
        SpectralImage::new(doc.x_axis, doc.y_axis, data)
    }
}

/// An image plus a validity mask; missing pixels are `false` in `valid`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedImage {
    pub image: SpectralImage,
    pub valid: Vec<bool>,
}

impl MaskedImage {
    pub fn full(image: SpectralImage) -> Self {
        let valid = vec![true; image.data.len()];
        MaskedImage { image, valid }
    }

    pub fn is_valid(&self, ix: usize, iy: usize) -> bool {
        self.valid[iy * self.image.width() + ix]
    }
}
