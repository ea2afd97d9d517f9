//! Heatmap rendering of spectral images for display.

use std::io::Cursor;

use daxs_core::SpectralImage;
use image::{ImageFormat, Rgb, RgbImage};

/// Dark-to-bright color stops, evenly spaced over [0, 1].
const STOPS: [[f64; 3]; 5] = [
    [13.0, 8.0, 135.0],
    [126.0, 3.0, 168.0],
    [204.0, 71.0, 120.0],
    [248.0, 149.0, 64.0],
    [240.0, 249.0, 33.0],
];

fn color(t: f64) -> Rgb<u8> {
    let t = if t.is_finite() {
        t.clamp(0.0, 1.0)
    } else {
        0.0
    };
    let pos = t * (STOPS.len() - 1) as f64;
    let k = (pos.floor() as usize).min(STOPS.len() - 2);
    let f = pos - k as f64;
    let (a, b) = (STOPS[k], STOPS[k + 1]);
    Rgb(std::array::from_fn(|c| {
        (a[c] + f * (b[c] - a[c])).round() as u8
    }))
}

/// One pixel per sample, x to the right and y upward, scaled from the
/// image minimum to its maximum.
pub fn heatmap(img: &SpectralImage) -> RgbImage {
    let (lo, hi) = img
        .data
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (w, h) = (img.width(), img.height());
    RgbImage::from_fn(w as u32, h as u32, |px, py| {
        let iy = h - 1 - py as usize;
        color((img.get(px as usize, iy) - lo) / span)
    })
}

pub fn encode_png(img: &SpectralImage) -> image::ImageResult<Vec<u8>> {
    let mut out = Cursor::new(Vec::new());
    heatmap(img).write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}
