//! Seed curves, peak tracks and column-wise track extraction.

use std::collections::HashSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, DaxsError, Result};
use crate::exec::{map_indexed, Execution};
use crate::image::SpectralImage;
use crate::model::BranchLabel;
use crate::peaks::{fit_column_peaks, Baseline, PeakFitOptions};
use crate::savgol::smooth_columns;
use crate::sim::DEFAULT_LINEWIDTH;

pub const SEEDS_FORMAT: &str = "daxs-seeds";
pub const SEEDS_VERSION: u32 = 1;
pub const TRACKS_HEADER: [&str; 6] = [
    "track_id",
    "x",
    "delta",
    "delta_sigma",
    "amplitude",
    "width",
];

/// An operator-drawn polyline, optionally bound to an eigenvalue branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedCurve {
    pub track_id: String,
    #[serde(default)]
    pub branch: Option<BranchLabel>,
    pub points: Vec<[f64; 2]>,
}

impl SeedCurve {
    pub fn new(
        track_id: impl Into<String>,
        branch: Option<BranchLabel>,
        points: Vec<[f64; 2]>,
    ) -> Self {
        SeedCurve {
            track_id: track_id.into(),
            branch,
            points,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 {
            return invalid(format!(
                "seed curve '{}' needs at least 2 points",
                self.track_id
            ));
        }
        if self.points.iter().flatten().any(|v| !v.is_finite()) {
            return invalid(format!(
                "seed curve '{}' has non-finite points",
                self.track_id
            ));
        }
        if self.points.windows(2).any(|w| w[1][0] <= w[0][0]) {
            return invalid(format!(
                "seed curve '{}' must have strictly increasing x",
                self.track_id
            ));
        }
        if let Some(b) = &self.branch {
            b.validate()?;
        }
        Ok(())
    }

    pub fn x_range(&self) -> (f64, f64) {
        (self.points[0][0], self.points[self.points.len() - 1][0])
    }

    /// Linear interpolation; `None` outside the curve's x range.
    pub fn interpolate(&self, x: f64) -> Option<f64> {
        let (lo, hi) = self.x_range();
        if !(x >= lo && x <= hi) {
            return None;
        }
        let k = self
            .points
            .partition_point(|p| p[0] <= x)
            .clamp(1, self.points.len() - 1);
        let ([x0, y0], [x1, y1]) = (self.points[k - 1], self.points[k]);
        Some(y0 + (y1 - y0) * (x - x0) / (x1 - x0))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SeedCurves {
    pub curves: Vec<SeedCurve>,
}

#[derive(Serialize, Deserialize)]
struct SeedsDocument {
    format: String,
    version: u32,
    curves: Vec<SeedCurve>,
}

impl SeedCurves {
    pub fn new(curves: Vec<SeedCurve>) -> Self {
        SeedCurves { curves }
    }

    pub fn is_empty(&self) -> bool {
        self.curves.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for c in &self.curves {
            c.validate()?;
            if !ids.insert(c.track_id.as_str()) {
                return invalid(format!("duplicate track_id '{}'", c.track_id));
            }
        }
        Ok(())
    }

    pub fn get(&self, track_id: &str) -> Option<&SeedCurve> {
        self.curves.iter().find(|c| c.track_id == track_id)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = SeedsDocument {
            format: SEEDS_FORMAT.into(),
            version: SEEDS_VERSION,
            curves: self.curves.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: SeedsDocument = serde_json::from_str(text)?;
        if doc.format != SEEDS_FORMAT || doc.version != SEEDS_VERSION {
            return Err(DaxsError::Format(format!(
                "expected {SEEDS_FORMAT} v{SEEDS_VERSION}, got {} v{}",
                doc.format, doc.version
            )));
        }
        let seeds = SeedCurves { curves: doc.curves };
        seeds.validate()?;
        Ok(seeds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub x: f64,
    pub delta: f64,
    pub delta_sigma: f64,
    pub amplitude: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeakTrack {
    pub track_id: String,
    pub branch: Option<BranchLabel>,
    pub points: Vec<TrackPoint>,
}

/// Fitted peak centers grouped per track, each track sorted by x.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PeakTracks {
    pub tracks: Vec<PeakTrack>,
}

#[derive(Serialize, Deserialize)]
struct TrackRow {
    track_id: String,
    x: f64,
    delta: f64,
    delta_sigma: f64,
    amplitude: f64,
    width: f64,
}

impl PeakTracks {
    pub fn is_empty(&self) -> bool {
        self.tracks.iter().all(|t| t.points.is_empty())
    }

    pub fn point_count(&self) -> usize {
        self.tracks.iter().map(|t| t.points.len()).sum()
    }

    pub fn get(&self, track_id: &str) -> Option<&PeakTrack> {
        self.tracks.iter().find(|t| t.track_id == track_id)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for t in &self.tracks {
            if !ids.insert(t.track_id.as_str()) {
                return invalid(format!("duplicate track_id '{}'", t.track_id));
            }
            for p in &t.points {
                if ![p.x, p.delta, p.delta_sigma, p.amplitude, p.width]
                    .iter()
                    .all(|v| v.is_finite())
                {
                    return invalid(format!("track '{}' has a non-finite value", t.track_id));
                }
                if p.delta_sigma <= 0.0 {
                    return invalid(format!(
                        "track '{}' has delta_sigma <= 0 at x = {}",
                        t.track_id, p.x
                    ));
                }
            }
            if t.points.windows(2).any(|w| w[1].x <= w[0].x) {
                return invalid(format!(
                    "track '{}' repeats or reorders x values",
                    t.track_id
                ));
            }
        }
        Ok(())
    }

    /// Attaches branch labels from matching seed curves.
    pub fn bind(&mut self, seeds: &SeedCurves) {
        for t in &mut self.tracks {
            if let Some(c) = seeds.get(&t.track_id) {
                t.branch = c.branch;
            }
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        wtr.write_record(TRACKS_HEADER)?;
        for t in &self.tracks {
            for p in &t.points {
                wtr.serialize(TrackRow {
                    track_id: t.track_id.clone(),
                    x: p.x,
                    delta: p.delta,
                    delta_sigma: p.delta_sigma,
                    amplitude: p.amplitude,
                    width: p.width,
                })?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| DaxsError::Format(e.to_string()))
    }

    /// Reads the CSV form; branches are unbound until [`PeakTracks::bind`].
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        if header != TRACKS_HEADER {
            return Err(DaxsError::Format(format!(
                "unexpected track header {header:?}"
            )));
        }
        let mut out = PeakTracks::default();
        for row in rdr.deserialize() {
            let row: TrackRow = row?;
            let p = TrackPoint {
                x: row.x,
                delta: row.delta,
                delta_sigma: row.delta_sigma,
                amplitude: row.amplitude,
                width: row.width,
            };
            match out.tracks.iter_mut().find(|t| t.track_id == row.track_id) {
                Some(t) => t.points.push(p),
                None => out.tracks.push(PeakTrack {
                    track_id: row.track_id,
                    branch: None,
                    points: vec![p],
                }),
            }
        }
        out.validate()?;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SavgolSettings {
    pub window: usize,
    pub poly_order: usize,
}

/// Extraction settings. Unset distances derive from `linewidth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    /// `None` disables smoothing.
    pub savgol: Option<SavgolSettings>,
    pub linewidth: f64,
    /// Defaults to `[linewidth/4, 4 linewidth]`.
    pub width_bounds: Option<[f64; 2]>,
    /// Fitted centers further than this from their seed are rejected (default 3 linewidths).
    pub max_shift: Option<f64>,
    /// Seeds or centers closer than this are treated as merged (default one linewidth).
    pub merge_distance: Option<f64>,
    /// Half-width of the fit window around each seed (default 3 linewidths).
    pub window_halfwidth: Option<f64>,
    pub baseline: Baseline,
    /// Floor for reported center uncertainties.
    pub min_sigma: f64,
    pub max_iterations: usize,
    pub execution: Execution,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            savgol: Some(SavgolSettings {
                window: 11,
                poly_order: 2,
            }),
            linewidth: DEFAULT_LINEWIDTH,
            width_bounds: None,
            max_shift: None,
            merge_distance: None,
            window_halfwidth: None,
            baseline: Baseline::Fit,
            min_sigma: 1e-6,
            max_iterations: 100,
            execution: Execution::default(),
        }
    }
}

impl ExtractionConfig {
    pub fn for_linewidth(linewidth: f64) -> Self {
        ExtractionConfig {
            linewidth,
            ..Self::default()
        }
    }

    pub fn width_bounds(&self) -> (f64, f64) {
        self.width_bounds
            .map_or((0.25 * self.linewidth, 4.0 * self.linewidth), |[a, b]| {
                (a, b)
            })
    }

    pub fn max_shift(&self) -> f64 {
        self.max_shift.unwrap_or(3.0 * self.linewidth)
    }

    pub fn merge_distance(&self) -> f64 {
        self.merge_distance.unwrap_or(self.linewidth)
    }

    pub fn window_halfwidth(&self) -> f64 {
        self.window_halfwidth.unwrap_or(3.0 * self.linewidth)
    }

    pub fn peak_options(&self) -> PeakFitOptions {
        let mut opts = PeakFitOptions::for_linewidth(self.linewidth);
        opts.width_bounds = self.width_bounds();
        opts.window_halfwidth = self.window_halfwidth();
        opts.baseline = self.baseline;
        opts.lm.max_iterations = self.max_iterations;
        opts
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.linewidth > 0.0 && self.linewidth.is_finite()) {
            return invalid("linewidth must be positive");
        }
        let (lo, hi) = self.width_bounds();
        if !(lo > 0.0 && lo < hi) {
            return invalid(format!(
                "width bounds must satisfy 0 < lo < hi, got ({lo}, {hi})"
            ));
        }
        if !(self.max_shift() > 0.0
            && self.window_halfwidth() > 0.0
            && self.merge_distance() >= 0.0)
        {
            return invalid(
                "max_shift and window_halfwidth must be positive, merge_distance non-negative",
            );
        }
        if !(self.min_sigma > 0.0) {
            return invalid("min_sigma must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    /// Two seeds or two fitted centers closer than the merge distance.
    Merged,
    NotConverged,
    WidthAtBound,
    TrackJump,
    SeedOffImage,
    FitFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedPoint {
    pub track_id: String,
    pub x: f64,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrackExtraction {
    pub tracks: PeakTracks,
    pub rejected: Vec<RejectedPoint>,
    pub warnings: Vec<String>,
}

enum Outcome {
    Accepted(TrackPoint),
    Rejected(RejectReason),
}

fn fit_column(
    img: &SpectralImage,
    ix: usize,
    seeds: &SeedCurves,
    cfg: &ExtractionConfig,
) -> Vec<(usize, Outcome)> {
    let x = img.x_axis.value(ix);
    let y_axis = &img.y_axis;
    let mut out = Vec::new();
    let mut active: Vec<(usize, f64)> = Vec::new();
    for (k, c) in seeds.curves.iter().enumerate() {
        match c.interpolate(x) {
            Some(d) if y_axis.contains(d) => active.push((k, d)),
            Some(_) => out.push((k, Outcome::Rejected(RejectReason::SeedOffImage))),
            None => {}
        }
    }
    let merge = cfg.merge_distance();
    let merged_with_neighbor = |list: &[(usize, f64)], i: usize| {
        list.iter()
            .enumerate()
            .any(|(j, (_, d))| j != i && (d - list[i].1).abs() < merge)
    };
    let (keep, merged): (Vec<_>, Vec<_>) =
        (0..active.len()).partition(|&i| !merged_with_neighbor(&active, i));
    out.extend(
        merged
            .iter()
            .map(|&i| (active[i].0, Outcome::Rejected(RejectReason::Merged))),
    );
    let active: Vec<(usize, f64)> = keep.into_iter().map(|i| active[i]).collect();
    if active.is_empty() {
        return out;
    }

    let centers: Vec<f64> = active.iter().map(|a| a.1).collect();
    let fit = match fit_column_peaks(y_axis, &img.column(ix), &centers, &cfg.peak_options()) {
        Ok(f) => f,
        Err(_) => {
            out.extend(
                active
                    .iter()
                    .map(|&(k, _)| (k, Outcome::Rejected(RejectReason::FitFailed))),
            );
            return out;
        }
    };
    let fitted: Vec<(usize, f64)> = active
        .iter()
        .zip(&fit.peaks)
        .map(|(a, p)| (a.0, p.peak.center))
        .collect();
    for (i, ((k, seed), est)) in active.iter().zip(&fit.peaks).enumerate() {
        let outcome = if merged_with_neighbor(&fitted, i) {
            Outcome::Rejected(RejectReason::Merged)
        } else if est.width_at_bound {
            Outcome::Rejected(RejectReason::WidthAtBound)
        } else if !est.converged {
            Outcome::Rejected(RejectReason::NotConverged)
        } else if (est.peak.center - seed).abs() > cfg.max_shift() {
            Outcome::Rejected(RejectReason::TrackJump)
        } else {
            Outcome::Accepted(TrackPoint {
                x,
                delta: est.peak.center,
                delta_sigma: est.center_sigma.max(cfg.min_sigma),
                amplitude: est.peak.amplitude,
                width: est.peak.width,
            })
        };
        out.push((*k, outcome));
    }
    out
}

/// Smooths `img` along δ, fits the seeded peaks in every column and threads
/// the accepted centers into one track per seed curve.
pub fn extract_tracks(
    img: &SpectralImage,
    seeds: &SeedCurves,
    cfg: &ExtractionConfig,
) -> Result<TrackExtraction> {
    img.validate()?;
    seeds.validate()?;
    cfg.validate()?;
    let mut result = TrackExtraction {
        tracks: PeakTracks {
            tracks: seeds
                .curves
                .iter()
                .map(|c| PeakTrack {
                    track_id: c.track_id.clone(),
                    branch: c.branch,
                    points: Vec::new(),
                })
                .collect(),
        },
        ..TrackExtraction::default()
    };
    if seeds.is_empty() {
        return Ok(result);
    }
    let smoothed;
    let source = match cfg.savgol {
        Some(sg) => {
            smoothed = smooth_columns(img, sg.window, sg.poly_order)?;
            &smoothed
        }
        None => img,
    };

    let columns = map_indexed(img.width(), cfg.execution, |ix| {
        fit_column(source, ix, seeds, cfg)
    });
    let mut covered = vec![false; seeds.curves.len()];
    for (ix, col) in columns.into_iter().enumerate() {
        let x = img.x_axis.value(ix);
        for (k, outcome) in col {
            covered[k] = true;
            match outcome {
                Outcome::Accepted(p) => result.tracks.tracks[k].points.push(p),
                Outcome::Rejected(reason) => result.rejected.push(RejectedPoint {
                    track_id: seeds.curves[k].track_id.clone(),
                    x,
                    reason,
                }),
            }
        }
    }
    for (k, c) in seeds.curves.iter().enumerate() {
        if !covered[k] {
            result.warnings.push(format!(
                "seed curve '{}' covers no image column",
                c.track_id
            ));
        }
    }
    for t in &mut result.tracks.tracks {
        t.points.sort_by(|a, b| a.x.total_cmp(&b.x));
    }
    Ok(result)
}
