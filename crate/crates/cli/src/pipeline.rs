//! End-to-end pipelines shared by the command line and the job worker.

use daxs_core::fit::{
    anticrossing_coverage, build_error_budget, compare_sign_classes, estimate_scan_variability,
    fit_hamiltonian, ErrorBudget, FitConfig, FitResult, SignComparison,
};
use daxs_core::model::SignClass;
use daxs_core::registration::{
    align_images, average_images, fit_anticrossing, vertex_pixel, AlignmentReport, HyperbolaFit,
};
use daxs_core::tracks::{
    extract_tracks, ExtractionConfig, PeakTracks, SeedCurves, TrackExtraction,
};
use daxs_core::{CouplingName, DaxsError, Result, SpectralImage};
use serde::{Deserialize, Serialize};

/// Extraction and fit settings of one fit run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub extraction: ExtractionConfig,
    pub fit: FitConfig,
}

#[derive(Debug, Clone)]
pub struct FitOutput {
    pub extraction: TrackExtraction,
    pub fit: FitResult,
}

pub fn run_fit(img: &SpectralImage, seeds: &SeedCurves, cfg: &PipelineConfig) -> Result<FitOutput> {
    let extraction = extract_tracks(img, seeds, &cfg.extraction)?;
    let mut fit = fit_hamiltonian(&extraction.tracks, &cfg.fit)?;
    fit.warnings.extend(extraction.warnings.iter().cloned());
    Ok(FitOutput { extraction, fit })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignCompareReport {
    pub scans: Vec<SignComparison>,
    /// Class used for the headline means and coverage.
    pub sign_class: SignClass,
    /// Half the class-to-class spread, averaged over scans.
    pub systematic: [f64; 8],
    /// Anticrossings sampled on both branches in at least one scan.
    pub covered: [bool; 8],
    /// Present when there are at least two scans.
    pub budget: Option<ErrorBudget>,
}

/// Compares the two sign classes on every scan and, given repeated scans,
/// combines scan-to-scan spread and class spread into an error budget.
pub fn run_sign_compare(
    scans: &[PeakTracks],
    cfg: &FitConfig,
    linewidth: f64,
) -> Result<SignCompareReport> {
    if scans.is_empty() {
        return Err(DaxsError::InvalidInput(
            "sign comparison needs at least one scan".into(),
        ));
    }
    let comparisons = scans
        .iter()
        .map(|t| compare_sign_classes(t, cfg))
        .collect::<Result<Vec<_>>>()?;
    let chosen = |c: &SignComparison| match cfg.sign_class {
        SignClass::A => c.fit_a.clone(),
        SignClass::B => c.fit_b.clone(),
    };
    let n = comparisons.len() as f64;
    let mut systematic = [0.0; 8];
    for c in &comparisons {
        for (s, v) in systematic.iter_mut().zip(c.systematic()) {
            *s += v / n;
        }
    }
    let mut covered = [false; 8];
    for (c, tracks) in comparisons.iter().zip(scans) {
        let cov = anticrossing_coverage(&chosen(c).params, tracks, linewidth);
        for (k, v) in covered.iter_mut().zip(cov) {
            *k |= v;
        }
    }
    let budget = if comparisons.len() >= 2 {
        let fits: Vec<FitResult> = comparisons.iter().map(chosen).collect();
        let random = estimate_scan_variability(&fits)?;
        Some(build_error_budget(&random, &systematic, &covered)?)
    } else {
        None
    };
    Ok(SignCompareReport {
        scans: comparisons,
        sign_class: cfg.sign_class,
        systematic,
        covered,
        budget,
    })
}

/// Which track locates the registration anticrossing, and where.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnticrossingSpec {
    pub track_id: String,
    /// Detuning window around the anticrossing used for the hyperbola fit.
    pub x_range: [f64; 2],
    #[serde(default)]
    pub extraction: ExtractionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignAverageReport {
    pub images: Vec<AlignmentReport>,
    pub vertices: Vec<HyperbolaFit>,
    /// Pixels present in every aligned image.
    pub common_pixels: usize,
    /// Pixels present in no aligned image; stored as zero.
    pub empty_pixels: usize,
}

/// Locates the anticrossing vertex in every image, aligns all images on the
/// first one by whole pixels and averages them.
pub fn run_align_average(
    images: &[(String, SpectralImage)],
    seeds: &SeedCurves,
    spec: &AnticrossingSpec,
) -> Result<(SpectralImage, AlignAverageReport)> {
    if images.len() < 2 {
        return Err(DaxsError::InvalidInput(format!(
            "averaging needs at least two images, got {}",
            images.len()
        )));
    }
    if seeds.get(&spec.track_id).is_none() {
        return Err(DaxsError::InvalidInput(format!(
            "no seed curve with track_id '{}'",
            spec.track_id
        )));
    }
    let [lo, hi] = spec.x_range;
    let mut vertices = Vec::new();
    let mut refs = Vec::new();
    for (id, img) in images {
        let ex = extract_tracks(img, seeds, &spec.extraction)?;
        let points: Vec<_> = ex
            .tracks
            .get(&spec.track_id)
            .map(|t| {
                t.points
                    .iter()
                    .copied()
                    .filter(|p| p.x >= lo && p.x <= hi)
                    .collect()
            })
            .unwrap_or_default();
        let hyp =
            fit_anticrossing(&points).map_err(|e| DaxsError::Degenerate(format!("{id}: {e}")))?;
        let px = vertex_pixel(&hyp, img).ok_or_else(|| {
            DaxsError::Degenerate(format!("{id}: anticrossing vertex lies outside the image"))
        })?;
        vertices.push(hyp);
        refs.push(px);
    }
    let plain: Vec<SpectralImage> = images.iter().map(|(_, img)| img.clone()).collect();
    let aligned = align_images(&plain, &refs)?;
    let avg = average_images(&aligned.iter().map(|a| a.image.clone()).collect::<Vec<_>>())?;
    let reports = images
        .iter()
        .zip(&refs)
        .zip(&aligned)
        .map(|(((id, _), r), a)| AlignmentReport {
            image_id: id.clone(),
            ref_pixel: *r,
            shift: a.shift,
        })
        .collect();
    let report = AlignAverageReport {
        images: reports,
        vertices,
        common_pixels: avg.counts.iter().filter(|&&c| c == images.len()).count(),
        empty_pixels: avg.counts.iter().filter(|&&c| c == 0).count(),
    };
    Ok((avg.image.image, report))
}

/// Fitted branch polylines for display over the image the fit came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub track_id: String,
    pub branch: daxs_core::BranchLabel,
    pub points: Vec<[f64; 2]>,
}

pub fn overlay_polylines(fit: &FitResult, img: &SpectralImage) -> Vec<Polyline> {
    let xs = img.x_axis.values();
    fit.track_residuals
        .iter()
        .map(|t| Polyline {
            track_id: t.track_id.clone(),
            branch: t.branch,
            points: fit.branch_curve(&t.branch, &xs),
        })
        .collect()
}

/// Signed value and standard error of every coupling.
pub fn coupling_table(fit: &FitResult) -> Vec<(CouplingName, f64, Option<f64>)> {
    CouplingName::ALL
        .into_iter()
        .map(|c| {
            (
                c,
                fit.params.couplings.get(c).value(),
                fit.stderr
                    .get(&daxs_core::fit::ParamName::coupling(c))
                    .copied(),
            )
        })
        .collect()
}
