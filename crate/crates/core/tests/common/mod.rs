#![allow(dead_code)]

use daxs_core::image::AxisSpec;
use daxs_core::model::{LevelOffsets, ModelParams, OffsetName, Spectrum, TunnelCouplings};
use daxs_core::sim::{render_daxs_image, SimConfig};
use daxs_core::tracks::{extract_tracks, ExtractionConfig, PeakTracks, SeedCurve, SeedCurves};
use daxs_core::CouplingName;
use daxs_core::{BranchLabel, Sector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LINEWIDTH: f64 = 2.0;

/// Desk-scale device: couplings in 2-25 GHz, with `t42` equal to `t32`.
///
/// Anticrossings sit at eps = -120 (t12), -80 (t22), -40 (t32), 0 (t11),
/// 30 (t42), 40 (t21), 80 (t31) and 150 (t41).
pub fn device(t41: f64) -> ModelParams {
    ModelParams {
        // t11 t12 t21 t22 t31 t32 t41 t42
        couplings: TunnelCouplings::from_magnitudes([8.0, 14.0, 5.0, 12.0, 10.0, 20.0, t41, 20.0]),
        offsets: LevelOffsets {
            l21: 120.0,
            r21: 40.0,
            r31: 80.0,
            r41: 150.0,
        },
        zeeman: 0.0,
    }
}

/// Branches drawn in the synthetic scans: all triplets and the singlet
/// branches of the valley block that contains the R1 state.
pub fn visible_labels() -> Vec<BranchLabel> {
    (0..4)
        .map(BranchLabel::triplet)
        .chain([0, 2, 4, 6].map(BranchLabel::singlet))
        .collect()
}

pub fn sim_config(noise_sigma: f64, seed: u64) -> SimConfig {
    let mut cfg = SimConfig::new(
        AxisSpec::new(-150.0, 1.0, 326),
        AxisSpec::new(-105.0, 0.25, 1401),
    );
    cfg.linewidth = LINEWIDTH;
    cfg.noise_sigma = noise_sigma;
    cfg.rng_seed = seed;
    for i in [1, 3, 5] {
        cfg.set_weight(Sector::Singlet, i, 0.0);
    }
    cfg
}

/// Seed polylines traced along the true branches every `spacing` GHz, the
/// way an operator would draw them over the visible lines.
pub fn seeds_from_truth(params: &ModelParams, cfg: &SimConfig, spacing: f64) -> SeedCurves {
    let a = cfg.eps_axis;
    let last = a.start + (a.count - 1) as f64 * a.step;
    let n = ((last - a.start) / spacing).round() as usize;
    let xs: Vec<f64> = (0..=n)
        .map(|i| a.start + (last - a.start) * i as f64 / n as f64)
        .collect();
    SeedCurves::new(
        visible_labels()
            .into_iter()
            .map(|l| {
                let pts = xs
                    .iter()
                    .map(|&x| {
                        [
                            x,
                            cfg.scale * Spectrum::compute(params, x).energy(&l, 0.0).unwrap()
                                + cfg.delta_offset,
                        ]
                    })
                    .collect();
                SeedCurve::new(l.to_string(), Some(l), pts)
            })
            .collect(),
    )
}

/// Every magnitude and offset scaled by an independent factor in
/// `[1 - spread, 1 + spread]`.
pub fn perturbed(params: &ModelParams, spread: f64, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = *params;
    let mut f = || 1.0 + rng.random_range(-spread..=spread);
    for c in CouplingName::ALL {
        p.couplings.get_mut(c).magnitude *= f();
    }
    for o in OffsetName::ALL {
        *p.offsets.get_mut(o) *= f();
    }
    p
}

/// Renders one scan of `params` and extracts tracks along the true branches.
pub fn simulate_and_extract(params: &ModelParams, cfg: &SimConfig) -> PeakTracks {
    let img = render_daxs_image(params, cfg, None, 0.0).unwrap();
    let seeds = seeds_from_truth(params, cfg, 5.0);
    extract_tracks(&img, &seeds, &ExtractionConfig::for_linewidth(LINEWIDTH))
        .unwrap()
        .tracks
}
