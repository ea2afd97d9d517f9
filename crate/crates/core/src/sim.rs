//! Forward simulation of DAXS images, reservoir sweeps and
//! magnetospectroscopy maps.
//!
//! Every visible eigenvalue branch draws a Lorentzian line at
//! `delta = scale * E(eps) + delta_offset`. Lead resonances are extra
//! Lorentzian lines whose delta position moves linearly with the reservoir
//! gate voltage. Gaussian pixel noise is drawn from a seeded generator in
//! row-major order after all columns are rendered, so images are identical
//! whatever the column evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::exec::{map_indexed, Execution};
use crate::image::{AxisSpec, SpectralImage};
use crate::model::{branches_unchecked, BranchLabel, ModelParams, Sector};
use crate::peaks::lorentzian;

pub const DEFAULT_LINEWIDTH: f64 = 2.0;

fn default_linewidth() -> f64 {
    DEFAULT_LINEWIDTH
}

fn one() -> f64 {
    1.0
}

/// Visibility of every spin component of one collapsed branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisibilityWeight {
    pub sector: Sector,
    pub index: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub eps_axis: AxisSpec,
    pub delta_axis: AxisSpec,
    /// Full width at half maximum of dot lines.
    #[serde(default = "default_linewidth")]
    pub linewidth: f64,
    /// Branches not listed have weight 1.
    #[serde(default)]
    pub visibility: Vec<VisibilityWeight>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub delta_offset: f64,
    #[serde(default)]
    pub execution: Execution,
}

impl SimConfig {
    pub fn new(eps_axis: AxisSpec, delta_axis: AxisSpec) -> Self {
        SimConfig {
            eps_axis,
            delta_axis,
            linewidth: DEFAULT_LINEWIDTH,
            visibility: Vec::new(),
            noise_sigma: 0.0,
            rng_seed: 0,
            scale: 1.0,
            delta_offset: 0.0,
            execution: Execution::default(),
        }
    }

    pub fn weight(&self, label: &BranchLabel) -> f64 {
        self.visibility
            .iter()
            .find(|v| v.sector == label.sector && v.index == label.index)
            .map_or(1.0, |v| v.weight)
    }

    /// Sets the weight of one branch, replacing any earlier entry.
    pub fn set_weight(&mut self, sector: Sector, index: usize, weight: f64) {
        self.visibility
            .retain(|v| !(v.sector == sector && v.index == index));
        self.visibility.push(VisibilityWeight {
            sector,
            index,
            weight,
        });
    }

    pub fn validate(&self) -> Result<()> {
        self.eps_axis.validate("eps")?;
        self.delta_axis.validate("delta")?;
        if !(self.linewidth.is_finite() && self.linewidth > 0.0) {
            return invalid(format!("linewidth must be > 0, got {}", self.linewidth));
        }
        if self
            .visibility
            .iter()
            .any(|v| !(v.weight.is_finite() && v.weight >= 0.0))
        {
            return invalid("visibility weights must be finite and >= 0");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return invalid("noise_sigma must be finite and >= 0");
        }
        if !self.scale.is_finite() || !self.delta_offset.is_finite() {
            return invalid("scale and delta_offset must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeadResonance {
    /// delta position at zero reservoir voltage (GHz).
    pub intercept: f64,
    /// d delta / d V (GHz per mV); never zero.
    pub slope: f64,
    pub linewidth: f64,
    pub amplitude: f64,
}

impl LeadResonance {
    pub fn position(&self, voltage: f64) -> f64 {
        self.intercept + self.slope * voltage
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LeadModel {
    pub resonances: Vec<LeadResonance>,
}

impl LeadModel {
    pub fn validate(&self) -> Result<()> {
        for r in &self.resonances {
            if r.slope == 0.0 || !r.slope.is_finite() {
                return invalid("lead resonance slopes must be nonzero");
            }
            if !(r.linewidth.is_finite() && r.linewidth > 0.0) || !r.amplitude.is_finite() {
                return invalid("lead resonance linewidth must be > 0 and amplitude finite");
            }
        }
        Ok(())
    }
}

/// One rendered line in a column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub label: Option<BranchLabel>,
    pub center: f64,
    pub width: f64,
    pub amplitude: f64,
}

/// Dot lines at one detuning, after scale, offset and visibility.
///
/// Split triplet components share the branch weight equally so a map is
/// continuous at zero field.
pub fn dot_lines(params: &ModelParams, cfg: &SimConfig, eps: f64) -> Vec<Line> {
    let split = params.zeeman > 0.0;
    branches_unchecked(params, eps)
        .into_iter()
        .filter_map(|(label, e)| {
            let mut w = cfg.weight(&label);
            if split && label.sector == Sector::Triplet {
                w /= 3.0;
            }
            (w > 0.0).then_some(Line {
                label: Some(label),
                center: cfg.scale * e + cfg.delta_offset,
                width: cfg.linewidth,
                amplitude: w,
            })
        })
        .collect()
}

fn lead_lines(leads: Option<&LeadModel>, voltage: f64) -> Vec<Line> {
    leads
        .map(|m| {
            m.resonances
                .iter()
                .map(|r| Line {
                    label: None,
                    center: r.position(voltage),
                    width: r.linewidth,
                    amplitude: r.amplitude,
                })
                .collect()
        })
        .unwrap_or_default()
}

fn render_column(lines: &[Line], delta: &AxisSpec) -> Vec<f64> {
    (0..delta.count)
        .map(|iy| {
            let d = delta.start + iy as f64 * delta.step;
            lines
                .iter()
                .map(|l| l.amplitude * lorentzian(d, l.center, l.width))
                .sum()
        })
        .collect()
}

fn add_noise(img: &mut SpectralImage, sigma: f64, seed: u64) {
    if sigma == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in img.data.iter_mut() {
        *v += normal.sample(&mut rng);
    }
}

/// DAXS image over (eps, delta).
pub fn render_daxs_image(
    params: &ModelParams,
    cfg: &SimConfig,
    leads: Option<&LeadModel>,
    lead_voltage: f64,
) -> Result<SpectralImage> {
    params.validate()?;
    cfg.validate()?;
    if let Some(l) = leads {
        l.validate()?;
    }
    let leads = lead_lines(leads, lead_voltage);
    let columns = map_indexed(cfg.eps_axis.count, cfg.execution, |ix| {
        let eps = cfg.eps_axis.start + ix as f64 * cfg.eps_axis.step;
        let mut lines = dot_lines(params, cfg, eps);
        lines.extend_from_slice(&leads);
        render_column(&lines, &cfg.delta_axis)
    });
    let mut img = SpectralImage::from_columns(
        cfg.eps_axis.named("eps", "GHz"),
        cfg.delta_axis.named("delta", "GHz"),
        &columns,
    );
    add_noise(&mut img, cfg.noise_sigma, cfg.rng_seed);
    Ok(img)
}

/// delta versus reservoir gate voltage at fixed detuning.
///
/// Compensation is taken as ideal, so dot lines do not move with voltage.
pub fn render_reservoir_sweep(
    params: &ModelParams,
    leads: &LeadModel,
    eps_fixed: f64,
    voltage_axis: &AxisSpec,
    cfg: &SimConfig,
) -> Result<SpectralImage> {
    params.validate()?;
    cfg.validate()?;
    leads.validate()?;
    voltage_axis.validate("voltage")?;
    if !eps_fixed.is_finite() {
        return invalid("eps_fixed must be finite");
    }
    let dots = dot_lines(params, cfg, eps_fixed);
    let columns = map_indexed(voltage_axis.count, cfg.execution, |ix| {
        let v = voltage_axis.start + ix as f64 * voltage_axis.step;
        let mut lines = dots.clone();
        lines.extend(lead_lines(Some(leads), v));
        render_column(&lines, &cfg.delta_axis)
    });
    let mut img = SpectralImage::from_columns(
        voltage_axis.named("V_reservoir", "mV"),
        cfg.delta_axis.named("delta", "GHz"),
        &columns,
    );
    add_noise(&mut img, cfg.noise_sigma, cfg.rng_seed);
    Ok(img)
}

/// delta versus Zeeman energy at fixed detuning.
pub fn render_magneto_map(
    params: &ModelParams,
    ez_axis: &AxisSpec,
    eps_fixed: f64,
    cfg: &SimConfig,
) -> Result<SpectralImage> {
    params.validate()?;
    cfg.validate()?;
    ez_axis.validate("zeeman")?;
    if ez_axis.start < 0.0 || ez_axis.start + (ez_axis.count - 1) as f64 * ez_axis.step < 0.0 {
        return invalid("Zeeman axis must be >= 0");
    }
    if !eps_fixed.is_finite() {
        return invalid("eps_fixed must be finite");
    }
    let columns = map_indexed(ez_axis.count, cfg.execution, |ix| {
        let p = ModelParams {
            zeeman: ez_axis.start + ix as f64 * ez_axis.step,
            ..*params
        };
        render_column(&dot_lines(&p, cfg, eps_fixed), &cfg.delta_axis)
    });
    let mut img = SpectralImage::from_columns(
        ez_axis.named("E_Z", "GHz"),
        cfg.delta_axis.named("delta", "GHz"),
        &columns,
    );
    add_noise(&mut img, cfg.noise_sigma, cfg.rng_seed);
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::mev_to_ghz;
    use crate::model::{Coupling, LevelOffsets};

    fn params() -> ModelParams {
        let mut p = ModelParams {
            offsets: LevelOffsets {
                l21: 60.0,
                r21: 5.0,
                r31: 40.0,
                r41: 80.0,
            },
            ..Default::default()
        };
        p.couplings.t21 = Coupling::positive(4.0);
        p
    }

    fn only(cfg: &mut SimConfig, sector: Sector, index: usize) {
        for i in 0..4 {
            cfg.set_weight(Sector::Triplet, i, 0.0);
        }
        for i in 0..7 {
            cfg.set_weight(Sector::Singlet, i, 0.0);
        }
        cfg.set_weight(sector, index, 1.0);
    }

    fn argmax(v: &[f64]) -> usize {
        v.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0
    }

    #[test]
    fn single_branch_peaks_at_nearest_pixel() {
        let mut cfg = SimConfig::new(
            AxisSpec::new(-20.0, 2.0, 21),
            AxisSpec::new(-40.0, 0.25, 321),
        );
        cfg.scale = 1.02;
        cfg.delta_offset = 1.3;
        only(&mut cfg, Sector::Singlet, 0);
        let p = params();
        let img = render_daxs_image(&p, &cfg, None, 0.0).unwrap();
        for ix in 0..img.width() {
            let eps = img.x_axis.value(ix);
            let e = branches_unchecked(&p, eps)
                .into_iter()
                .find(|(l, _)| *l == BranchLabel::singlet(0))
                .unwrap()
                .1;
            let center = cfg.scale * e + cfg.delta_offset;
            assert_eq!(Some(argmax(&img.column(ix))), img.y_axis.nearest(center));
        }
    }

    #[test]
    fn invisible_branches_render_nothing() {
        let mut cfg = SimConfig::new(AxisSpec::new(-20.0, 2.0, 5), AxisSpec::new(-40.0, 1.0, 50));
        only(&mut cfg, Sector::Singlet, 0);
        cfg.set_weight(Sector::Singlet, 0, 0.0);
        let img = render_daxs_image(&params(), &cfg, None, 0.0).unwrap();
        assert!(img.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn anticrossing_gap_visible_in_image() {
        let mut cfg = SimConfig::new(AxisSpec::new(5.0, 1.0, 1), AxisSpec::new(-10.0, 0.01, 2001));
        only(&mut cfg, Sector::Triplet, 0);
        cfg.set_weight(Sector::Triplet, 1, 1.0);
        let img = render_daxs_image(&params(), &cfg, None, 0.0).unwrap();
        let col = img.column(0);
        // the two maxima, one on each side of the midpoint 2.5
        let mid = img.y_axis.nearest(2.5).unwrap();
        let lo = argmax(&col[..mid]);
        let hi = mid + argmax(&col[mid..]);
        let gap = img.y_axis.value(hi) - img.y_axis.value(lo);
        // Lorentzian overlap pulls the maxima together slightly
        assert!((gap - 8.0).abs() < 0.05, "gap {gap}");
    }

    #[test]
    fn empty_axes_rejected() {
        let cfg = SimConfig::new(AxisSpec::new(0.0, 1.0, 0), AxisSpec::new(0.0, 1.0, 10));
        assert!(render_daxs_image(&params(), &cfg, None, 0.0).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let mut cfg = SimConfig::new(AxisSpec::new(-20.0, 4.0, 11), AxisSpec::new(-40.0, 1.0, 80));
        cfg.noise_sigma = 0.1;
        cfg.rng_seed = 7;
        let a = render_daxs_image(&params(), &cfg, None, 0.0).unwrap();
        cfg.execution = Execution::Sequential;
        let b = render_daxs_image(&params(), &cfg, None, 0.0).unwrap();
        assert_eq!(a.data, b.data);
        cfg.rng_seed = 8;
        let c = render_daxs_image(&params(), &cfg, None, 0.0).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn linear_in_visibility() {
        let base = SimConfig::new(AxisSpec::new(-20.0, 4.0, 11), AxisSpec::new(-40.0, 1.0, 80));
        let mut w1 = base.clone();
        let mut w2 = base.clone();
        let mut sum = base.clone();
        for (i, (a, b)) in [(0.3, 0.0), (0.0, 1.1), (0.5, 0.25), (1.0, 2.0)]
            .into_iter()
            .enumerate()
        {
            w1.set_weight(Sector::Triplet, i, a);
            w2.set_weight(Sector::Triplet, i, b);
            sum.set_weight(Sector::Triplet, i, a + b);
        }
        for i in 0..7 {
            w1.set_weight(Sector::Singlet, i, 0.1 * i as f64);
            w2.set_weight(Sector::Singlet, i, 0.0);
            sum.set_weight(Sector::Singlet, i, 0.1 * i as f64);
        }
        let p = params();
        let a = render_daxs_image(&p, &w1, None, 0.0).unwrap();
        let b = render_daxs_image(&p, &w2, None, 0.0).unwrap();
        let s = render_daxs_image(&p, &sum, None, 0.0).unwrap();
        for k in 0..s.data.len() {
            assert!((a.data[k] + b.data[k] - s.data[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn reservoir_sweep_without_leads_has_identical_columns() {
        let cfg = SimConfig::new(AxisSpec::new(0.0, 1.0, 1), AxisSpec::new(-300.0, 1.0, 400));
        let img = render_reservoir_sweep(
            &params(),
            &LeadModel::default(),
            mev_to_ghz(1.5),
            &AxisSpec::new(0.0, 0.5, 9),
            &cfg,
        )
        .unwrap();
        let first = img.column(0);
        for ix in 1..img.width() {
            assert_eq!(img.column(ix), first);
        }
    }

    #[test]
    fn lead_moves_with_slope() {
        let mut cfg = SimConfig::new(AxisSpec::new(0.0, 1.0, 1), AxisSpec::new(0.0, 0.05, 401));
        for i in 0..4 {
            cfg.set_weight(Sector::Triplet, i, 0.0);
        }
        for i in 0..7 {
            cfg.set_weight(Sector::Singlet, i, 0.0);
        }
        let leads = LeadModel {
            resonances: vec![LeadResonance {
                intercept: 5.0,
                slope: 0.5,
                linewidth: 1.0,
                amplitude: 1.0,
            }],
        };
        let img =
            render_reservoir_sweep(&params(), &leads, 0.0, &AxisSpec::new(0.0, 10.0, 2), &cfg)
                .unwrap();
        let p0 = img.y_axis.value(argmax(&img.column(0)));
        let p1 = img.y_axis.value(argmax(&img.column(1)));
        assert!((p1 - p0 - 5.0).abs() < 1e-9);
    }

    #[test]
    fn zero_field_column_matches_daxs() {
        let mut p = params();
        p.couplings.t11 = Coupling::positive(3.0);
        let eps = 12.0;
        let cfg = SimConfig::new(AxisSpec::new(eps, 1.0, 1), AxisSpec::new(-60.0, 0.5, 300));
        let daxs = render_daxs_image(&p, &cfg, None, 0.0).unwrap();
        let magneto = render_magneto_map(&p, &AxisSpec::new(0.0, 1.0, 4), eps, &cfg).unwrap();
        assert_eq!(magneto.column(0), daxs.column(0));
    }

    #[test]
    fn zeeman_axis_must_be_non_negative() {
        let cfg = SimConfig::new(AxisSpec::new(0.0, 1.0, 1), AxisSpec::new(-60.0, 0.5, 300));
        assert!(render_magneto_map(&params(), &AxisSpec::new(-1.0, 1.0, 4), 0.0, &cfg).is_err());
    }
}
