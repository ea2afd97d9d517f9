//! Global fit of Hamiltonian eigenvalue branches to peak tracks, sign-class
//! comparison and the scan-to-scan error budget.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, DaxsError, Result};
use crate::exec::{join, map_indexed, Execution};
use crate::lsq::{minimize, Bounds, LeastSquaresProblem, LmOptions};
use crate::model::{
    layout, zeeman_shift, BranchLabel, CouplingName, ModelParams, OffsetName, Sector, SignClass,
    Spectrum,
};
use crate::tracks::PeakTracks;

/// A fittable scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamName {
    L21,
    R21,
    R31,
    R41,
    T11,
    T12,
    T21,
    T22,
    T31,
    T32,
    T41,
    T42,
    #[serde(rename = "s")]
    Scale,
    DeltaOffset,
}

impl ParamName {
    pub const ALL: [ParamName; 14] = [
        ParamName::L21,
        ParamName::R21,
        ParamName::R31,
        ParamName::R41,
        ParamName::T11,
        ParamName::T12,
        ParamName::T21,
        ParamName::T22,
        ParamName::T31,
        ParamName::T32,
        ParamName::T41,
        ParamName::T42,
        ParamName::Scale,
        ParamName::DeltaOffset,
    ];

    pub fn coupling(c: CouplingName) -> ParamName {
        ParamName::ALL[4 + c.index()]
    }

    pub fn offset(o: OffsetName) -> ParamName {
        ParamName::ALL[o.index()]
    }

    pub fn as_coupling(self) -> Option<CouplingName> {
        let i = self as usize;
        (4..12).contains(&i).then(|| CouplingName::ALL[i - 4])
    }

    pub fn as_offset(self) -> Option<OffsetName> {
        let i = self as usize;
        (i < 4).then(|| OffsetName::ALL[i])
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamName::Scale => "s",
            ParamName::DeltaOffset => "delta_offset",
            p => match (p.as_offset(), p.as_coupling()) {
                (Some(o), _) => o.as_str(),
                (_, Some(c)) => c.as_str(),
                _ => unreachable!(),
            },
        }
    }

    pub fn parse(s: &str) -> Option<ParamName> {
        ParamName::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

impl fmt::Display for ParamName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Residuals divided by the track point's `delta_sigma`.
    #[default]
    InverseVariance,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub initial: ModelParams,
    /// Parameters held at their initial values.
    pub fixed: Vec<ParamName>,
    pub sign_class: SignClass,
    pub scale: f64,
    pub fit_scale: bool,
    pub delta_offset: f64,
    pub fit_delta_offset: bool,
    /// Hold `t42` equal to `t32`.
    pub tie_t42_to_t32: bool,
    pub max_iterations: usize,
    /// Stop when a step lowers the objective by less than this fraction.
    pub tolerance: f64,
    pub weighting: Weighting,
    /// Extra starts with magnitudes scattered around the initial values.
    pub restarts: usize,
    pub restart_spread: f64,
    pub seed: u64,
    /// Used for independent fits (sign classes, restarts).
    pub execution: Execution,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            initial: ModelParams::default(),
            fixed: Vec::new(),
            sign_class: SignClass::A,
            scale: 1.0,
            fit_scale: true,
            delta_offset: 0.0,
            fit_delta_offset: true,
            tie_t42_to_t32: true,
            max_iterations: 200,
            tolerance: 1e-10,
            weighting: Weighting::InverseVariance,
            restarts: 0,
            restart_spread: 0.3,
            seed: 0,
            execution: Execution::default(),
        }
    }
}

impl FitConfig {
    pub fn new(initial: ModelParams) -> Self {
        FitConfig {
            initial,
            ..Self::default()
        }
    }

    /// Free parameters in `ParamName::ALL` order.
    pub fn free_parameters(&self) -> Vec<ParamName> {
        ParamName::ALL
            .into_iter()
            .filter(|p| !self.fixed.contains(p))
            .filter(|p| !(self.tie_t42_to_t32 && *p == ParamName::T42))
            .filter(|p| !(*p == ParamName::Scale && !self.fit_scale))
            .filter(|p| !(*p == ParamName::DeltaOffset && !self.fit_delta_offset))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.initial.couplings.validate()?;
        if ![
            self.initial.offsets.l21,
            self.initial.offsets.r21,
            self.initial.offsets.r31,
            self.initial.offsets.r41,
        ]
        .iter()
        .all(|v| v.is_finite() && *v >= 0.0)
        {
            return invalid("initial offsets must be finite and >= 0");
        }
        if !(self.initial.zeeman.is_finite() && self.initial.zeeman >= 0.0) {
            return invalid("zeeman energy must be finite and >= 0");
        }
        if !(self.scale.is_finite() && self.scale > 0.0 && self.delta_offset.is_finite()) {
            return invalid("scale must be positive and delta_offset finite");
        }
        if self.free_parameters().is_empty() {
            return invalid("at least one parameter must be free");
        }
        if !(self.tolerance > 0.0) {
            return invalid("tolerance must be positive");
        }
        if !(self.restart_spread >= 0.0 && self.restart_spread < 1.0) {
            return invalid("restart_spread must lie in [0, 1)");
        }
        Ok(())
    }

    fn lm_options(&self) -> LmOptions {
        LmOptions {
            max_iterations: self.max_iterations,
            ftol: self.tolerance,
            xtol: 1e-12,
            gtol: 1e-14,
            initial_damping: 1e-3,
        }
    }
}

/// Full parameter state: model, scale, offset.
#[derive(Debug, Clone, Copy, PartialEq)]
struct State {
    params: ModelParams,
    scale: f64,
    delta_offset: f64,
}

impl State {
    fn get(&self, p: ParamName) -> f64 {
        match p {
            ParamName::Scale => self.scale,
            ParamName::DeltaOffset => self.delta_offset,
            _ => match (p.as_offset(), p.as_coupling()) {
                (Some(o), _) => self.params.offsets.get(o),
                (_, Some(c)) => self.params.couplings.get(c).magnitude,
                _ => unreachable!(),
            },
        }
    }

    fn set(&mut self, p: ParamName, v: f64) {
        match p {
            ParamName::Scale => self.scale = v,
            ParamName::DeltaOffset => self.delta_offset = v,
            _ => match (p.as_offset(), p.as_coupling()) {
                (Some(o), _) => *self.params.offsets.get_mut(o) = v,
                (_, Some(c)) => self.params.couplings.get_mut(c).magnitude = v,
                _ => unreachable!(),
            },
        }
    }
}

struct FitPoint {
    track: usize,
    x_index: usize,
    delta: f64,
    weight: f64,
}

/// The weighted least-squares objective over bound track points.
pub struct GlobalObjective {
    base: State,
    free: Vec<ParamName>,
    tie: bool,
    labels: Vec<BranchLabel>,
    track_ids: Vec<String>,
    xs: Vec<f64>,
    points: Vec<FitPoint>,
    warnings: Vec<String>,
}

impl GlobalObjective {
    pub fn new(tracks: &PeakTracks, cfg: &FitConfig) -> Result<Self> {
        cfg.validate()?;
        tracks.validate()?;
        let mut params = cfg.initial;
        params.couplings = params
            .couplings
            .with_signs(&cfg.sign_class.representative());
        if cfg.tie_t42_to_t32 {
            params.couplings.t42.magnitude = params.couplings.t32.magnitude;
        }
        let base = State {
            params,
            scale: cfg.scale,
            delta_offset: cfg.delta_offset,
        };

        let mut seen = HashSet::new();
        let mut labels = Vec::new();
        let mut track_ids = Vec::new();
        let mut xs: Vec<f64> = Vec::new();
        let mut points = Vec::new();
        let mut warnings = Vec::new();
        for t in &tracks.tracks {
            let Some(label) = t.branch else {
                if !t.points.is_empty() {
                    warnings.push(format!(
                        "track '{}' is not bound to a branch and was ignored",
                        t.track_id
                    ));
                }
                continue;
            };
            label.validate()?;
            if label.spin_z != 0 && params.zeeman == 0.0 {
                return invalid(format!(
                    "track '{}' is bound to {label} but the Zeeman energy is zero",
                    t.track_id
                ));
            }
            if !seen.insert(label) {
                return invalid(format!("branch {label} is bound to more than one track"));
            }
            let k = labels.len();
            labels.push(label);
            track_ids.push(t.track_id.clone());
            for p in &t.points {
                let x_index = match xs.iter().position(|&x| x == p.x) {
                    Some(i) => i,
                    None => {
                        xs.push(p.x);
                        xs.len() - 1
                    }
                };
                let weight = match cfg.weighting {
                    Weighting::InverseVariance => 1.0 / p.delta_sigma,
                    Weighting::Uniform => 1.0,
                };
                points.push(FitPoint {
                    track: k,
                    x_index,
                    delta: p.delta,
                    weight,
                });
            }
        }
        if labels.is_empty() {
            return invalid("no track is bound to a branch");
        }
        let free = cfg.free_parameters();
        if points.len() <= free.len() {
            return invalid(format!(
                "{} track points cannot constrain {} free parameters",
                points.len(),
                free.len()
            ));
        }
        Ok(GlobalObjective {
            base,
            free,
            tie: cfg.tie_t42_to_t32,
            labels,
            track_ids,
            xs,
            points,
            warnings,
        })
    }

    pub fn free_parameters(&self) -> &[ParamName] {
        &self.free
    }

    pub fn initial_point(&self) -> Vec<f64> {
        self.free.iter().map(|&p| self.base.get(p)).collect()
    }

    pub fn bounds(&self) -> Bounds {
        let mut b = Bounds::unbounded(self.free.len());
        for (i, p) in self.free.iter().enumerate() {
            match p {
                ParamName::DeltaOffset => {}
                ParamName::Scale => b.lower[i] = 1e-6,
                _ => b.lower[i] = 0.0,
            }
        }
        b
    }

    fn state(&self, x: &[f64]) -> State {
        let mut s = self.base;
        for (&p, &v) in self.free.iter().zip(x) {
            s.set(p, v);
        }
        if self.tie {
            s.params.couplings.t42.magnitude = s.params.couplings.t32.magnitude;
        }
        s
    }

    fn spectra(&self, s: &State) -> Vec<Spectrum> {
        self.xs
            .iter()
            .map(|&x| Spectrum::compute(&s.params, x))
            .collect()
    }

    fn model_energy(&self, spectra: &[Spectrum], s: &State, pt: &FitPoint) -> f64 {
        let label = &self.labels[pt.track];
        let e = spectra[pt.x_index]
            .state(label)
            .map_or(f64::NAN, |st| st.energy)
            + zeeman_shift(label, s.params.zeeman);
        s.scale * e + s.delta_offset
    }

    /// Weighted residuals `(model - delta) * weight`.
    pub fn residuals(&self, x: &[f64]) -> Vec<f64> {
        let s = self.state(x);
        let spectra = self.spectra(&s);
        self.points
            .iter()
            .map(|pt| (self.model_energy(&spectra, &s, pt) - pt.delta) * pt.weight)
            .collect()
    }

    /// Half the weighted sum of squares.
    pub fn cost(&self, x: &[f64]) -> f64 {
        0.5 * self.residuals(x).iter().map(|r| r * r).sum::<f64>()
    }

    /// Analytic Jacobian of the weighted residuals.
    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let s = self.state(x);
        let spectra = self.spectra(&s);
        let mut jac = DMatrix::zeros(self.points.len(), self.free.len());
        for (i, pt) in self.points.iter().enumerate() {
            let label = &self.labels[pt.track];
            let Some(st) = spectra[pt.x_index].state(label) else {
                continue;
            };
            let g = st.gradient(&s.params);
            for (j, p) in self.free.iter().enumerate() {
                let d = match p {
                    ParamName::Scale => st.energy + zeeman_shift(label, s.params.zeeman),
                    ParamName::DeltaOffset => 1.0,
                    ParamName::T32 if self.tie => {
                        s.scale
                            * (g.couplings[CouplingName::T32.index()]
                                + g.couplings[CouplingName::T42.index()])
                    }
                    _ => match (p.as_offset(), p.as_coupling()) {
                        (Some(o), _) => s.scale * g.offsets[o.index()],
                        (_, Some(c)) => s.scale * g.couplings[c.index()],
                        _ => unreachable!(),
                    },
                };
                jac[(i, j)] = d * pt.weight;
            }
        }
        jac
    }

    /// Gradient of [`GlobalObjective::cost`].
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let r = nalgebra::DVector::from_vec(self.residuals(x));
        (self.jacobian(x).transpose() * r).iter().copied().collect()
    }

    /// Unweighted residuals in GHz, grouped per bound track.
    fn track_residuals(&self, s: &State) -> Vec<Vec<f64>> {
        let spectra = self.spectra(s);
        let mut out = vec![Vec::new(); self.labels.len()];
        for pt in &self.points {
            out[pt.track].push(self.model_energy(&spectra, s, pt) - pt.delta);
        }
        out
    }
}

impl LeastSquaresProblem for GlobalObjective {
    fn num_params(&self) -> usize {
        self.free.len()
    }

    fn num_residuals(&self) -> usize {
        self.points.len()
    }

    fn residuals(&self, params: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&GlobalObjective::residuals(self, params));
    }

    fn jacobian(&self, params: &[f64], jac: &mut DMatrix<f64>) {
        *jac = GlobalObjective::jacobian(self, params);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackResidual {
    pub track_id: String,
    pub branch: BranchLabel,
    /// Model minus measured center, GHz.
    pub residuals: Vec<f64>,
}

mod stderr_map {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::ParamName;

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<ParamName, f64>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let m: BTreeMap<&str, Option<f64>> = map
            .iter()
            .map(|(k, v)| (k.as_str(), v.is_finite().then_some(*v)))
            .collect();
        m.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<BTreeMap<ParamName, f64>, D::Error> {
        let m = BTreeMap::<ParamName, Option<f64>>::deserialize(d)?;
        Ok(m.into_iter()
            .map(|(k, v)| (k, v.unwrap_or(f64::INFINITY)))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: ModelParams,
    pub s: f64,
    pub delta_offset: f64,
    pub sign_class: SignClass,
    /// Unweighted RMS of model minus measured centers, GHz.
    pub residual_rms: f64,
    /// RMS of the weighted residuals at the solution.
    pub weighted_rms: f64,
    pub initial_weighted_rms: f64,
    /// Standard errors of the free parameters (and of `t42` when tied);
    /// `null` marks an unidentifiable parameter.
    #[serde(with = "stderr_map")]
    pub stderr: BTreeMap<ParamName, f64>,
    pub free_parameters: Vec<ParamName>,
    pub converged: bool,
    pub iterations: usize,
    pub tie_t42_to_t32: bool,
    pub track_residuals: Vec<TrackResidual>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn magnitude(&self, c: CouplingName) -> f64 {
        self.params.couplings.get(c).magnitude
    }

    pub fn bound_labels(&self) -> Vec<BranchLabel> {
        self.track_residuals.iter().map(|t| t.branch).collect()
    }

    /// Fitted branch position `s E(x) + delta_offset` along `xs`.
    pub fn branch_curve(&self, label: &BranchLabel, xs: &[f64]) -> Vec<[f64; 2]> {
        xs.iter()
            .filter_map(|&x| {
                Spectrum::compute(&self.params, x)
                    .energy(label, self.params.zeeman)
                    .map(|e| [x, self.s * e + self.delta_offset])
            })
            .collect()
    }
}

fn scatter_start(obj: &GlobalObjective, cfg: &FitConfig, k: usize) -> Vec<f64> {
    let mut x = obj.initial_point();
    if k == 0 {
        return x;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(k as u64));
    for (v, p) in x.iter_mut().zip(&obj.free) {
        if p.as_coupling().is_some() || p.as_offset().is_some() {
            *v *= 1.0 + rng.random_range(-cfg.restart_spread..=cfg.restart_spread);
        }
    }
    x
}

/// Fits the bound tracks with the eigenvalue branches of the model.
///
/// Non-convergence is reported in the result, not as an error.
pub fn fit_hamiltonian(tracks: &PeakTracks, cfg: &FitConfig) -> Result<FitResult> {
    let obj = GlobalObjective::new(tracks, cfg)?;
    let bounds = obj.bounds();
    let opts = cfg.lm_options();
    let runs = map_indexed(cfg.restarts + 1, cfg.execution, |k| {
        minimize(&obj, &scatter_start(&obj, cfg, k), &bounds, &opts)
    });
    let best = runs
        .into_iter()
        .reduce(|a, b| if b.cost < a.cost { b } else { a })
        .expect("at least one start");

    let cov = best.covariance(true);
    let se = cov.standard_errors();
    let mut stderr: BTreeMap<ParamName, f64> = obj.free.iter().copied().zip(se).collect();
    if cfg.tie_t42_to_t32 {
        let t32 = stderr.get(&ParamName::T32).copied().unwrap_or(0.0);
        stderr.insert(ParamName::T42, t32);
    }
    let state = obj.state(&best.params);
    let per_track = obj.track_residuals(&state);
    let all: Vec<f64> = per_track.iter().flatten().copied().collect();
    let residual_rms = (all.iter().map(|r| r * r).sum::<f64>() / all.len() as f64).sqrt();
    let m = obj.points.len() as f64;

    let mut warnings = obj.warnings.clone();
    if state.params.offsets.validate().is_err() {
        warnings.push("fitted right-dot offsets are not ordered r21 <= r31 <= r41".into());
    }
    Ok(FitResult {
        params: state.params,
        s: state.scale,
        delta_offset: state.delta_offset,
        sign_class: cfg.sign_class,
        residual_rms,
        weighted_rms: (2.0 * best.cost / m).sqrt(),
        initial_weighted_rms: (2.0 * obj.cost(&obj.initial_point()) / m).sqrt(),
        stderr,
        free_parameters: obj.free.clone(),
        converged: best.converged(),
        iterations: best.iterations,
        tie_t42_to_t32: cfg.tie_t42_to_t32,
        track_residuals: obj
            .track_ids
            .iter()
            .zip(&obj.labels)
            .zip(per_track)
            .map(|((id, label), residuals)| TrackResidual {
                track_id: id.clone(),
                branch: *label,
                residuals,
            })
            .collect(),
        warnings,
    })
}

/// Couplings left out of the sign-class percentage report.
pub const SIGN_REPORT_EXCLUDED: [CouplingName; 3] =
    [CouplingName::T31, CouplingName::T41, CouplingName::T42];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingDifference {
    pub coupling: CouplingName,
    pub class_a: f64,
    pub class_b: f64,
    /// `100 |a - b| / mean(a, b)`; zero when both vanish.
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignComparison {
    pub fit_a: FitResult,
    pub fit_b: FitResult,
    pub differences: Vec<CouplingDifference>,
}

impl SignComparison {
    /// Half the class-to-class spread of every coupling magnitude.
    pub fn systematic(&self) -> [f64; 8] {
        CouplingName::ALL.map(|c| 0.5 * (self.fit_a.magnitude(c) - self.fit_b.magnitude(c)).abs())
    }
}

pub fn percent_difference(a: f64, b: f64) -> f64 {
    let mean = 0.5 * (a + b);
    if mean == 0.0 {
        0.0
    } else {
        100.0 * (a - b).abs() / mean
    }
}

/// Fits once per sign-class representative and compares magnitudes.
pub fn compare_sign_classes(tracks: &PeakTracks, cfg: &FitConfig) -> Result<SignComparison> {
    let with = |class| FitConfig {
        sign_class: class,
        ..cfg.clone()
    };
    let (a, b) = join(
        cfg.execution,
        || fit_hamiltonian(tracks, &with(SignClass::A)),
        || fit_hamiltonian(tracks, &with(SignClass::B)),
    );
    let (fit_a, fit_b) = (a?, b?);
    let differences = CouplingName::ALL
        .into_iter()
        .filter(|c| !SIGN_REPORT_EXCLUDED.contains(c))
        .map(|c| {
            let (ma, mb) = (fit_a.magnitude(c), fit_b.magnitude(c));
            CouplingDifference {
                coupling: c,
                class_a: ma,
                class_b: mb,
                percent: percent_difference(ma, mb),
            }
        })
        .collect();
    Ok(SignComparison {
        fit_a,
        fit_b,
        differences,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingStats {
    pub coupling: CouplingName,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub std: f64,
}

/// Mean and sample standard deviation of each coupling over repeated fits.
pub fn estimate_scan_variability(results: &[FitResult]) -> Result<Vec<CouplingStats>> {
    if results.len() < 2 {
        return invalid("scan variability needs at least two fit results");
    }
    let mask = &results[0].free_parameters;
    if results.iter().any(|r| &r.free_parameters != mask) {
        return invalid("fit results have different free-parameter masks");
    }
    let n = results.len() as f64;
    Ok(CouplingName::ALL
        .into_iter()
        .map(|c| {
            let v: Vec<f64> = results.iter().map(|r| r.magnitude(c)).collect();
            let mean = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            CouplingStats {
                coupling: c,
                mean,
                std: var.sqrt(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetEntry {
    pub coupling: CouplingName,
    pub mean: f64,
    pub random_sigma: f64,
    pub systematic_sigma: f64,
    pub total_sigma: f64,
    pub reliable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    pub entries: Vec<BudgetEntry>,
}

/// Total-to-mean ratio above which a coupling is unreliable.
pub const MAX_RELATIVE_UNCERTAINTY: f64 = 0.5;

impl ErrorBudget {
    pub fn get(&self, c: CouplingName) -> Option<&BudgetEntry> {
        self.entries.iter().find(|e| e.coupling == c)
    }

    /// Entries fit for headline reporting.
    pub fn reliable(&self) -> impl Iterator<Item = &BudgetEntry> {
        self.entries.iter().filter(|e| e.reliable)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record([
            "coupling",
            "mean",
            "random_sigma",
            "systematic_sigma",
            "total_sigma",
            "reliable",
        ])?;
        for e in &self.entries {
            wtr.write_record([
                e.coupling.as_str().to_string(),
                e.mean.to_string(),
                e.random_sigma.to_string(),
                e.systematic_sigma.to_string(),
                e.total_sigma.to_string(),
                e.reliable.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| DaxsError::Format(e.to_string()))
    }
}

/// Combines scan-to-scan and sign-class uncertainties in quadrature.
///
/// `random` holds one entry per coupling in `CouplingName::ALL` order;
/// `systematic` and `covered` are indexed the same way.
pub fn build_error_budget(
    random: &[CouplingStats],
    systematic: &[f64; 8],
    covered: &[bool; 8],
) -> Result<ErrorBudget> {
    if random.len() != 8
        || random
            .iter()
            .zip(CouplingName::ALL)
            .any(|(r, c)| r.coupling != c)
    {
        return invalid("random uncertainties must list every coupling in canonical order");
    }
    let mut entries = Vec::with_capacity(8);
    for (k, r) in random.iter().enumerate() {
        let sys = systematic[k];
        if !(r.std >= 0.0 && sys >= 0.0) || !r.mean.is_finite() {
            return invalid(format!(
                "{}: uncertainties must be finite and >= 0",
                r.coupling
            ));
        }
        let total = r.std.hypot(sys);
        let relative_ok = r.mean > 0.0 && total / r.mean <= MAX_RELATIVE_UNCERTAINTY;
        entries.push(BudgetEntry {
            coupling: r.coupling,
            mean: r.mean,
            random_sigma: r.std,
            systematic_sigma: sys,
            total_sigma: total,
            reliable: relative_ok && covered[k],
        });
    }
    Ok(ErrorBudget { entries })
}

/// The two branches that meet at the anticrossing of `coupling`: those
/// with the largest weight on its left and right basis states.
pub fn anticrossing_branches(
    params: &ModelParams,
    coupling: CouplingName,
) -> (BranchLabel, BranchLabel) {
    let sector = coupling.sector();
    let lay = layout(sector);
    let eps = params.anticrossing_detuning(coupling);
    let (i, j, _) = *lay
        .couplings
        .iter()
        .find(|(_, _, n)| *n == coupling)
        .expect("coupling in its sector");
    let spectrum = Spectrum::compute(params, eps);
    let states = match sector {
        Sector::Triplet => &spectrum.triplet.states,
        Sector::Singlet => &spectrum.singlet.states,
    };
    let best = |basis: usize| {
        states
            .iter()
            .max_by(|a, b| a.weight_on(basis).total_cmp(&b.weight_on(basis)))
            .map(|s| s.label)
            .expect("non-empty sector")
    };
    (best(i), best(j))
}

/// Whether tracks sample both branches of each coupling's anticrossing
/// within `max(|t|, linewidth/2)` of its detuning.
pub fn anticrossing_coverage(
    params: &ModelParams,
    tracks: &PeakTracks,
    linewidth: f64,
) -> [bool; 8] {
    CouplingName::ALL.map(|c| {
        let eps = params.anticrossing_detuning(c);
        let reach = params.couplings.get(c).magnitude.max(0.5 * linewidth);
        let (a, b) = anticrossing_branches(params, c);
        let sampled = |label: BranchLabel| {
            tracks.tracks.iter().any(|t| {
                t.branch
                    .is_some_and(|l| l.sector == label.sector && l.index == label.index)
                    && t.points.iter().any(|p| (p.x - eps).abs() <= reach)
            })
        };
        sampled(a) && sampled(b)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LevelOffsets, TunnelCouplings};
    use crate::tracks::{PeakTrack, TrackPoint};

    fn truth() -> ModelParams {
        ModelParams {
            couplings: TunnelCouplings::from_magnitudes([6.0, 9.0, 5.0, 8.0, 7.0, 10.0, 4.0, 10.0]),
            offsets: LevelOffsets {
                l21: 60.0,
                r21: 20.0,
                r31: 40.0,
                r41: 80.0,
            },
            zeeman: 0.0,
        }
    }

    fn exact_tracks(params: &ModelParams, labels: &[BranchLabel], sigma: f64) -> PeakTracks {
        let xs: Vec<f64> = (0..121).map(|i| -80.0 + 1.5 * i as f64).collect();
        PeakTracks {
            tracks: labels
                .iter()
                .map(|l| PeakTrack {
                    track_id: l.to_string(),
                    branch: Some(*l),
                    points: xs
                        .iter()
                        .map(|&x| TrackPoint {
                            x,
                            delta: Spectrum::compute(params, x).energy(l, 0.0).unwrap(),
                            delta_sigma: sigma,
                            amplitude: 1.0,
                            width: 2.0,
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    fn all_labels() -> Vec<BranchLabel> {
        (0..4)
            .map(BranchLabel::triplet)
            .chain((0..7).map(BranchLabel::singlet))
            .collect()
    }

    #[test]
    fn param_names_round_trip() {
        for p in ParamName::ALL {
            assert_eq!(ParamName::parse(p.as_str()), Some(p));
            let json = serde_json::to_string(&p).unwrap();
            assert_eq!(json, format!("\"{}\"", p.as_str()));
        }
    }

    #[test]
    fn exact_start_stays_put() {
        let p = truth();
        let tracks = exact_tracks(&p, &all_labels(), 0.01);
        let fit = fit_hamiltonian(&tracks, &FitConfig::new(p)).unwrap();
        assert!(fit.converged);
        for c in CouplingName::ALL {
            assert!(
                (fit.magnitude(c) - p.couplings.get(c).magnitude).abs() < 1e-6,
                "{c}"
            );
        }
        assert!(fit.residual_rms < 1e-8);
    }

    #[test]
    fn tie_holds_exactly() {
        let p = truth();
        let tracks = exact_tracks(&p, &all_labels(), 0.01);
        let mut init = p;
        init.couplings.t32.magnitude *= 1.1;
        init.couplings.t42.magnitude = 3.0;
        let fit = fit_hamiltonian(&tracks, &FitConfig::new(init)).unwrap();
        assert_eq!(
            fit.params.couplings.t42.magnitude,
            fit.params.couplings.t32.magnitude
        );
        assert_eq!(fit.stderr[&ParamName::T42], fit.stderr[&ParamName::T32]);
    }

    #[test]
    fn analytic_jacobian_matches_differences() {
        let p = truth();
        let tracks = exact_tracks(&p, &all_labels(), 0.05);
        let mut cfg = FitConfig::new(p);
        cfg.scale = 1.02;
        let obj = GlobalObjective::new(&tracks, &cfg).unwrap();
        let x0: Vec<f64> = obj.initial_point().iter().map(|v| v * 1.07 + 0.3).collect();
        let ja = obj.jacobian(&x0);
        let mut jn = DMatrix::zeros(obj.points.len(), x0.len());
        crate::lsq::central_difference_jacobian(&obj, &x0, &vec![1e-6; x0.len()], &mut jn);
        let scale = ja.abs().max();
        assert!((ja - jn).abs().max() < 1e-6 * scale);
    }

    #[test]
    fn duplicate_binding_rejected() {
        let p = truth();
        let mut tracks = exact_tracks(&p, &[BranchLabel::triplet(0)], 0.01);
        let mut copy = tracks.tracks[0].clone();
        copy.track_id = "other".into();
        tracks.tracks.push(copy);
        assert!(fit_hamiltonian(&tracks, &FitConfig::new(p)).is_err());
    }

    #[test]
    fn spin_label_needs_field() {
        let p = truth();
        let mut tracks = exact_tracks(&p, &[BranchLabel::triplet(0)], 0.01);
        tracks.tracks[0].branch = Some(BranchLabel::triplet(0).with_spin(1));
        assert!(fit_hamiltonian(&tracks, &FitConfig::new(p)).is_err());
    }

    #[test]
    fn variability_arithmetic() {
        let p = truth();
        let tracks = exact_tracks(&p, &all_labels(), 0.01);
        let base = fit_hamiltonian(&tracks, &FitConfig::new(p)).unwrap();
        let mut a = base.clone();
        let mut b = base.clone();
        a.params.couplings.t11.magnitude = 10.0;
        b.params.couplings.t11.magnitude = 12.0;
        let stats = estimate_scan_variability(&[a.clone(), b]).unwrap();
        assert_eq!(stats[0].mean, 11.0);
        assert!((stats[0].std - 2f64.sqrt()).abs() < 1e-12);
        let same = estimate_scan_variability(&vec![base.clone(); 5]).unwrap();
        assert!(same.iter().all(|s| s.std == 0.0));
        assert!(estimate_scan_variability(&[a.clone()]).is_err());
        let mut masked = a.clone();
        masked.free_parameters.pop();
        assert!(estimate_scan_variability(&[a, masked]).is_err());
    }

    #[test]
    fn budget_quadrature_and_flags() {
        let stats: Vec<CouplingStats> = CouplingName::ALL
            .iter()
            .map(|&c| CouplingStats {
                coupling: c,
                mean: 20.0,
                std: 3.0,
            })
            .collect();
        let mut sys = [4.0; 8];
        sys[1] = 0.0;
        let mut covered = [true; 8];
        covered[2] = false;
        let b = build_error_budget(&stats, &sys, &covered).unwrap();
        assert_eq!(b.entries[0].total_sigma, 5.0);
        assert_eq!(b.entries[1].total_sigma, 3.0);
        assert!(b.entries[0].reliable);
        assert!(!b.entries[2].reliable);
        let mut noisy = stats.clone();
        noisy[3].std = 11.0;
        assert!(!build_error_budget(&noisy, &sys, &covered).unwrap().entries[3].reliable);
        sys[0] = -1.0;
        assert!(build_error_budget(&stats, &sys, &covered).is_err());
        let csv = b.to_csv().unwrap();
        assert!(csv.starts_with(
            "coupling,mean,random_sigma,systematic_sigma,total_sigma,reliable\nt11,20,3,4,5,true\n"
        ));
    }

    #[test]
    fn anticrossing_partners() {
        let p = truth();
        let (a, b) = anticrossing_branches(&p, CouplingName::T21);
        assert_eq!(a.sector, Sector::Triplet);
        assert_ne!(a, b);
    }

    #[test]
    fn result_json_marks_unidentifiable_as_null() {
        let p = truth();
        let tracks = exact_tracks(&p, &all_labels(), 0.01);
        let mut fit = fit_hamiltonian(&tracks, &FitConfig::new(p)).unwrap();
        fit.stderr.insert(ParamName::T41, f64::INFINITY);
        let text = fit.to_json().unwrap();
        assert!(text.contains("\"t41\": null"));
        let back = FitResult::from_json(&text).unwrap();
        assert_eq!(back.stderr[&ParamName::T41], f64::INFINITY);
        assert_eq!(back.params, fit.params);
    }
}
