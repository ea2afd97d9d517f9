//! The 15-level block Hamiltonian of the (1,3)-(0,4) double dot.
//!
//! The Hamiltonian is block diagonal with an 8x8 triplet block and a 7x7
//! singlet block that never couple. Basis order inside each block is
//!
//! ```text
//! triplet: L2V L2G L1V L1G R4V R4G R2V R2G
//! singlet: L2V L2G L1V L1G R3V R3G R1V
//! ```
//!
//! Left-dot states sit at `eps/2 + l`, right-dot states at `-eps/2 + r`.
//! With zero inter-dot valley phase the V and G valley copies never mix, so
//! each block splits further into valley sub-blocks. The two triplet
//! sub-blocks are identical and collapse to a single set of four branches.
//! The singlet G sub-block is the V sub-block with `R1V` removed, so by
//! Cauchy interlacing the sorted singlet branches alternate V, G, V, G, ...
//! and sorted labels never swap through a true crossing.

use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum Sign {
    #[default]
    Plus,
    Minus,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }

    pub fn flipped(self) -> Sign {
        match self {
            Sign::Plus => Sign::Minus,
            Sign::Minus => Sign::Plus,
        }
    }
}

/// A tunnel coupling stored as magnitude and sign.
///
/// Serialized as a signed decimal number; `-0.0` keeps its negative sign.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Coupling {
    pub magnitude: f64,
    pub sign: Sign,
}

impl Coupling {
    pub fn positive(magnitude: f64) -> Self {
        Coupling {
            magnitude,
            sign: Sign::Plus,
        }
    }

    pub fn from_signed(value: f64) -> Self {
        let sign = if value.is_sign_negative() {
            Sign::Minus
        } else {
            Sign::Plus
        };
        Coupling {
            magnitude: value.abs(),
            sign,
        }
    }

    pub fn value(&self) -> f64 {
        self.sign.value() * self.magnitude
    }
}

impl Serialize for Coupling {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for Coupling {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        f64::deserialize(d).map(Coupling::from_signed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sector {
    Singlet,
    Triplet,
}

impl fmt::Display for Sector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sector::Singlet => "singlet",
            Sector::Triplet => "triplet",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CouplingName {
    #[serde(rename = "t11")]
    T11,
    #[serde(rename = "t12")]
    T12,
    #[serde(rename = "t21")]
    T21,
    #[serde(rename = "t22")]
    T22,
    #[serde(rename = "t31")]
    T31,
    #[serde(rename = "t32")]
    T32,
    #[serde(rename = "t41")]
    T41,
    #[serde(rename = "t42")]
    T42,
}

impl CouplingName {
    pub const ALL: [CouplingName; 8] = [
        CouplingName::T11,
        CouplingName::T12,
        CouplingName::T21,
        CouplingName::T22,
        CouplingName::T31,
        CouplingName::T32,
        CouplingName::T41,
        CouplingName::T42,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CouplingName::T11 => "t11",
            CouplingName::T12 => "t12",
            CouplingName::T21 => "t21",
            CouplingName::T22 => "t22",
            CouplingName::T31 => "t31",
            CouplingName::T32 => "t32",
            CouplingName::T41 => "t41",
            CouplingName::T42 => "t42",
        }
    }

    pub fn parse(s: &str) -> Option<CouplingName> {
        CouplingName::ALL.into_iter().find(|c| c.as_str() == s)
    }

    /// R2 and R4 are triplets, R1 and R3 singlets.
    pub fn sector(self) -> Sector {
        match self.right_level() {
            2 | 4 => Sector::Triplet,
            _ => Sector::Singlet,
        }
    }

    /// Right-dot level `i` of `t_ij`.
    pub fn right_level(self) -> u8 {
        match self {
            CouplingName::T11 | CouplingName::T12 => 1,
            CouplingName::T21 | CouplingName::T22 => 2,
            CouplingName::T31 | CouplingName::T32 => 3,
            CouplingName::T41 | CouplingName::T42 => 4,
        }
    }

    /// Left-dot level `j` of `t_ij`.
    pub fn left_level(self) -> u8 {
        match self {
            CouplingName::T11 | CouplingName::T21 | CouplingName::T31 | CouplingName::T41 => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for CouplingName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TunnelCouplings {
    pub t11: Coupling,
    pub t12: Coupling,
    pub t21: Coupling,
    pub t22: Coupling,
    pub t31: Coupling,
    pub t32: Coupling,
    pub t41: Coupling,
    pub t42: Coupling,
}

impl TunnelCouplings {
    /// All-positive couplings from magnitudes in `CouplingName::ALL` order.
    pub fn from_magnitudes(m: [f64; 8]) -> Self {
        let mut out = TunnelCouplings::default();
        for (name, v) in CouplingName::ALL.into_iter().zip(m) {
            *out.get_mut(name) = Coupling::positive(v);
        }
        out
    }

    pub fn get(&self, name: CouplingName) -> Coupling {
        match name {
            CouplingName::T11 => self.t11,
            CouplingName::T12 => self.t12,
            CouplingName::T21 => self.t21,
            CouplingName::T22 => self.t22,
            CouplingName::T31 => self.t31,
            CouplingName::T32 => self.t32,
            CouplingName::T41 => self.t41,
            CouplingName::T42 => self.t42,
        }
    }

    pub fn get_mut(&mut self, name: CouplingName) -> &mut Coupling {
        match name {
            CouplingName::T11 => &mut self.t11,
            CouplingName::T12 => &mut self.t12,
            CouplingName::T21 => &mut self.t21,
            CouplingName::T22 => &mut self.t22,
            CouplingName::T31 => &mut self.t31,
            CouplingName::T32 => &mut self.t32,
            CouplingName::T41 => &mut self.t41,
            CouplingName::T42 => &mut self.t42,
        }
    }

    pub fn magnitudes(&self) -> [f64; 8] {
        CouplingName::ALL.map(|n| self.get(n).magnitude)
    }

    pub fn signs(&self) -> CouplingSigns {
        CouplingSigns(CouplingName::ALL.map(|n| self.get(n).sign))
    }

    pub fn with_signs(mut self, signs: &CouplingSigns) -> Self {
        for name in CouplingName::ALL {
            self.get_mut(name).sign = signs.get(name);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        for name in CouplingName::ALL {
            let m = self.get(name).magnitude;
            if !m.is_finite() || m < 0.0 {
                return invalid(format!("coupling {name} must be finite and >= 0, got {m}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OffsetName {
    #[serde(rename = "l21")]
    L21,
    #[serde(rename = "r21")]
    R21,
    #[serde(rename = "r31")]
    R31,
    #[serde(rename = "r41")]
    R41,
}

impl OffsetName {
    pub const ALL: [OffsetName; 4] = [
        OffsetName::L21,
        OffsetName::R21,
        OffsetName::R31,
        OffsetName::R41,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OffsetName::L21 => "l21",
            OffsetName::R21 => "r21",
            OffsetName::R31 => "r31",
            OffsetName::R41 => "r41",
        }
    }
}

/// Diagonal offsets relative to the L1 and R1 ground states.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LevelOffsets {
    pub l21: f64,
    pub r21: f64,
    pub r31: f64,
    pub r41: f64,
}

impl LevelOffsets {
    pub fn get(&self, name: OffsetName) -> f64 {
        match name {
            OffsetName::L21 => self.l21,
            OffsetName::R21 => self.r21,
            OffsetName::R31 => self.r31,
            OffsetName::R41 => self.r41,
        }
    }

    pub fn get_mut(&mut self, name: OffsetName) -> &mut f64 {
        match name {
            OffsetName::L21 => &mut self.l21,
            OffsetName::R21 => &mut self.r21,
            OffsetName::R31 => &mut self.r31,
            OffsetName::R41 => &mut self.r41,
        }
    }

    /// Offset of right-dot level `i` (R1 is the reference, 0).
    pub fn right(&self, level: u8) -> f64 {
        match level {
            1 => 0.0,
            2 => self.r21,
            3 => self.r31,
            _ => self.r41,
        }
    }

    /// Offset of left-dot level `j` (L1 is the reference, 0).
    pub fn left(&self, level: u8) -> f64 {
        if level == 1 {
            0.0
        } else {
            self.l21
        }
    }

    pub fn validate(&self) -> Result<()> {
        for name in OffsetName::ALL {
            let v = self.get(name);
            if !v.is_finite() || v < 0.0 {
                return invalid(format!(
                    "offset {} must be finite and >= 0, got {v}",
                    name.as_str()
                ));
            }
        }
        if !(self.r21 <= self.r31 && self.r31 <= self.r41) {
            return invalid(format!(
                "right-dot offsets must be ordered r21 <= r31 <= r41, got {} {} {}",
                self.r21, self.r31, self.r41
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelParams {
    pub couplings: TunnelCouplings,
    pub offsets: LevelOffsets,
    /// Zeeman energy applied to triplet branches only.
    #[serde(default)]
    pub zeeman: f64,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        self.couplings.validate()?;
        self.offsets.validate()?;
        if !self.zeeman.is_finite() || self.zeeman < 0.0 {
            return invalid(format!(
                "zeeman energy must be finite and >= 0, got {}",
                self.zeeman
            ));
        }
        Ok(())
    }

    /// Detuning at which the bare `L_j` and `R_i` levels of `t_ij` cross.
    pub fn anticrossing_detuning(&self, name: CouplingName) -> f64 {
        self.offsets.right(name.right_level()) - self.offsets.left(name.left_level())
    }
}

/// Label of one eigenvalue branch.
///
/// `index` is the ascending position within the sector after the two
/// identical triplet valley copies are collapsed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BranchLabel {
    pub sector: Sector,
    pub index: usize,
    #[serde(default)]
    pub spin_z: i8,
}

impl BranchLabel {
    pub fn singlet(index: usize) -> Self {
        BranchLabel {
            sector: Sector::Singlet,
            index,
            spin_z: 0,
        }
    }

    pub fn triplet(index: usize) -> Self {
        BranchLabel {
            sector: Sector::Triplet,
            index,
            spin_z: 0,
        }
    }

    pub fn with_spin(mut self, spin_z: i8) -> Self {
        self.spin_z = spin_z;
        self
    }

    /// Checks that the label names a branch this model produces.
    pub fn validate(&self) -> Result<()> {
        let count = branch_count(self.sector);
        if self.index >= count {
            return invalid(format!(
                "{self}: {} sector has only {count} branches",
                self.sector
            ));
        }
        match (self.sector, self.spin_z) {
            (Sector::Singlet, 0) | (Sector::Triplet, -1..=1) => Ok(()),
            _ => invalid(format!(
                "{self}: spin_z out of range for the {} sector",
                self.sector
            )),
        }
    }
}

impl fmt::Display for BranchLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.sector {
            Sector::Singlet => write!(f, "S{}", self.index),
            Sector::Triplet if self.spin_z == 0 => write!(f, "T{}", self.index),
            Sector::Triplet => write!(f, "T{}({:+})", self.index, self.spin_z),
        }
    }
}

/// Number of collapsed branches per sector.
pub fn branch_count(sector: Sector) -> usize {
    match sector {
        Sector::Triplet => 4,
        Sector::Singlet => 7,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BasisState {
    pub name: &'static str,
    /// Coefficient of detuning on the diagonal, +1/2 for left, -1/2 for right.
    pub eps_coeff: f64,
    pub offset: Option<OffsetName>,
}

const fn left(name: &'static str, offset: Option<OffsetName>) -> BasisState {
    BasisState {
        name,
        eps_coeff: 0.5,
        offset,
    }
}

const fn right(name: &'static str, offset: Option<OffsetName>) -> BasisState {
    BasisState {
        name,
        eps_coeff: -0.5,
        offset,
    }
}

/// Static description of one spin block.
#[derive(Debug)]
pub struct BlockLayout {
    pub sector: Sector,
    pub basis: &'static [BasisState],
    /// Upper-triangle positions of each coupling.
    pub couplings: &'static [(usize, usize, CouplingName)],
    /// Index sets of the uncoupled valley sub-blocks.
    pub valley_blocks: &'static [&'static [usize]],
    /// Whether the valley sub-blocks are identical copies.
    pub identical_copies: bool,
}

const TRIPLET_BASIS: [BasisState; 8] = [
    left("L2V", Some(OffsetName::L21)),
    left("L2G", Some(OffsetName::L21)),
    left("L1V", None),
    left("L1G", None),
    right("R4V", Some(OffsetName::R41)),
    right("R4G", Some(OffsetName::R41)),
    right("R2V", Some(OffsetName::R21)),
    right("R2G", Some(OffsetName::R21)),
];

const TRIPLET_COUPLINGS: [(usize, usize, CouplingName); 8] = [
    (0, 4, CouplingName::T42),
    (0, 6, CouplingName::T22),
    (1, 5, CouplingName::T42),
    (1, 7, CouplingName::T22),
    (2, 4, CouplingName::T41),
    (2, 6, CouplingName::T21),
    (3, 5, CouplingName::T41),
    (3, 7, CouplingName::T21),
];

const SINGLET_BASIS: [BasisState; 7] = [
    left("L2V", Some(OffsetName::L21)),
    left("L2G", Some(OffsetName::L21)),
    left("L1V", None),
    left("L1G", None),
    right("R3V", Some(OffsetName::R31)),
    right("R3G", Some(OffsetName::R31)),
    right("R1V", None),
];

const SINGLET_COUPLINGS: [(usize, usize, CouplingName); 6] = [
    (0, 4, CouplingName::T32),
    (0, 6, CouplingName::T12),
    (1, 5, CouplingName::T32),
    (2, 4, CouplingName::T31),
    (2, 6, CouplingName::T11),
    (3, 5, CouplingName::T31),
];

pub static TRIPLET_LAYOUT: BlockLayout = BlockLayout {
    sector: Sector::Triplet,
    basis: &TRIPLET_BASIS,
    couplings: &TRIPLET_COUPLINGS,
    valley_blocks: &[&[0, 2, 4, 6], &[1, 3, 5, 7]],
    identical_copies: true,
};

pub static SINGLET_LAYOUT: BlockLayout = BlockLayout {
    sector: Sector::Singlet,
    basis: &SINGLET_BASIS,
    couplings: &SINGLET_COUPLINGS,
    valley_blocks: &[&[0, 2, 4, 6], &[1, 3, 5]],
    identical_copies: false,
};

pub fn layout(sector: Sector) -> &'static BlockLayout {
    match sector {
        Sector::Triplet => &TRIPLET_LAYOUT,
        Sector::Singlet => &SINGLET_LAYOUT,
    }
}

impl BlockLayout {
    fn diagonal(&self, params: &ModelParams, eps: f64, i: usize) -> f64 {
        let state = &self.basis[i];
        state.eps_coeff * eps + state.offset.map_or(0.0, |o| params.offsets.get(o))
    }

    /// Matrix restricted to the basis indices in `indices`.
    fn sub_matrix(&self, params: &ModelParams, eps: f64, indices: &[usize]) -> DMatrix<f64> {
        let n = indices.len();
        let mut m = DMatrix::zeros(n, n);
        for (a, &i) in indices.iter().enumerate() {
            m[(a, a)] = self.diagonal(params, eps, i);
        }
        for &(i, j, name) in self.couplings {
            let (Some(a), Some(b)) = (
                indices.iter().position(|&k| k == i),
                indices.iter().position(|&k| k == j),
            ) else {
                continue;
            };
            let t = params.couplings.get(name).value();
            m[(a, b)] = t;
            m[(b, a)] = t;
        }
        m
    }

    pub fn full_matrix(&self, params: &ModelParams, eps: f64) -> DMatrix<f64> {
        let all: Vec<usize> = (0..self.basis.len()).collect();
        self.sub_matrix(params, eps, &all)
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if eps.is_finite() {
        Ok(())
    } else {
        invalid(format!("detuning must be finite, got {eps}"))
    }
}

/// The 8x8 triplet block at detuning `eps`.
pub fn build_triplet_block(params: &ModelParams, eps: f64) -> Result<DMatrix<f64>> {
    params.validate()?;
    check_eps(eps)?;
    Ok(TRIPLET_LAYOUT.full_matrix(params, eps))
}

/// The 7x7 singlet block at detuning `eps`.
pub fn build_singlet_block(params: &ModelParams, eps: f64) -> Result<DMatrix<f64>> {
    params.validate()?;
    check_eps(eps)?;
    Ok(SINGLET_LAYOUT.full_matrix(params, eps))
}

/// All 15 eigenvalues of the full block-diagonal Hamiltonian, ascending.
///
/// Diagonalizes the full 8x8 and 7x7 blocks directly, without using the
/// valley decomposition.
pub fn raw_eigenvalues(params: &ModelParams, eps: f64) -> Result<Vec<f64>> {
    let mut out: Vec<f64> = Vec::with_capacity(15);
    out.extend(
        build_triplet_block(params, eps)?
            .symmetric_eigenvalues()
            .iter(),
    );
    out.extend(
        build_singlet_block(params, eps)?
            .symmetric_eigenvalues()
            .iter(),
    );
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// One collapsed eigenstate, with the eigenvector kept for derivatives.
#[derive(Debug, Clone)]
pub struct BranchState {
    pub label: BranchLabel,
    /// Zero-field energy.
    pub energy: f64,
    /// Sector basis indices spanned by the eigenvector.
    pub support: &'static [usize],
    /// Eigenvector components over `support`.
    pub vector: Vec<f64>,
}

/// Derivatives of one branch energy.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EnergyGradient {
    /// With respect to each offset, in `OffsetName::ALL` order.
    pub offsets: [f64; 4],
    /// With respect to each coupling magnitude, in `CouplingName::ALL` order.
    pub couplings: [f64; 8],
    pub eps: f64,
}

impl BranchState {
    /// Hellmann-Feynman derivatives `<v| dH/dθ |v>`.
    pub fn gradient(&self, params: &ModelParams) -> EnergyGradient {
        let layout = layout(self.label.sector);
        let mut g = EnergyGradient::default();
        let amp = |global: usize| -> Option<f64> {
            self.support
                .iter()
                .position(|&k| k == global)
                .map(|a| self.vector[a])
        };
        for (a, &i) in self.support.iter().enumerate() {
            let w = self.vector[a] * self.vector[a];
            let state = &layout.basis[i];
            g.eps += state.eps_coeff * w;
            if let Some(o) = state.offset {
                g.offsets[o.index()] += w;
            }
        }
        for &(i, j, name) in layout.couplings {
            if let (Some(vi), Some(vj)) = (amp(i), amp(j)) {
                g.couplings[name.index()] +=
                    2.0 * vi * vj * params.couplings.get(name).sign.value();
            }
        }
        g
    }

    /// Squared weight of the eigenvector on one sector basis state.
    pub fn weight_on(&self, global: usize) -> f64 {
        self.support
            .iter()
            .position(|&k| k == global)
            .map_or(0.0, |a| self.vector[a] * self.vector[a])
    }

    fn dominant_basis(&self) -> usize {
        let (a, _) = self
            .vector
            .iter()
            .enumerate()
            .fold((0, -1.0), |best, (a, v)| {
                if v.abs() > best.1 {
                    (a, v.abs())
                } else {
                    best
                }
            });
        self.support[a]
    }
}

/// Collapsed, labeled eigenstates of one sector at zero field.
#[derive(Debug, Clone)]
pub struct SectorSpectrum {
    pub sector: Sector,
    pub states: Vec<BranchState>,
}

/// Diagonalizes one sector without validating `params`.
pub fn sector_spectrum(params: &ModelParams, eps: f64, sector: Sector) -> SectorSpectrum {
    let layout = layout(sector);
    let blocks = if layout.identical_copies {
        &layout.valley_blocks[..1]
    } else {
        layout.valley_blocks
    };
    let mut states = Vec::with_capacity(branch_count(sector));
    for &support in blocks {
        let eig = SymmetricEigen::new(layout.sub_matrix(params, eps, support));
        for k in 0..support.len() {
            states.push(BranchState {
                label: BranchLabel {
                    sector,
                    index: 0,
                    spin_z: 0,
                },
                energy: eig.eigenvalues[k],
                support,
                vector: eig.eigenvectors.column(k).iter().copied().collect(),
            });
        }
    }
    states.sort_by(|a, b| {
        a.energy
            .total_cmp(&b.energy)
            .then_with(|| a.dominant_basis().cmp(&b.dominant_basis()))
    });
    for (index, s) in states.iter_mut().enumerate() {
        s.label.index = index;
    }
    SectorSpectrum { sector, states }
}

/// Both sectors at one detuning, zero field.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub triplet: SectorSpectrum,
    pub singlet: SectorSpectrum,
}

impl Spectrum {
    pub fn compute(params: &ModelParams, eps: f64) -> Spectrum {
        Spectrum {
            triplet: sector_spectrum(params, eps, Sector::Triplet),
            singlet: sector_spectrum(params, eps, Sector::Singlet),
        }
    }

    pub fn state(&self, label: &BranchLabel) -> Option<&BranchState> {
        let sector = match label.sector {
            Sector::Triplet => &self.triplet,
            Sector::Singlet => &self.singlet,
        };
        sector.states.get(label.index)
    }

    /// Energy of a labeled branch including the Zeeman shift.
    pub fn energy(&self, label: &BranchLabel, zeeman: f64) -> Option<f64> {
        self.state(label)
            .map(|s| s.energy + zeeman_shift(label, zeeman))
    }
}

pub fn zeeman_shift(label: &BranchLabel, zeeman: f64) -> f64 {
    match label.sector {
        Sector::Triplet => f64::from(label.spin_z) * zeeman,
        Sector::Singlet => 0.0,
    }
}

/// Labeled branch energies at detuning `eps`.
///
/// Triplet branches come first. With a nonzero Zeeman energy each triplet
/// branch is replicated at `E - E_Z`, `E`, `E + E_Z` with `spin_z` -1, 0, +1.
pub fn eigen_branches(params: &ModelParams, eps: f64) -> Result<Vec<(BranchLabel, f64)>> {
    params.validate()?;
    check_eps(eps)?;
    Ok(branches_unchecked(params, eps))
}

pub(crate) fn branches_unchecked(params: &ModelParams, eps: f64) -> Vec<(BranchLabel, f64)> {
    let spectrum = Spectrum::compute(params, eps);
    let mut out = Vec::with_capacity(19);
    for s in &spectrum.triplet.states {
        if params.zeeman > 0.0 {
            for spin_z in [-1i8, 0, 1] {
                let label = s.label.with_spin(spin_z);
                out.push((label, s.energy + zeeman_shift(&label, params.zeeman)));
            }
        } else {
            out.push((s.label, s.energy));
        }
    }
    out.extend(spectrum.singlet.states.iter().map(|s| (s.label, s.energy)));
    out
}

/// Per-coupling signs in `CouplingName::ALL` order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CouplingSigns(pub [Sign; 8]);

impl Default for CouplingSigns {
    fn default() -> Self {
        CouplingSigns([Sign::Plus; 8])
    }
}

impl CouplingSigns {
    pub fn get(&self, name: CouplingName) -> Sign {
        self.0[name.index()]
    }

    pub fn set(&mut self, name: CouplingName, sign: Sign) {
        self.0[name.index()] = sign;
    }

    pub fn negative_count(&self, sector: Sector) -> usize {
        CouplingName::ALL
            .iter()
            .filter(|n| n.sector() == sector && self.get(**n) == Sign::Minus)
            .count()
    }
}

/// The two sign equivalence classes of the coupling signs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SignClass {
    /// Every sign positive.
    #[default]
    A,
    /// One negative triplet and one negative singlet coupling.
    B,
}

impl SignClass {
    pub fn representative(self) -> CouplingSigns {
        let [a, b] = sign_class_representatives();
        match self {
            SignClass::A => a,
            SignClass::B => b,
        }
    }

    /// Class of an arbitrary sign assignment. Flipping an even number of
    /// same-sector signs is a basis sign change, so only the parity of
    /// negative signs in each sector matters.
    pub fn classify(signs: &CouplingSigns) -> (bool, bool) {
        (
            signs.negative_count(Sector::Triplet) % 2 == 1,
            signs.negative_count(Sector::Singlet) % 2 == 1,
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SignClass::A => "a",
            SignClass::B => "b",
        }
    }
}

/// Representatives of the two sign classes: all positive, and `t21`, `t11`
/// negative.
pub fn sign_class_representatives() -> [CouplingSigns; 2] {
    let all_positive = CouplingSigns::default();
    let mut mixed = CouplingSigns::default();
    mixed.set(CouplingName::T21, Sign::Minus);
    mixed.set(CouplingName::T11, Sign::Minus);
    [all_positive, mixed]
}
