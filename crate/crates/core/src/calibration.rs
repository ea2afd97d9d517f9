//! Gate voltages to detuning and delta.
//!
//! Plunger voltages are first virtualized against each other, then scaled by
//! the diagonal lever arms into chemical potentials, then combined into
//! `eps = mu2 - mu1` and `delta = (mu1 + mu2) / 2`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, DaxsError, Result};

/// e/h expressed as GHz per meV, to six significant figures.
pub const GHZ_PER_MEV: f64 = 241.799;

/// GHz per µeV.
pub const GHZ_PER_UEV: f64 = GHZ_PER_MEV * 1e-3;

pub fn mev_to_ghz(mev: f64) -> f64 {
    mev * GHZ_PER_MEV
}

pub fn ghz_to_mev(ghz: f64) -> f64 {
    ghz / GHZ_PER_MEV
}

pub const LEVER_ARM_UNIT: &str = "ueV_per_mV";

/// Lever arms in µeV/mV. `a32` is gate 3 (P_R) acting on dot 2, and so on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeverArms {
    pub a22: f64,
    pub a32: f64,
    pub a23: f64,
    pub a33: f64,
}

#[derive(Serialize, Deserialize)]
struct LeverArmsFile {
    a22: f64,
    a32: f64,
    a23: f64,
    a33: f64,
    unit: String,
}

impl LeverArms {
    pub fn validate(&self) -> Result<()> {
        let all = [self.a22, self.a32, self.a23, self.a33];
        if all.iter().any(|v| !v.is_finite()) {
            return invalid("lever arms must be finite");
        }
        if self.a22 <= 0.0 || self.a33 <= 0.0 {
            return invalid("diagonal lever arms a22 and a33 must be > 0");
        }
        if self.a32 < 0.0 || self.a23 < 0.0 {
            return invalid("cross lever arms must be >= 0");
        }
        if self.a32 / self.a22 >= 1.0 || self.a23 / self.a33 >= 1.0 {
            return invalid("cross/diagonal lever arm ratios must be < 1");
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<LeverArms> {
        let file: LeverArmsFile = serde_json::from_str(text)?;
        if file.unit != LEVER_ARM_UNIT {
            return Err(DaxsError::Format(format!(
                "lever arm unit must be \"{LEVER_ARM_UNIT}\", got \"{}\"",
                file.unit
            )));
        }
        let arms = LeverArms {
            a22: file.a22,
            a32: file.a32,
            a23: file.a23,
            a33: file.a33,
        };
        arms.validate()?;
        Ok(arms)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = LeverArmsFile {
            a22: self.a22,
            a32: self.a32,
            a23: self.a23,
            a33: self.a33,
            unit: LEVER_ARM_UNIT.to_string(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }
}

/// Virtual plunger voltages `(P_Lv, P_Rv)` in mV.
pub fn virtualize(pl: f64, pr: f64, arms: &LeverArms) -> Result<(f64, f64)> {
    arms.validate()?;
    Ok((pl + arms.a32 / arms.a22 * pr, pr + arms.a23 / arms.a33 * pl))
}

/// Inverse of [`virtualize`].
pub fn devirtualize(plv: f64, prv: f64, arms: &LeverArms) -> Result<(f64, f64)> {
    arms.validate()?;
    let rl = arms.a32 / arms.a22;
    let rr = arms.a23 / arms.a33;
    let det = 1.0 - rl * rr;
    Ok(((plv - rl * prv) / det, (prv - rr * plv) / det))
}

/// Chemical potentials `(mu1, mu2)` in GHz from virtual voltages.
pub fn chemical_potentials(plv: f64, prv: f64, arms: &LeverArms) -> Result<(f64, f64)> {
    arms.validate()?;
    Ok((arms.a22 * plv * GHZ_PER_UEV, arms.a33 * prv * GHZ_PER_UEV))
}

/// `(eps, delta)` in GHz from chemical potentials.
pub fn detuning_delta(mu1: f64, mu2: f64) -> (f64, f64) {
    (mu2 - mu1, 0.5 * (mu1 + mu2))
}

/// `(mu1, mu2)` from `(eps, delta)`.
pub fn potentials_from_axes(eps: f64, delta: f64) -> (f64, f64) {
    (delta - 0.5 * eps, delta + 0.5 * eps)
}

/// `(eps, delta)` in GHz from virtual plunger voltages.
pub fn to_energy_axes(plv: f64, prv: f64, arms: &LeverArms) -> Result<(f64, f64)> {
    let (mu1, mu2) = chemical_potentials(plv, prv, arms)?;
    Ok(detuning_delta(mu1, mu2))
}

/// Virtual plunger voltages that produce `(eps, delta)`.
pub fn from_energy_axes(eps: f64, delta: f64, arms: &LeverArms) -> Result<(f64, f64)> {
    arms.validate()?;
    let (mu1, mu2) = potentials_from_axes(eps, delta);
    Ok((
        mu1 / (arms.a22 * GHZ_PER_UEV),
        mu2 / (arms.a33 * GHZ_PER_UEV),
    ))
}
