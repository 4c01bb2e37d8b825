//! Single-cell membrane physiology: ionic model, active tension, pacing.
//!
//! The ionic model is a stiff 19-state human ventricular cell (fast sodium,
//! L-type calcium with subspace calcium-induced calcium release, transient
//! outward, rapid and slow delayed rectifiers, inward rectifier, exchanger
//! and pump currents, dynamic intracellular Na/K/Ca). Voltage and
//! concentrations advance by forward Euler with automatic substepping during
//! the upstroke; gates advance by exact exponential (Rush-Larsen) steps, so
//! they can never leave `[0, 1]`.
//!
//! Parameter variants come in two axes: a restitution-slope family (three
//! parameter sets engineered for nominal maximum restitution slopes of 1.1,
//! 1.4 and 1.8) and a tissue condition (normal, or failing myocardium with
//! remodelled potassium currents, pump, exchanger and SR uptake). Tissue
//! simulations pair the cell model with a voltage-indexed [`RateTable`] that
//! replaces per-node transcendental evaluations with table interpolation.

mod ionic;
mod protocol;
mod tables;
mod tension;

pub use ionic::{advance, currents, CellState, Currents, IonParams, DV_SUBSTEP, N_VGATES};
pub use protocol::{
    beat_trace, dynamic_restitution, max_restitution_slope, pace_cell, standard_cl_ladder,
    BeatSummary, RestitutionPoint, ACTIVATION_THRESHOLD, MIN_DI_SPACING, STIM_AMPLITUDE,
    STIM_DURATION,
};
pub use tables::RateTable;
pub use tension::{advance_tension, TensionParams};

use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Errors from cell-level configuration and protocols.
#[derive(Debug, Error)]
pub enum CellError {
    #[error("unknown cell variant '{0}' (expected e.g. 'control-1.1' or 'hf-1.8')")]
    UnknownVariant(String),
    #[error("bad parameter: {0}")]
    BadParameter(String),
}

/// Tissue condition: normal myocardium or heart-failure remodelling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tissue {
    Control,
    Failing,
}

impl Tissue {
    pub fn label(self) -> &'static str {
        match self {
            Tissue::Control => "control",
            Tissue::Failing => "hf",
        }
    }
}

/// Restitution-slope parameter family, named by its nominal design slope.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlopeFamily {
    Slope11,
    Slope14,
    Slope18,
}

impl SlopeFamily {
    pub fn label(self) -> &'static str {
        match self {
            SlopeFamily::Slope11 => "1.1",
            SlopeFamily::Slope14 => "1.4",
            SlopeFamily::Slope18 => "1.8",
        }
    }

    pub const ALL: [SlopeFamily; 3] = [
        SlopeFamily::Slope11,
        SlopeFamily::Slope14,
        SlopeFamily::Slope18,
    ];
}

/// A complete cell parameterisation: slope family plus tissue condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub tissue: Tissue,
    pub slope: SlopeFamily,
}

impl Variant {
    pub fn params(&self) -> IonParams {
        IonParams::for_variant(*self)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.tissue.label(), self.slope.label())
    }
}

impl FromStr for Variant {
    type Err = CellError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (tissue, slope) = s
            .split_once('-')
            .ok_or_else(|| CellError::UnknownVariant(s.to_string()))?;
        let tissue = match tissue {
            "control" => Tissue::Control,
            "hf" => Tissue::Failing,
            _ => return Err(CellError::UnknownVariant(s.to_string())),
        };
        let slope = match slope {
            "1.1" => SlopeFamily::Slope11,
            "1.4" => SlopeFamily::Slope14,
            "1.8" => SlopeFamily::Slope18,
            _ => return Err(CellError::UnknownVariant(s.to_string())),
        };
        Ok(Variant { tissue, slope })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_strings_round_trip() {
        for tissue in [Tissue::Control, Tissue::Failing] {
            for slope in SlopeFamily::ALL {
                let v = Variant { tissue, slope };
                let s = v.to_string();
                let back: Variant = s.parse().unwrap();
                assert_eq!(back, v);
            }
        }
    }

    #[test]
    fn junk_variants_are_rejected() {
        for junk in ["", "control", "control-2.0", "sick-1.1", "control_1.1"] {
            assert!(junk.parse::<Variant>().is_err(), "{junk} should fail");
        }
    }
}
