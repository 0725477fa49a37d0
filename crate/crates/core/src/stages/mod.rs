//! The three shift stages and the seven composition families over them.
//!
//! Stages are always applied in the order acquisition shading (A), display
//! remapping (R), delivery degradation (D); a family selects a non-empty subset.

mod delivery;
mod remap;
mod shading;

use core::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

pub use delivery::{jpeg_roundtrip, resize_bilinear, stage_d, ThetaD};
pub use remap::{enforce_monotone, quantize_bits, stage_r, tone_curve, ThetaR};
pub use shading::{shading_field, stage_a, ThetaA};

/// A single stage, reported to observers of [`apply_family_observed`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    A,
    R,
    D,
}

/// Composition family, in canonical enumeration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Family {
    A,
    R,
    D,
    #[serde(rename = "AR")]
    AR,
    #[serde(rename = "RD")]
    RD,
    #[serde(rename = "AD")]
    AD,
    #[serde(rename = "ARD")]
    ARD,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::A,
        Family::R,
        Family::D,
        Family::AR,
        Family::RD,
        Family::AD,
        Family::ARD,
    ];

    pub fn uses_a(self) -> bool {
        matches!(self, Family::A | Family::AR | Family::AD | Family::ARD)
    }

    pub fn uses_r(self) -> bool {
        matches!(self, Family::R | Family::AR | Family::RD | Family::ARD)
    }

    pub fn uses_d(self) -> bool {
        matches!(self, Family::D | Family::RD | Family::AD | Family::ARD)
    }

    /// Position in the canonical enumeration, used for tie-breaking.
    pub fn index(self) -> usize {
        Family::ALL.iter().position(|&f| f == self).expect("family listed")
    }

    pub fn code(self) -> &'static str {
        match self {
            Family::A => "A",
            Family::R => "R",
            Family::D => "D",
            Family::AR => "AR",
            Family::RD => "RD",
            Family::AD => "AD",
            Family::ARD => "ARD",
        }
    }

    pub fn parse(code: &str) -> Result<Self> {
        let cleaned: alloc::string::String = code
            .chars()
            .filter(|c| !matches!(c, '∘' | '+' | ' ' | 'o' | '.' | '-'))
            .flat_map(char::to_uppercase)
            .collect();
        Family::ALL
            .iter()
            .copied()
            .find(|f| f.code() == cleaned)
            .ok_or_else(|| Error::param(alloc::format!("unknown family {code:?}")))
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Family::A => "A",
            Family::R => "R",
            Family::D => "D",
            Family::AR => "A∘R",
            Family::RD => "R∘D",
            Family::AD => "A∘D",
            Family::ARD => "A∘R∘D",
        };
        f.write_str(s)
    }
}

/// A family together with exactly the stage parameters it needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a: Option<ThetaA>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r: Option<ThetaR>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    d: Option<ThetaD>,
}

impl FamilySpec {
    pub fn new(family: Family, a: Option<ThetaA>, r: Option<ThetaR>, d: Option<ThetaD>) -> Result<Self> {
        let spec = Self { family, a, r, d };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.family;
        if f.uses_a() != self.a.is_some() || f.uses_r() != self.r.is_some() || f.uses_d() != self.d.is_some() {
            return Err(Error::param(alloc::format!(
                "family {f} requires exactly its own stage bundles"
            )));
        }
        if let Some(a) = &self.a {
            a.validate()?;
        }
        if let Some(r) = &self.r {
            r.validate()?;
        }
        if let Some(d) = &self.d {
            d.validate()?;
        }
        Ok(())
    }

    /// Parameters that make every stage of `family` as close to neutral as it gets.
    pub fn neutral(family: Family) -> Self {
        Self {
            family,
            a: family.uses_a().then(ThetaA::neutral),
            r: family.uses_r().then(ThetaR::neutral),
            d: family.uses_d().then(ThetaD::neutral),
        }
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn theta_a(&self) -> Option<&ThetaA> {
        self.a.as_ref()
    }

    pub fn theta_r(&self) -> Option<&ThetaR> {
        self.r.as_ref()
    }

    pub fn theta_d(&self) -> Option<&ThetaD> {
        self.d.as_ref()
    }
}

/// Applies the stages named by `spec` in canonical order.
pub fn apply_family(x: &ImageBuffer, spec: &FamilySpec) -> Result<ImageBuffer> {
    apply_family_observed(x, spec, &mut |_| {})
}

/// As [`apply_family`], reporting each stage to `observer` before it runs.
pub fn apply_family_observed(
    x: &ImageBuffer,
    spec: &FamilySpec,
    observer: &mut dyn FnMut(Stage),
) -> Result<ImageBuffer> {
    spec.validate()?;
    let mut current = x.clone();
    if let Some(a) = &spec.a {
        observer(Stage::A);
        current = stage_a(&current, a);
    }
    if let Some(r) = &spec.r {
        observer(Stage::R);
        current = stage_r(&current, r)?;
    }
    if let Some(d) = &spec.d {
        observer(Stage::D);
        current = stage_d(&current, d)?;
    }
    Ok(current)
}
