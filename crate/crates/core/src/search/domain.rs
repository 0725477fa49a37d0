use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stages::{Family, FamilySpec, ThetaA, ThetaD, ThetaR};

/// Admissible values of one parameter slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ParamKind {
    Continuous { lo: f64, hi: f64 },
    Integer { lo: i64, hi: i64 },
    Categorical { choices: Vec<f64> },
}

impl ParamKind {
    fn validate(&self, name: &str) -> Result<()> {
        let ok = match self {
            ParamKind::Continuous { lo, hi } => lo.is_finite() && hi.is_finite() && lo <= hi,
            ParamKind::Integer { lo, hi } => lo <= hi,
            ParamKind::Categorical { choices } => !choices.is_empty() && choices.iter().all(|c| c.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::param(format!("empty or non-finite domain for {name}")))
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        match self {
            ParamKind::Continuous { lo, hi } => (*lo..=*hi).contains(&v),
            ParamKind::Integer { lo, hi } => v == libm::round(v) && (*lo as f64..=*hi as f64).contains(&v),
            ParamKind::Categorical { choices } => choices.contains(&v),
        }
    }

    pub(crate) fn sample_uniform<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            ParamKind::Continuous { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            ParamKind::Integer { lo, hi } => rng.random_range(*lo..=*hi) as f64,
            ParamKind::Categorical { choices } => choices[rng.random_range(0..choices.len())],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    #[serde(flatten)]
    pub kind: ParamKind,
}

/// Parameter slots of one family, concatenated in stage order A, R, D.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDomain {
    /// `None` for domains of plain objectives that do not decode to stages.
    family: Option<Family>,
    params: Vec<Param>,
}

fn cont(name: &str, lo: f64, hi: f64) -> Param {
    Param { name: name.into(), kind: ParamKind::Continuous { lo, hi } }
}

fn int(name: &str, lo: i64, hi: i64) -> Param {
    Param { name: name.into(), kind: ParamKind::Integer { lo, hi } }
}

pub const A_PARAMS: [&str; 6] = ["a.gain", "a.center_x", "a.center_y", "a.rotation", "a.anisotropy", "a.falloff"];
pub const R_PARAMS: [&str; 7] =
    ["r.center_offset", "r.width_scale", "r.tone25", "r.tone50", "r.tone75", "r.gamma", "r.bit_depth"];
pub const D_PARAMS: [&str; 2] = ["d.resize", "d.quality"];

impl ParamDomain {
    /// Default search ranges for `family`.
    pub fn for_family(family: Family) -> Self {
        let mut params = Vec::new();
        if family.uses_a() {
            params.extend([
                cont("a.gain", -0.4, 0.4),
                cont("a.center_x", -0.35, 0.35),
                cont("a.center_y", -0.35, 0.35),
                cont("a.rotation", -core::f64::consts::PI, core::f64::consts::PI),
                cont("a.anisotropy", 0.5, 2.0),
                cont("a.falloff", 1.0, 3.0),
            ]);
        }
        if family.uses_r() {
            params.extend([
                cont("r.center_offset", -0.25, 0.25),
                cont("r.width_scale", 0.5, 1.5),
                cont("r.tone25", 0.05, 0.45),
                cont("r.tone50", 0.25, 0.75),
                cont("r.tone75", 0.55, 0.95),
                cont("r.gamma", 0.5, 2.0),
                int("r.bit_depth", 3, 8),
            ]);
        }
        if family.uses_d() {
            params.extend([cont("d.resize", 0.3, 1.0), int("d.quality", 10, 95)]);
        }
        Self { family: Some(family), params }
    }

    /// A domain for an arbitrary objective, not tied to image stages.
    pub fn custom(params: Vec<Param>) -> Result<Self> {
        for p in &params {
            p.kind.validate(&p.name)?;
        }
        Ok(Self { family: None, params })
    }

    #[cfg(test)]
    pub(crate) fn unchecked(family: Family, params: Vec<Param>) -> Self {
        Self { family: Some(family), params }
    }

    /// Replaces the range of the slot called `name`; unknown names are an error.
    pub fn with_override(mut self, name: &str, kind: ParamKind) -> Result<Self> {
        kind.validate(name)?;
        let slot = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::param(format!("domain has no parameter {name}")))?;
        slot.kind = kind;
        self.check_stage_bounds()?;
        Ok(self)
    }

    /// Every corner of the domain must decode to valid stage parameters.
    fn check_stage_bounds(&self) -> Result<()> {
        let mut lo = Vec::with_capacity(self.params.len());
        let mut hi = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let (a, b) = match &p.kind {
                ParamKind::Continuous { lo, hi } => (*lo, *hi),
                ParamKind::Integer { lo, hi } => (*lo as f64, *hi as f64),
                ParamKind::Categorical { choices } => choices
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &c| (a.min(c), b.max(c))),
            };
            lo.push(a);
            hi.push(b);
        }
        if self.family.is_some() {
            self.decode(&lo)?;
            self.decode(&hi)?;
        }
        Ok(())
    }

    pub fn family(&self) -> Option<Family> {
        self.family
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        point.len() == self.params.len() && self.params.iter().zip(point).all(|(p, &v)| p.kind.contains(v))
    }

    pub(crate) fn sample_uniform<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.params.iter().map(|p| p.kind.sample_uniform(rng)).collect()
    }

    /// Maps a point to stage parameters.
    pub fn decode(&self, point: &[f64]) -> Result<FamilySpec> {
        if point.len() != self.params.len() {
            return Err(Error::mismatch(self.params.len(), point.len()));
        }
        let family = self.family.ok_or_else(|| Error::param("domain is not tied to a family"))?;
        let mut it = point.iter().copied();
        let mut next = || it.next().unwrap_or(f64::NAN);
        let a = family.uses_a().then(|| ThetaA {
            gain: next(),
            center_x: next(),
            center_y: next(),
            rotation: next(),
            anisotropy: next(),
            falloff: next(),
        });
        let r = family.uses_r().then(|| {
            let (center_offset, width_scale) = (next(), next());
            let tone = (next(), next(), next());
            let gamma = next();
            ThetaR { center_offset, width_scale, tone, gamma, bit_depth: small_int(next(), 1, 16) }
        });
        let d = family.uses_d().then(|| {
            let resize = next();
            ThetaD { resize, quality: small_int(next(), 1, 100) }
        });
        FamilySpec::new(family, a, r, d)
    }

    /// Inverse of [`decode`](Self::decode) for specs of this family.
    pub fn encode(&self, spec: &FamilySpec) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.params.len());
        if let Some(a) = spec.theta_a() {
            out.extend([a.gain, a.center_x, a.center_y, a.rotation, a.anisotropy, a.falloff]);
        }
        if let Some(r) = spec.theta_r() {
            out.extend([r.center_offset, r.width_scale, r.tone.0, r.tone.1, r.tone.2, r.gamma, r.bit_depth as f64]);
        }
        if let Some(d) = spec.theta_d() {
            out.extend([d.resize, d.quality as f64]);
        }
        out
    }
}

/// Out-of-range integers map to 0, which stage validation then rejects.
fn small_int(v: f64, lo: u8, hi: u8) -> u8 {
    let r = libm::round(v);
    if r >= lo as f64 && r <= hi as f64 {
        r as u8
    } else {
        0
    }
}
