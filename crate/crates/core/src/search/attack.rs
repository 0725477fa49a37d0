use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::domain::{ParamDomain, ParamKind};
use super::optimizer::{best_index, best_so_far, minimize, Optimizer};
use crate::error::{Error, Result};
use crate::image::{roi_mask, ImageBuffer};
use crate::plausibility::Projector;
use crate::scoring::{Label, MarginModel, Modality};
use crate::seed;
use crate::stages::{apply_family, Family, FamilySpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Ok,
    Discarded,
    /// Every trial was discarded; the clean image stands in.
    NoCandidate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub spec: FamilySpec,
    /// Objective `J_adv`; `+∞` when discarded.
    pub objective: f64,
    pub alpha_star: f64,
    pub ssim_global: f64,
    pub ssim_roi: f64,
    pub status: TrialStatus,
}

/// One sample under attack: its clean statistics, label and scoring model.
pub struct AttackContext<'a> {
    projector: Projector,
    model: &'a dyn MarginModel,
    label: Label,
    tau: f64,
    j_clean: f64,
}

impl<'a> AttackContext<'a> {
    /// Extracts the ROI and evaluates `J_clean`.
    pub fn new(x: &ImageBuffer, label: Label, model: &'a dyn MarginModel, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::param(alloc::format!("threshold {tau} outside (0, 1]")));
        }
        let projector = Projector::new(x, roi_mask(x))?;
        let j_clean = model.signed_correctness(x, label)?;
        Ok(Self { projector, model, label, tau, j_clean })
    }

    pub fn j_clean(&self) -> f64 {
        self.j_clean
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn clean(&self) -> &ImageBuffer {
        self.projector.clean()
    }

    /// Shift, project, score. Stage failures discard the trial; scorer
    /// failures propagate.
    pub fn evaluate(&self, spec: &FamilySpec) -> Result<(Trial, Option<ImageBuffer>)> {
        let discarded = |spec: &FamilySpec| Trial {
            spec: spec.clone(),
            objective: f64::INFINITY,
            alpha_star: 0.0,
            ssim_global: f64::NAN,
            ssim_roi: f64::NAN,
            status: TrialStatus::Discarded,
        };
        let Ok(shift) = apply_family(self.clean(), spec) else {
            return Ok((discarded(spec), None));
        };
        let (adv, verdict) = self.projector.project(&shift, self.tau)?;
        let objective = self.model.signed_correctness(&adv, self.label)?;
        let trial = Trial {
            spec: spec.clone(),
            objective,
            alpha_star: verdict.alpha_star,
            ssim_global: verdict.ssim_global,
            ssim_roi: verdict.ssim_roi,
            status: TrialStatus::Ok,
        };
        Ok((trial, Some(adv)))
    }

    fn fallback(&self, family: Family) -> Trial {
        Trial {
            spec: FamilySpec::neutral(family),
            objective: self.j_clean,
            alpha_star: 0.0,
            ssim_global: 1.0,
            ssim_roi: 1.0,
            status: TrialStatus::NoCandidate,
        }
    }
}

/// Best trial of one within-family search, with its image and running trace.
#[derive(Debug, Clone)]
pub struct FamilySearch {
    pub best: Trial,
    pub image: ImageBuffer,
    pub trace: Vec<Option<f64>>,
    pub trials: usize,
}

/// Optimizes one family's parameters to minimize signed correctness.
pub fn search_family(
    ctx: &AttackContext<'_>,
    domain: &ParamDomain,
    optimizer: Optimizer,
    budget: usize,
    seed: u64,
) -> Result<FamilySearch> {
    let family = domain.family().ok_or_else(|| Error::param("attack domain is not tied to a family"))?;
    let mut trials: Vec<Trial> = Vec::with_capacity(budget);
    let mut best_image: Option<(f64, ImageBuffer)> = None;
    let history = minimize(domain, optimizer, budget, seed, |point| {
        let (trial, image) = match domain.decode(point) {
            Ok(spec) => ctx.evaluate(&spec)?,
            Err(_) => {
                trials.push(Trial { objective: f64::INFINITY, status: TrialStatus::Discarded, ..ctx.fallback(family) });
                return Ok(None);
            }
        };
        if let Some(image) = image {
            if best_image.as_ref().is_none_or(|(j, _)| trial.objective < *j) {
                best_image = Some((trial.objective, image));
            }
        }
        let value = (trial.status == TrialStatus::Ok).then_some(trial.objective);
        trials.push(trial);
        Ok(value)
    })?;
    let trace = best_so_far(&history);
    let (best, image) = match (best_index(&history), best_image) {
        (Some(i), Some((_, image))) => (trials.swap_remove(i), image),
        _ => (ctx.fallback(family), ctx.clean().clone()),
    };
    Ok(FamilySearch { best, image, trace, trials: budget })
}

/// Attack configuration shared by every sample of a campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSettings {
    pub tau: f64,
    pub optimizer: Optimizer,
    pub budget: usize,
    pub families: Vec<Family>,
    /// Range replacements applied to every family that has the named slot.
    #[serde(default)]
    pub overrides: Vec<(String, ParamKind)>,
    #[serde(default)]
    pub record_trace: bool,
}

impl AttackSettings {
    pub fn new(tau: f64, optimizer: Optimizer, budget: usize, families: &[Family]) -> Self {
        Self { tau, optimizer, budget, families: families.to_vec(), overrides: Vec::new(), record_trace: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::param(alloc::format!("threshold {} outside (0, 1]", self.tau)));
        }
        if self.budget == 0 {
            return Err(Error::param("budget must be at least 1"));
        }
        if self.families.is_empty() {
            return Err(Error::param("family subset is empty"));
        }
        for (name, _) in &self.overrides {
            let used = self.families.iter().any(|f| ParamDomain::for_family(*f).params().iter().any(|p| &p.name == name));
            if !used {
                return Err(Error::param(alloc::format!("override {name} matches no selected family")));
            }
        }
        for f in &self.families {
            self.domain(*f)?;
        }
        Ok(())
    }

    /// Families deduplicated and in canonical order.
    pub fn ordered_families(&self) -> Vec<Family> {
        Family::ALL.iter().copied().filter(|f| self.families.contains(f)).collect()
    }

    pub fn domain(&self, family: Family) -> Result<ParamDomain> {
        let mut d = ParamDomain::for_family(family);
        for (name, kind) in &self.overrides {
            if d.params().iter().any(|p| &p.name == name) {
                d = d.with_override(name, kind.clone())?;
            }
        }
        Ok(d)
    }
}

/// Per-family outcome kept alongside the winner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyResult {
    pub family: Family,
    pub j_adv: f64,
    pub alpha_star: f64,
    pub success: bool,
    pub status: TrialStatus,
    /// Best objective after each trial, when traces are recorded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<Modality>,
    pub label: Label,
    pub winner_family: Family,
    pub theta: FamilySpec,
    pub tau: f64,
    pub alpha_star: f64,
    pub ssim_global: f64,
    pub ssim_roi: f64,
    pub j_clean: f64,
    pub j_adv: f64,
    pub success: bool,
    pub status: TrialStatus,
    pub trials_per_family: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub per_family: Vec<FamilyResult>,
}

impl AttackRecord {
    pub fn clean_correct(&self) -> bool {
        self.j_clean > 0.0
    }

    pub fn adv_correct(&self) -> bool {
        self.j_adv > 0.0
    }

    pub fn family(&self, family: Family) -> Option<&FamilyResult> {
        self.per_family.iter().find(|r| r.family == family)
    }
}

/// Winning record plus the winning adversarial image.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub record: AttackRecord,
    pub adversarial: ImageBuffer,
}

fn flipped(j_clean: f64, j_adv: f64) -> bool {
    j_clean > 0.0 && j_adv < 0.0
}

/// Runs the optimizer once per family and keeps the family with the lowest
/// objective (ties go to the earlier family in canonical order).
///
/// Each family's search is seeded by `(seed, family)`, so a family's result
/// does not depend on which other families are in the subset.
pub fn attack_sample(
    sample_id: &str,
    x: &ImageBuffer,
    label: Label,
    model: &dyn MarginModel,
    settings: &AttackSettings,
    seed: u64,
) -> Result<AttackOutcome> {
    settings.validate()?;
    let ctx = AttackContext::new(x, label, model, settings.tau)?;
    let mut per_family = Vec::new();
    let mut winner: Option<FamilySearch> = None;
    for family in settings.ordered_families() {
        let domain = settings.domain(family)?;
        let run = search_family(&ctx, &domain, settings.optimizer, settings.budget, family_seed(seed, family))?;
        per_family.push(FamilyResult {
            family,
            j_adv: run.best.objective,
            alpha_star: run.best.alpha_star,
            success: flipped(ctx.j_clean, run.best.objective),
            status: run.best.status,
            trace: settings.record_trace.then(|| run.trace.clone()),
        });
        if winner.as_ref().is_none_or(|w| run.best.objective < w.best.objective) {
            winner = Some(run);
        }
    }
    let win = winner.ok_or_else(|| Error::param("family subset is empty"))?;
    let record = AttackRecord {
        sample_id: sample_id.into(),
        modality: None,
        label,
        winner_family: win.best.spec.family(),
        theta: win.best.spec.clone(),
        tau: settings.tau,
        alpha_star: win.best.alpha_star,
        ssim_global: win.best.ssim_global,
        ssim_roi: win.best.ssim_roi,
        j_clean: ctx.j_clean,
        j_adv: win.best.objective,
        success: flipped(ctx.j_clean, win.best.objective),
        status: win.best.status,
        trials_per_family: win.trials,
        optimizer: settings.optimizer,
        seed,
        per_family,
    };
    Ok(AttackOutcome { record, adversarial: win.image })
}

pub fn family_seed(seed: u64, family: Family) -> u64 {
    seed::derive(seed, 100 + family.index() as u64)
}
