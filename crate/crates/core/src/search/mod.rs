//! Constrained black-box search over shift parameters, winner-family
//! selection, and campaign metrics.

mod attack;
mod domain;
mod optimizer;

use alloc::vec::Vec;

pub use attack::{
    attack_sample, family_seed, search_family, AttackContext, AttackOutcome, AttackRecord, AttackSettings,
    FamilyResult, FamilySearch, Trial, TrialStatus,
};
pub use domain::{Param, ParamDomain, ParamKind, A_PARAMS, D_PARAMS, R_PARAMS};
pub use optimizer::{
    best_index, best_so_far, minimize, Observation, Optimizer, TPE_CANDIDATES, TPE_GAMMA, TPE_STARTUP,
};

use crate::stages::Family;

/// Default trials per family.
pub const DEFAULT_BUDGET: usize = 50;

/// Percentage of clean-correct samples that flip; `family` restricts the
/// numerator to that family's own best result. `None` when no sample is
/// clean-correct.
pub fn success_rate(records: &[AttackRecord], family: Option<Family>) -> Option<f64> {
    let eligible: Vec<&AttackRecord> = records.iter().filter(|r| r.clean_correct()).collect();
    if eligible.is_empty() {
        return None;
    }
    let flips = eligible
        .iter()
        .filter(|r| match family {
            None => r.success,
            Some(f) => r.family(f).is_some_and(|fr| fr.success),
        })
        .count();
    Some(100.0 * flips as f64 / eligible.len() as f64)
}

fn fraction(records: &[AttackRecord], correct: impl Fn(&AttackRecord) -> bool) -> Option<f64> {
    if records.is_empty() {
        return None;
    }
    Some(records.iter().filter(|r| correct(r)).count() as f64 / records.len() as f64)
}

/// Fraction of samples with `J_clean > 0`.
pub fn clean_accuracy(records: &[AttackRecord]) -> Option<f64> {
    fraction(records, AttackRecord::clean_correct)
}

/// Fraction of samples with `J_adv > 0` for the winning family.
pub fn shifted_accuracy(records: &[AttackRecord]) -> Option<f64> {
    fraction(records, AttackRecord::adv_correct)
}

/// Shifted accuracy had the campaign run `family` alone.
///
/// Family searches are seeded per family, so this equals the accuracy of a
/// separate single-family campaign with the same seeds.
pub fn family_accuracy(records: &[AttackRecord], family: Family) -> Option<f64> {
    if records.iter().any(|r| r.family(family).is_none()) {
        return None;
    }
    fraction(records, |r| r.family(family).is_some_and(|fr| fr.j_adv > 0.0))
}

/// Success rate (percent) after the first `budget` trials, from recorded
/// traces; the winner at that budget is the best family so far.
pub fn success_rate_at_budget(records: &[AttackRecord], budget: usize) -> Option<f64> {
    let eligible: Vec<&AttackRecord> = records.iter().filter(|r| r.clean_correct()).collect();
    if eligible.is_empty() || budget == 0 {
        return None;
    }
    let mut flips = 0;
    for r in &eligible {
        let mut best = f64::INFINITY;
        for fr in &r.per_family {
            let trace = fr.trace.as_ref()?;
            if let Some(Some(j)) = trace.get(budget.min(trace.len()) - 1) {
                best = best.min(*j);
            }
        }
        flips += usize::from(best < 0.0);
    }
    Some(100.0 * flips as f64 / eligible.len() as f64)
}
