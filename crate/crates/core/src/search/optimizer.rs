//! Random search and a native tree-structured Parzen estimator.
//!
//! Both samplers draw from one seeded stream; TPE's startup phase consumes it
//! exactly like random search, so the two agree trial-for-trial until the
//! model kicks in, and any run is a prefix of a longer run with the same seed.

use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::domain::{ParamDomain, ParamKind};
use crate::error::{Error, Result};
use crate::seed;

pub const TPE_STARTUP: usize = 10;
pub const TPE_GAMMA: f64 = 0.25;
pub const TPE_CANDIDATES: usize = 24;
const REJECTION_TRIES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Random,
    Tpe,
}

impl Optimizer {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Optimizer::Random),
            "tpe" => Ok(Optimizer::Tpe),
            _ => Err(Error::param(alloc::format!("unknown optimizer {s:?}"))),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Optimizer::Random => "random",
            Optimizer::Tpe => "tpe",
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// One evaluated point; failed evaluations carry `+∞`.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub point: Vec<f64>,
    pub value: f64,
}

/// Runs `budget` sequential evaluations of `f` and returns them in order.
///
/// `f` returns `Ok(None)` for a point it rejects; errors abort the run.
pub fn minimize<F>(domain: &ParamDomain, optimizer: Optimizer, budget: usize, seed: u64, mut f: F) -> Result<Vec<Observation>>
where
    F: FnMut(&[f64]) -> Result<Option<f64>>,
{
    if budget == 0 {
        return Err(Error::param("budget must be at least 1"));
    }
    let mut rng = seed::rng(seed);
    let mut history: Vec<Observation> = Vec::with_capacity(budget);
    for t in 0..budget {
        let point = match optimizer {
            Optimizer::Tpe if t >= TPE_STARTUP => tpe_suggest(domain, &history, &mut rng),
            _ => domain.sample_uniform(&mut rng),
        };
        let value = f(&point)?.unwrap_or(f64::INFINITY);
        history.push(Observation { point, value });
    }
    Ok(history)
}

/// Index of the first minimum, or `None` if every value is `+∞`.
pub fn best_index(history: &[Observation]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, o) in history.iter().enumerate() {
        if o.value.is_finite() && best.is_none_or(|b| o.value < history[b].value) {
            best = Some(i);
        }
    }
    best
}

/// Running minimum after each trial; `None` until something succeeds.
pub fn best_so_far(history: &[Observation]) -> Vec<Option<f64>> {
    let mut best: Option<f64> = None;
    history
        .iter()
        .map(|o| {
            if o.value.is_finite() && best.is_none_or(|b| o.value < b) {
                best = Some(o.value);
            }
            best
        })
        .collect()
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / core::f64::consts::SQRT_2)
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + libm::log(xs.iter().map(|x| libm::exp(x - m)).sum::<f64>())
}

/// Equal-weight mixture of Gaussians truncated to `[lo, hi]`.
struct Parzen<'a> {
    centers: &'a [f64],
    sigma: f64,
    lo: f64,
    hi: f64,
}

impl Parzen<'_> {
    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let mu = self.centers[rng.random_range(0..self.centers.len())];
        for _ in 0..REJECTION_TRIES {
            let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
            let v = mu + self.sigma * z;
            if (self.lo..=self.hi).contains(&v) {
                return v;
            }
        }
        mu.clamp(self.lo, self.hi)
    }

    fn log_density(&self, v: f64) -> f64 {
        let terms: Vec<f64> = self
            .centers
            .iter()
            .map(|&mu| {
                let z = (v - mu) / self.sigma;
                let mass = std_normal_cdf((self.hi - mu) / self.sigma) - std_normal_cdf((self.lo - mu) / self.sigma);
                -0.5 * z * z - libm::log(self.sigma * libm::sqrt(2.0 * core::f64::consts::PI) * mass.max(1e-300))
            })
            .collect();
        log_sum_exp(&terms) - libm::log(self.centers.len() as f64)
    }
}

fn bandwidth(width: f64, n: usize) -> f64 {
    width * (1.0 / libm::sqrt(n as f64)).max(0.1)
}

/// Integers are modelled on `[lo - 0.5, hi + 0.5]` and rounded afterwards.
fn continuous_bounds(kind: &ParamKind) -> (f64, f64) {
    match kind {
        ParamKind::Continuous { lo, hi } => (*lo, *hi),
        ParamKind::Integer { lo, hi } => (*lo as f64 - 0.5, *hi as f64 + 0.5),
        ParamKind::Categorical { .. } => unreachable!("categorical slots have no interval"),
    }
}

/// Draws one value of a slot from the good model and returns it with the log
/// density ratio `log g(v) - log b(v)` of the good and bad models.
fn suggest_slot<R: Rng>(kind: &ParamKind, good: &[f64], bad: &[f64], rng: &mut R) -> (f64, f64) {
    if let ParamKind::Categorical { choices } = kind {
        let probs = |set: &[f64]| -> Vec<f64> {
            let total = (set.len() + choices.len()) as f64;
            choices.iter().map(|c| (set.iter().filter(|v| *v == c).count() + 1) as f64 / total).collect()
        };
        let (pg, pb) = (probs(good), probs(bad));
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = choices.len() - 1;
        for (i, p) in pg.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        return (choices[pick], libm::log(pg[pick]) - libm::log(pb[pick]));
    }
    let (lo, hi) = continuous_bounds(kind);
    if hi <= lo {
        return (lo, 0.0);
    }
    let g = Parzen { centers: good, sigma: bandwidth(hi - lo, good.len()), lo, hi };
    let b = Parzen { centers: bad, sigma: bandwidth(hi - lo, bad.len()), lo, hi };
    let v = g.sample(rng);
    let ratio = g.log_density(v) - if bad.is_empty() { 0.0 } else { b.log_density(v) };
    match kind {
        ParamKind::Integer { lo, hi } => (libm::round(v).clamp(*lo as f64, *hi as f64), ratio),
        _ => (v, ratio),
    }
}

/// Splits the history at the `TPE_GAMMA` quantile and returns the candidate
/// with the best summed density ratio among `TPE_CANDIDATES` draws.
fn tpe_suggest<R: Rng>(domain: &ParamDomain, history: &[Observation], rng: &mut R) -> Vec<f64> {
    let mut order: Vec<usize> = (0..history.len()).collect();
    order.sort_by(|&a, &b| history[a].value.total_cmp(&history[b].value));
    let n_good = (libm::ceil(TPE_GAMMA * history.len() as f64) as usize).max(1);
    let (good_idx, bad_idx) = order.split_at(n_good.min(order.len()));
    let column = |idx: &[usize], k: usize| -> Vec<f64> { idx.iter().map(|&i| history[i].point[k]).collect() };
    let slots: Vec<(Vec<f64>, Vec<f64>)> =
        (0..domain.len()).map(|k| (column(good_idx, k), column(bad_idx, k))).collect();

    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..TPE_CANDIDATES {
        let mut score = 0.0;
        let point: Vec<f64> = domain
            .params()
            .iter()
            .zip(&slots)
            .map(|(p, (good, bad))| {
                let (v, r) = suggest_slot(&p.kind, good, bad, rng);
                score += r;
                v
            })
            .collect();
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, point));
        }
    }
    best.map(|(_, p)| p).unwrap_or_else(|| domain.sample_uniform(rng))
}
