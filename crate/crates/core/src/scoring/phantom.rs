//! Synthetic labelled phantoms standing in for curated clinical images.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Label;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::seed;

pub const PHANTOM_SIZE: usize = 128;
const NOISE_SIGMA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "mri-like")]
    MriLike,
    #[serde(rename = "xray-like")]
    XrayLike,
    #[serde(rename = "ct-like")]
    CtLike,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::MriLike, Modality::XrayLike, Modality::CtLike];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::MriLike => "mri-like",
            Modality::XrayLike => "xray-like",
            Modality::CtLike => "ct-like",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        Modality::ALL
            .iter()
            .copied()
            .find(|m| m.tag() == tag)
            .ok_or_else(|| Error::param(format!("unknown modality {tag:?}")))
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Gaussian lesion bump; `radius` is twice the Gaussian sigma.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub row: f64,
    pub col: f64,
    pub radius: f64,
    pub contrast: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSample {
    pub id: String,
    pub image: ImageBuffer,
    pub label: Label,
    pub seed: u64,
    pub modality: Modality,
    pub lesion: Option<Lesion>,
}

fn sq(v: f64) -> f64 {
    v * v
}

/// Logistic step, `1` inside (`x < 0`) and `0` outside.
fn inside(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(x))
}

fn bump(dy: f64, dx: f64, sigma: f64) -> f64 {
    libm::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))
}

struct Blob {
    row: f64,
    col: f64,
    sigma: f64,
    amp: f64,
}

fn blobs<R: Rng>(rng: &mut R, count: usize, spread: f64, sigma: (f64, f64), amp: (f64, f64)) -> Vec<Blob> {
    let c = PHANTOM_SIZE as f64 / 2.0;
    (0..count)
        .map(|_| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            Blob {
                row: c + rng.random_range(-spread..spread),
                col: c + rng.random_range(-spread..spread),
                sigma: rng.random_range(sigma.0..sigma.1),
                amp: sign * rng.random_range(amp.0..amp.1),
            }
        })
        .collect()
}

fn texture(blobs: &[Blob], i: f64, j: f64) -> f64 {
    blobs.iter().map(|b| b.amp * bump(i - b.row, j - b.col, b.sigma)).sum()
}

/// Smooth, lesion-free anatomy for `modality`.
fn background<R: Rng>(rng: &mut R, modality: Modality) -> Vec<f64> {
    let n = PHANTOM_SIZE;
    let c = n as f64 / 2.0;
    let mut out = Vec::with_capacity(n * n);
    match modality {
        Modality::MriLike => {
            let (oy, ox) = (rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
            let (ax, ay) = (rng.random_range(42.0..48.0), rng.random_range(50.0..56.0));
            let tissue = rng.random_range(0.40..0.46);
            let tex = blobs(rng, 4, 25.0, (12.0, 24.0), (0.02, 0.06));
            for i in 0..n {
                for j in 0..n {
                    let (y, x) = (i as f64, j as f64);
                    let rho = libm::sqrt(sq((x - c - ox) / ax) + sq((y - c - oy) / ay));
                    let head = inside((rho - 1.0) * ax / 6.0);
                    out.push(0.04 + head * (tissue + texture(&tex, y, x)));
                }
            }
        }
        Modality::XrayLike => {
            let base = rng.random_range(0.50..0.56);
            let lung_row = c + rng.random_range(-4.0..4.0);
            let left = 38.0 + rng.random_range(-3.0..3.0);
            let right = 90.0 + rng.random_range(-3.0..3.0);
            let (lx, ly) = (rng.random_range(18.0..22.0), rng.random_range(37.0..43.0));
            let depth = rng.random_range(0.18..0.24);
            let tex = blobs(rng, 3, 30.0, (14.0, 26.0), (0.02, 0.05));
            for i in 0..n {
                for j in 0..n {
                    let (y, x) = (i as f64, j as f64);
                    let lung = |cx: f64| {
                        let rho = libm::sqrt(sq((x - cx) / lx) + sq((y - lung_row) / ly));
                        inside((rho - 1.0) * lx / 8.0)
                    };
                    let spine = 0.08 * bump(0.0, x - c, 6.0);
                    let v = base + 0.08 * y / n as f64 - depth * (lung(left) + lung(right)) + spine;
                    out.push(v + texture(&tex, y, x));
                }
            }
        }
        Modality::CtLike => {
            let (ax, ay) = (rng.random_range(50.0..56.0), rng.random_range(40.0..46.0));
            let soft = rng.random_range(0.36..0.42);
            let organs = blobs(rng, 3, 22.0, (10.0, 18.0), (0.04, 0.10));
            for i in 0..n {
                for j in 0..n {
                    let (y, x) = (i as f64, j as f64);
                    let rho = libm::sqrt(sq((x - c) / ax) + sq((y - c) / ay));
                    let body = inside((rho - 1.0) * ay / 5.0);
                    out.push(0.03 + body * (soft + texture(&organs, y, x)));
                }
            }
        }
    }
    out
}

/// Renders one phantom. Background, lesion placement and noise use separate
/// streams of `seed`, so the lesion-free twin differs only by the lesion.
pub fn render_phantom(seed: u64, modality: Modality, with_lesion: bool) -> (ImageBuffer, Option<Lesion>) {
    let n = PHANTOM_SIZE;
    let mut data = background(&mut seed::rng(seed::derive(seed, 1)), modality);

    let mut lesion_rng = seed::rng(seed::derive(seed, 2));
    let c = n as f64 / 2.0;
    let angle = lesion_rng.random_range(0.0..core::f64::consts::TAU);
    let dist = 28.0 * libm::sqrt(lesion_rng.random::<f64>());
    let lesion = Lesion {
        row: c + dist * libm::sin(angle),
        col: c + dist * libm::cos(angle),
        radius: lesion_rng.random_range(6.0..14.0),
        contrast: lesion_rng.random_range(0.15..0.30),
    };
    if with_lesion {
        let sigma = lesion.radius / 2.0;
        for (p, v) in data.iter_mut().enumerate() {
            let (i, j) = ((p / n) as f64, (p % n) as f64);
            *v += lesion.contrast * bump(i - lesion.row, j - lesion.col, sigma);
        }
    }

    let mut noise_rng = seed::rng(seed::derive(seed, 3));
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    for v in &mut data {
        *v += noise.sample(&mut noise_rng);
    }
    let img = ImageBuffer::clipped(n, n, 1, data).expect("phantom shape is valid");
    (img, with_lesion.then_some(lesion))
}

/// `n` phantoms, alternating negative and positive, with stable ids.
pub fn gen_phantoms(n: usize, seed: u64, modality: Modality) -> Result<Vec<PhantomSample>> {
    if n % 2 != 0 {
        return Err(Error::param(format!("phantom count {n} must be even")));
    }
    Ok((0..n)
        .map(|i| {
            let label = if i % 2 == 1 { Label::Positive } else { Label::Negative };
            let sample_seed = seed::derive_path(seed, &[modality.stream(), i as u64]);
            let (image, lesion) = render_phantom(sample_seed, modality, label == Label::Positive);
            PhantomSample {
                id: format!("{}-{seed}-{i:04}", modality.tag()),
                image,
                label,
                seed: sample_seed,
                modality,
                lesion,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_deterministic() {
        let a = gen_phantoms(20, 7, Modality::MriLike).unwrap();
        assert_eq!(a.iter().filter(|s| s.label == Label::Positive).count(), 10);
        assert_eq!(a, gen_phantoms(20, 7, Modality::MriLike).unwrap());
        assert!(a.iter().all(|s| s.lesion.is_some() == (s.label == Label::Positive)));
        assert!(gen_phantoms(3, 7, Modality::MriLike).is_err());
    }

    #[test]
    fn lesion_is_the_difference() {
        for m in Modality::ALL {
            for s in 0..4u64 {
                let (pos, lesion) = render_phantom(s, m, true);
                let (neg, none) = render_phantom(s, m, false);
                assert!(none.is_none());
                let lesion = lesion.unwrap();
                let (argmax, _) = pos
                    .data()
                    .iter()
                    .zip(neg.data())
                    .map(|(a, b)| (a - b).abs())
                    .enumerate()
                    .fold((0, 0.0), |best, (i, d)| if d > best.1 { (i, d) } else { best });
                let (r, c) = ((argmax / PHANTOM_SIZE) as f64, (argmax % PHANTOM_SIZE) as f64);
                assert!((r - lesion.row).abs() <= 1.0 && (c - lesion.col).abs() <= 1.0, "{m}: {r},{c} vs {lesion:?}");
                assert!(lesion.contrast >= 0.15 && (6.0..14.0).contains(&lesion.radius));
            }
        }
    }

    #[test]
    fn modality_tags_roundtrip() {
        for m in Modality::ALL {
            assert_eq!(Modality::parse(m.tag()).unwrap(), m);
        }
        assert!(Modality::parse("pet").is_err());
    }
}
