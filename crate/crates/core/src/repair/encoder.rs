//! Toy frozen encoders producing CLS + patch token sequences.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::{grayscale_proxy, GrayImage, ImageBuffer};
use crate::scoring::phantom::{render_phantom, Modality, PHANTOM_SIZE};
use crate::seed;

pub const PATCH: usize = 16;
pub const PATCHES: usize = (PHANTOM_SIZE / PATCH) * (PHANTOM_SIZE / PATCH);
pub const STUDENT_DIM: usize = 32;
pub const TEACHER_DIM: usize = 48;

const STUDENT_FEATURES: usize = 8;
const TEACHER_FEATURES: usize = 12;
const LOG_FLOOR: f64 = 1e-6;
const STD_FLOOR: f64 = 1e-8;
const CALIBRATION_PER_CLASS: usize = 4;

const STREAM_MAP: u64 = 21;
const STREAM_CALIBRATION: u64 = 22;

/// `(1 + N) × d` tokens, row-major; row 0 is CLS.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    dim: usize,
    data: Vec<f64>,
}

impl TokenSequence {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 || data.len() < 2 * dim {
            return Err(Error::shape(format!("{} values do not form CLS + patch rows of width {dim}", data.len())));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Token count including CLS.
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cls(&self) -> &[f64] {
        &self.data[..self.dim]
    }

    /// Patch tokens as an `N × d` row-major block.
    pub fn patches(&self) -> &[f64] {
        &self.data[self.dim..]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSet {
    /// Mean, log std, four log oriented-gradient energies, two DCT lowpass terms.
    Student,
    /// The student's features plus four more DCT terms.
    Teacher,
}

impl FeatureSet {
    pub fn len(self) -> usize {
        match self {
            FeatureSet::Student => STUDENT_FEATURES,
            FeatureSet::Teacher => TEACHER_FEATURES,
        }
    }

    fn dct_terms(self) -> &'static [(usize, usize)] {
        match self {
            FeatureSet::Student => &[(0, 1), (1, 0)],
            FeatureSet::Teacher => &[(0, 1), (1, 0), (1, 1), (0, 2), (2, 0), (1, 2)],
        }
    }
}

fn dct_basis(k: usize, i: usize) -> f64 {
    libm::cos(core::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * PATCH) as f64)
}

struct PatchStats {
    mean: f64,
    var: f64,
    /// Mean squared horizontal, vertical, diagonal and anti-diagonal differences.
    energy: [f64; 4],
    dct: [f64; 6],
}

fn patch_stats(g: &GrayImage, pr: usize, pc: usize, set: FeatureSet) -> PatchStats {
    let (r0, c0) = (pr * PATCH, pc * PATCH);
    let at = |i: usize, j: usize| g.get(r0 + i, c0 + j);
    let area = (PATCH * PATCH) as f64;
    let mut mean = 0.0;
    for i in 0..PATCH {
        for j in 0..PATCH {
            mean += at(i, j);
        }
    }
    mean /= area;
    let mut var = 0.0;
    let mut energy = [0.0f64; 4];
    let mut counts = [0usize; 4];
    for i in 0..PATCH {
        for j in 0..PATCH {
            let v = at(i, j);
            var += (v - mean) * (v - mean);
            let mut add = |k: usize, w: f64| {
                energy[k] += (w - v) * (w - v);
                counts[k] += 1;
            };
            if j + 1 < PATCH {
                add(0, at(i, j + 1));
            }
            if i + 1 < PATCH {
                add(1, at(i + 1, j));
            }
            if i + 1 < PATCH && j + 1 < PATCH {
                add(2, at(i + 1, j + 1));
            }
            if i + 1 < PATCH && j > 0 {
                add(3, at(i + 1, j - 1));
            }
        }
    }
    for k in 0..4 {
        energy[k] /= counts[k] as f64;
    }
    let mut dct = [0.0f64; 6];
    for (slot, &(u, v)) in dct.iter_mut().zip(set.dct_terms()) {
        let mut acc = 0.0;
        for i in 0..PATCH {
            for j in 0..PATCH {
                acc += at(i, j) * dct_basis(u, i) * dct_basis(v, j);
            }
        }
        *slot = acc / area;
    }
    PatchStats { mean, var: var / area, energy, dct }
}

fn patch_features(s: &PatchStats, set: FeatureSet, out: &mut Vec<f64>) {
    out.push(s.mean);
    out.push(libm::log(libm::sqrt(s.var) + LOG_FLOOR));
    out.extend(s.energy.iter().map(|e| libm::log(e + LOG_FLOOR)));
    out.extend_from_slice(&s.dct[..set.dct_terms().len()]);
}

/// Raw per-patch features, `N × k` row-major.
fn raw_features(img: &ImageBuffer, set: FeatureSet) -> Result<Vec<f64>> {
    if img.height() != PHANTOM_SIZE || img.width() != PHANTOM_SIZE {
        return Err(Error::mismatch(
            format!("{PHANTOM_SIZE}x{PHANTOM_SIZE}"),
            format!("{}x{}", img.height(), img.width()),
        ));
    }
    let g = grayscale_proxy(img);
    let side = PHANTOM_SIZE / PATCH;
    let mut out = Vec::with_capacity(PATCHES * set.len());
    for pr in 0..side {
        for pc in 0..side {
            patch_features(&patch_stats(&g, pr, pc, set), set, &mut out);
        }
    }
    Ok(out)
}

/// Per-column mean and standard deviation of a row-major block.
fn column_stats(rows: &[f64], width: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (rows.len() / width) as f64;
    let mut mean = vec![0.0; width];
    for row in rows.chunks_exact(width) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n);
    }
    let mut sd = vec![0.0; width];
    for row in rows.chunks_exact(width) {
        sd.iter_mut().zip(row).zip(&mean).for_each(|((s, v), m)| *s += (v - m) * (v - m) / n);
    }
    sd.iter_mut().for_each(|s| *s = libm::sqrt(*s).max(STD_FLOOR));
    (mean, sd)
}

/// Frozen patch featurizer followed by a seeded linear map and a final
/// per-dimension standardization fitted once on calibration phantoms.
#[derive(Debug, Clone)]
pub struct TokenEncoder {
    name: String,
    set: FeatureSet,
    dim: usize,
    feature_mean: Vec<f64>,
    feature_sd: Vec<f64>,
    /// Row-major `dim × k`.
    map: Vec<f64>,
    token_mean: Vec<f64>,
    token_sd: Vec<f64>,
}

impl TokenEncoder {
    pub fn new(set: FeatureSet, dim: usize, seed: u64) -> Self {
        let k = set.len();
        let mut rng = seed::rng(seed::derive(seed, STREAM_MAP));
        let scale = 1.0 / libm::sqrt(k as f64);
        let map = (0..dim * k)
            .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        let mut enc = Self {
            name: format!("{}-{seed}", if set == FeatureSet::Student { "student" } else { "teacher" }),
            set,
            dim,
            feature_mean: vec![0.0; k],
            feature_sd: vec![1.0; k],
            map,
            token_mean: vec![0.0; dim],
            token_sd: vec![1.0; dim],
        };

        let mut features = Vec::new();
        for m in Modality::ALL {
            for i in 0..2 * CALIBRATION_PER_CLASS {
                let s = seed::derive_path(seed, &[STREAM_CALIBRATION, m as u64, i as u64]);
                let (img, _) = render_phantom(s, m, i % 2 == 1);
                features.extend(raw_features(&img, set).expect("phantoms have the encoder size"));
            }
        }
        (enc.feature_mean, enc.feature_sd) = column_stats(&features, k);
        let mapped: Vec<f64> = features.chunks_exact(k).flat_map(|f| enc.project(f)).collect();
        (enc.token_mean, enc.token_sd) = column_stats(&mapped, dim);
        enc
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn feature_set(&self) -> FeatureSet {
        self.set
    }

    fn project(&self, f: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = f
            .iter()
            .zip(self.feature_mean.iter().zip(&self.feature_sd))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        self.map.chunks_exact(z.len()).map(|row| row.iter().zip(&z).map(|(a, b)| a * b).sum()).collect()
    }

    /// CLS followed by the 64 patch tokens.
    pub fn tokens(&self, img: &ImageBuffer) -> Result<TokenSequence> {
        let k = self.set.len();
        let features = raw_features(img, self.set)?;
        let mut data = vec![0.0; self.dim];
        for f in features.chunks_exact(k) {
            let t = self.project(f);
            data.extend(t.iter().zip(self.token_mean.iter().zip(&self.token_sd)).map(|(v, (m, s))| (v - m) / s));
        }
        let n = PATCHES as f64;
        for p in 0..PATCHES {
            for j in 0..self.dim {
                data[j] += data[self.dim * (p + 1) + j] / n;
            }
        }
        TokenSequence::new(self.dim, data)
    }
}

pub fn student_encoder(seed: u64) -> TokenEncoder {
    TokenEncoder::new(FeatureSet::Student, STUDENT_DIM, seed)
}

pub fn teacher_encoder(seed: u64) -> TokenEncoder {
    TokenEncoder::new(FeatureSet::Teacher, TEACHER_DIM, seed)
}
