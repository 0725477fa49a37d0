//! Deterministic synthetic scorer used as a desk-scale black-box model.
//!
//! The image tower extracts low-level statistics (moments, histogram,
//! quadrant means, Laplacian energies), subtracts a frozen calibration mean and
//! applies a seeded Gaussian projection. Its text tower understands prompts of
//! the form `phantom:<modality>:<label>:<index>`, each embedded as the image
//! embedding of the matching seeded phantom.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use super::phantom::{render_phantom, Modality};
use super::{normalize_embedding, Embedding, Label, Scorer};
use crate::error::{Error, Result};
use crate::image::{grayscale_proxy, GrayImage, ImageBuffer};
use crate::seed;

pub const FEATURE_COUNT: usize = 16;
const HIST_BINS: usize = 8;
const FINE_BLOCK: usize = 2;
const COARSE_BLOCK: usize = 4;
const ENERGY_FLOOR: f64 = 1e-8;
const PROMPTS_PER_CLASS: usize = 16;
const CALIBRATION_PER_CLASS: usize = 8;

const STREAM_PROJECTION: u64 = 11;
const STREAM_CALIBRATION: u64 = 12;
const STREAM_PROMPTS: u64 = 13;

fn laplacian_energy(data: &[f64], h: usize, w: usize) -> f64 {
    if h < 3 || w < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            let p = i * w + j;
            let lap = data[p - w] + data[p + w] + data[p - 1] + data[p + 1] - 4.0 * data[p];
            acc += lap * lap;
        }
    }
    acc / ((h - 2) * (w - 2)) as f64
}

fn block_mean(g: &GrayImage, block: usize) -> (Vec<f64>, usize, usize) {
    let (h, w) = (g.height / block, g.width / block);
    let mut out = alloc::vec![0.0; h * w];
    for i in 0..h * block {
        for j in 0..w * block {
            out[(i / block) * w + j / block] += g.get(i, j);
        }
    }
    let area = (block * block) as f64;
    out.iter_mut().for_each(|v| *v /= area);
    (out, h, w)
}

/// Raw statistics fed to the projection.
pub fn features(img: &ImageBuffer) -> [f64; FEATURE_COUNT] {
    let g = grayscale_proxy(img);
    let n = g.data.len() as f64;
    let mean = g.data.iter().sum::<f64>() / n;
    let var = g.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let mut f = [0.0; FEATURE_COUNT];
    f[0] = mean;
    f[1] = libm::sqrt(var);
    for &v in &g.data {
        let bin = ((v * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
        f[2 + bin] += 1.0 / n;
    }
    let (hh, hw) = (g.height / 2, g.width / 2);
    let mut quad = [0.0f64; 4];
    let mut counts = [0usize; 4];
    for i in 0..g.height {
        for j in 0..g.width {
            let q = usize::from(i >= hh) * 2 + usize::from(j >= hw);
            quad[q] += g.get(i, j);
            counts[q] += 1;
        }
    }
    for q in 0..4 {
        f[10 + q] = quad[q] / counts[q] as f64;
    }
    // Two bands from 2×2 and 4×4 block means. The coarse band is taken
    // relative to the fine one, so a global contrast change cancels and the
    // feature mostly sees blob-sized curvature.
    let (fine, fh, fw) = block_mean(&g, FINE_BLOCK);
    let fine = libm::log(laplacian_energy(&fine, fh, fw) + ENERGY_FLOOR);
    let (coarse, ch, cw) = block_mean(&g, COARSE_BLOCK);
    f[14] = fine;
    f[15] = libm::log(laplacian_energy(&coarse, ch, cw) + ENERGY_FLOOR) - fine;
    f
}

#[derive(Debug, Clone)]
pub struct SyntheticScorer {
    name: String,
    seed: u64,
    dim: usize,
    /// Row-major `dim × FEATURE_COUNT`.
    projection: Vec<f64>,
    offset: [f64; FEATURE_COUNT],
}

/// Builds the synthetic scorer for `seed` with output dimension `dim >= 8`.
pub fn synthetic_scorer(seed: u64, dim: usize) -> Result<SyntheticScorer> {
    SyntheticScorer::new(seed, dim)
}

pub(crate) fn prompt(modality: Modality, label: Label, index: usize) -> String {
    format!("phantom:{}:{}:{index}", modality.tag(), label.index())
}

/// Renders the seeded phantom a `phantom:<modality>:<label>:<index>` prompt
/// stands for.
pub(crate) fn prompt_phantom(seed: u64, text: &str) -> Result<ImageBuffer> {
    let bad = || Error::Scorer(format!("synthetic text tower cannot embed {text:?}"));
    let mut parts = text.split(':');
    if parts.next() != Some("phantom") {
        return Err(bad());
    }
    let modality = Modality::parse(parts.next().ok_or_else(bad)?).map_err(|_| bad())?;
    let label: u8 = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
    let label = Label::try_from(label).map_err(|_| bad())?;
    let index: u64 = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
    if parts.next().is_some() {
        return Err(bad());
    }
    let s = seed::derive_path(seed, &[STREAM_PROMPTS, modality as u64, label.index() as u64, index]);
    Ok(render_phantom(s, modality, label == Label::Positive).0)
}

/// `[negative, positive]` prompt sets for `modality`.
pub(crate) fn phantom_prompts(modality: Modality) -> [Vec<String>; 2] {
    let class = |label| (0..PROMPTS_PER_CLASS).map(|i| prompt(modality, label, i)).collect();
    [class(Label::Negative), class(Label::Positive)]
}

impl SyntheticScorer {
    pub fn new(seed: u64, dim: usize) -> Result<Self> {
        if dim < 8 {
            return Err(Error::param(format!("scorer dim {dim} must be at least 8")));
        }
        let mut rng = seed::rng(seed::derive(seed, STREAM_PROJECTION));
        let scale = 1.0 / libm::sqrt(dim as f64);
        let projection = (0..dim * FEATURE_COUNT)
            .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();

        let mut offset = [0.0; FEATURE_COUNT];
        let mut count = 0.0;
        for m in Modality::ALL {
            for i in 0..2 * CALIBRATION_PER_CLASS {
                let s = seed::derive_path(seed, &[STREAM_CALIBRATION, m as u64, i as u64]);
                let (img, _) = render_phantom(s, m, i % 2 == 1);
                let f = features(&img);
                offset.iter_mut().zip(&f).for_each(|(o, v)| *o += v);
                count += 1.0;
            }
        }
        offset.iter_mut().for_each(|o| *o /= count);
        Ok(Self { name: format!("synthetic-{seed}"), seed, dim, projection, offset })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn embed_features(&self, f: &[f64; FEATURE_COUNT]) -> Result<Embedding> {
        let centred: [f64; FEATURE_COUNT] = core::array::from_fn(|k| f[k] - self.offset[k]);
        let v = self
            .projection
            .chunks_exact(FEATURE_COUNT)
            .map(|row| row.iter().zip(&centred).map(|(a, b)| a * b).sum())
            .collect();
        normalize_embedding(v)
    }

    fn embed_prompt(&self, text: &str) -> Result<Embedding> {
        self.embed_image(&prompt_phantom(self.seed, text)?)
    }
}

impl Scorer for SyntheticScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, img: &ImageBuffer) -> Result<Embedding> {
        self.embed_features(&features(img))
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        texts.iter().map(|t| self.embed_prompt(t)).collect()
    }

    fn default_prompts(&self, modality: Modality) -> Option<[Vec<String>; 2]> {
        Some(phantom_prompts(modality))
    }
}
