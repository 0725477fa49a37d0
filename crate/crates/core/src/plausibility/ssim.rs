use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::image::{grayscale_proxy, GrayImage, ImageBuffer, RoiMask};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

const RADIUS: usize = WINDOW / 2;

/// Normalized 11-tap Gaussian, `sigma = 1.5`.
pub fn gaussian_kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - RADIUS as f64;
        *v = libm::exp(-d * d / (2.0 * SIGMA * SIGMA));
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Symmetric (edge-duplicating) reflection of an out-of-range index.
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian filter with symmetric padding; same-size output.
pub(crate) fn blur(data: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_kernel();
    let col_idx: Vec<[usize; WINDOW]> = (0..w)
        .map(|j| core::array::from_fn(|t| reflect(j as isize + t as isize - RADIUS as isize, w)))
        .collect();
    let mut tmp = Vec::with_capacity(h * w);
    for i in 0..h {
        let row = &data[i * w..(i + 1) * w];
        for idx in &col_idx {
            let mut acc = 0.0;
            for t in 0..WINDOW {
                acc += k[t] * row[idx[t]];
            }
            tmp.push(acc);
        }
    }
    let mut out = alloc::vec![0.0; h * w];
    for i in 0..h {
        let rows: [usize; WINDOW] = core::array::from_fn(|t| reflect(i as isize + t as isize - RADIUS as isize, h));
        let dst = &mut out[i * w..(i + 1) * w];
        for t in 0..WINDOW {
            let src = &tmp[rows[t] * w..(rows[t] + 1) * w];
            let kt = k[t];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += kt * s;
            }
        }
    }
    out
}

pub(crate) fn product(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

#[inline]
pub(crate) fn ssim_pixel(mu_a: f64, mu_b: f64, var_a: f64, var_b: f64, cov: f64) -> f64 {
    ((2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2)) / ((mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2))
}

/// Per-pixel SSIM values; may be negative.
#[derive(Debug, Clone, PartialEq)]
pub struct SsimMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl SsimMap {
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn masked_mean(&self, mask: &RoiMask) -> Result<f64> {
        if mask.height != self.height || mask.width != self.width {
            return Err(Error::mismatch(
                alloc::format!("{}x{}", self.height, self.width),
                alloc::format!("{}x{}", mask.height, mask.width),
            ));
        }
        let (sum, count) = self
            .data
            .iter()
            .zip(&mask.data)
            .filter(|(_, &m)| m)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(sum / count as f64)
    }
}

pub(crate) fn check_ssim_shape(h: usize, w: usize) -> Result<()> {
    if h < WINDOW || w < WINDOW {
        return Err(Error::shape(alloc::format!("SSIM needs at least {WINDOW}x{WINDOW}, got {h}x{w}")));
    }
    Ok(())
}

/// Local SSIM with an 11×11 Gaussian window (σ = 1.5) and unit dynamic range.
pub fn ssim_map(a: &GrayImage, b: &GrayImage) -> Result<SsimMap> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::mismatch(
            alloc::format!("{}x{}", a.height, a.width),
            alloc::format!("{}x{}", b.height, b.width),
        ));
    }
    let (h, w) = (a.height, a.width);
    check_ssim_shape(h, w)?;
    let mu_a = blur(&a.data, h, w);
    let mu_b = blur(&b.data, h, w);
    let e_aa = blur(&product(&a.data, &a.data), h, w);
    let e_bb = blur(&product(&b.data, &b.data), h, w);
    let e_ab = blur(&product(&a.data, &b.data), h, w);
    let data = (0..h * w)
        .map(|p| {
            let (ma, mb) = (mu_a[p], mu_b[p]);
            ssim_pixel(ma, mb, e_aa[p] - ma * ma, e_bb[p] - mb * mb, e_ab[p] - ma * mb)
        })
        .collect();
    Ok(SsimMap { height: h, width: w, data })
}

/// Mean SSIM over all pixels of the luminance proxies.
pub fn ssim_global(a: &ImageBuffer, b: &ImageBuffer) -> Result<f64> {
    a.same_shape(b)?;
    Ok(ssim_map(&grayscale_proxy(a), &grayscale_proxy(b))?.mean())
}

/// Mean SSIM restricted to pixels where `mask` is set.
pub fn ssim_roi(a: &ImageBuffer, b: &ImageBuffer, mask: &RoiMask) -> Result<f64> {
    a.same_shape(b)?;
    ssim_map(&grayscale_proxy(a), &grayscale_proxy(b))?.masked_mean(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::roi_mask;
    use rand::Rng;

    fn noise(h: usize, w: usize, seed: u64) -> ImageBuffer {
        let mut rng = crate::seed::rng(seed);
        ImageBuffer::new(h, w, 1, (0..h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn blob(n: usize) -> ImageBuffer {
        let c = n as f64 / 2.0;
        let data = (0..n * n)
            .map(|p| {
                let (dy, dx) = ((p / n) as f64 - c, (p % n) as f64 - c);
                0.45 + 0.3 * libm::exp(-(dx * dx + dy * dy) / 60.0) + 0.02 * libm::sin(p as f64)
            })
            .collect();
        ImageBuffer::new(n, n, 1, data).unwrap()
    }

    #[test]
    fn kernel_normalized_and_symmetric() {
        let k = gaussian_kernel();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..WINDOW {
            assert_eq!(k[i], k[WINDOW - 1 - i]);
        }
    }

    #[test]
    fn reflect_duplicates_edges() {
        assert_eq!(reflect(-1, 5), 0);
        assert_eq!(reflect(-3, 5), 2);
        assert_eq!(reflect(5, 5), 4);
        assert_eq!(reflect(7, 5), 2);
    }

    #[test]
    fn self_similarity_is_exactly_one() {
        let x = blob(32);
        let g = grayscale_proxy(&x);
        assert!(ssim_map(&g, &g).unwrap().data.iter().all(|&v| v == 1.0));
        assert_eq!(ssim_global(&x, &x).unwrap(), 1.0);
        assert_eq!(ssim_roi(&x, &x, &roi_mask(&x)).unwrap(), 1.0);
    }

    #[test]
    fn independent_noise_is_dissimilar() {
        let (a, b) = (noise(48, 48, 1), noise(48, 48, 2));
        let m = ssim_map(&grayscale_proxy(&a), &grayscale_proxy(&b)).unwrap();
        assert!(m.mean() < 0.2);
        assert!(m.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn inversion_is_negative() {
        let x = noise(40, 40, 9);
        let inv = ImageBuffer::new(40, 40, 1, x.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim_global(&x, &inv).unwrap() < 0.0);
    }

    #[test]
    fn symmetric() {
        let (a, b) = (blob(24), noise(24, 24, 3));
        assert!((ssim_global(&a, &b).unwrap() - ssim_global(&b, &a).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn full_mask_matches_global() {
        let (a, b) = (blob(24), noise(24, 24, 4));
        let full = RoiMask::full(24, 24);
        assert!((ssim_roi(&a, &b, &full).unwrap() - ssim_global(&a, &b).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn background_only_damage_keeps_roi_at_one() {
        // Left half foreground. Damage right columns beyond the window reach.
        let (h, w) = (32, 48);
        let x = blob(48);
        let x = ImageBuffer::new(h, w, 1, x.data()[..h * w].to_vec()).unwrap();
        let mut damaged = x.data().to_vec();
        let mut rng = crate::seed::rng(5);
        for p in 0..h * w {
            if p % w >= 36 {
                damaged[p] = rng.random();
            }
        }
        let y = ImageBuffer::new(h, w, 1, damaged).unwrap();
        let mask = RoiMask::from_bits(h, w, (0..h * w).map(|p| p % w < 24).collect()).unwrap();
        assert_eq!(ssim_roi(&x, &y, &mask).unwrap(), 1.0);
        assert!(ssim_global(&x, &y).unwrap() < 1.0);
    }

    #[test]
    fn contract_errors() {
        let a = ImageBuffer::filled(10, 10, 1, 0.5).unwrap();
        assert!(ssim_global(&a, &a).is_err());
        let b = ImageBuffer::filled(12, 12, 1, 0.5).unwrap();
        let c = ImageBuffer::filled(12, 13, 1, 0.5).unwrap();
        assert!(ssim_global(&b, &c).is_err());
        let empty = RoiMask::from_bits(12, 12, alloc::vec![false; 144]).unwrap();
        assert_eq!(ssim_roi(&b, &b, &empty), Err(Error::EmptyMask));
    }
}
