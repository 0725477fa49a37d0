use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::ssim::{blur, check_ssim_shape, product, ssim_pixel};
use crate::error::{Error, Result};
use crate::image::{grayscale_proxy, ImageBuffer, RoiMask};

/// Bisection stops once the bracket is narrower than this.
pub const BISECTION_TOL: f64 = 1e-3;
pub const BISECTION_MAX_ITERS: usize = 20;

/// Outcome of projecting a shifted candidate onto the SSIM-feasible set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlausibilityVerdict {
    pub ssim_global: f64,
    pub ssim_roi: f64,
    pub alpha_star: f64,
    pub feasible_at_one: bool,
}

/// Cached statistics of one clean image and its ROI mask.
///
/// Mixing is linear, so the windowed moments of `x_α = x + α (s - x)` are
/// quadratic polynomials in `α`. Filtering the candidate once gives every
/// bisection step for the cost of a per-pixel pass.
#[derive(Debug, Clone)]
pub struct Projector {
    clean: ImageBuffer,
    mask: RoiMask,
    gray: Vec<f64>,
    mu: Vec<f64>,
    e_xx: Vec<f64>,
}

/// Windowed moments of a candidate relative to the clean image.
struct Candidate {
    mu_s: Vec<f64>,
    e_ss: Vec<f64>,
    e_xs: Vec<f64>,
}

impl Projector {
    /// `mask` must come from the clean image.
    pub fn new(clean: &ImageBuffer, mask: RoiMask) -> Result<Self> {
        let (h, w, _) = clean.shape();
        check_ssim_shape(h, w)?;
        if (mask.height, mask.width) != (h, w) {
            return Err(Error::mismatch(alloc::format!("{h}x{w}"), alloc::format!("{}x{}", mask.height, mask.width)));
        }
        if mask.count() == 0 {
            return Err(Error::EmptyMask);
        }
        let gray = grayscale_proxy(clean).data;
        let mu = blur(&gray, h, w);
        let e_xx = blur(&product(&gray, &gray), h, w);
        Ok(Self { clean: clean.clone(), mask, gray, mu, e_xx })
    }

    pub fn clean(&self) -> &ImageBuffer {
        &self.clean
    }

    pub fn mask(&self) -> &RoiMask {
        &self.mask
    }

    fn filter_candidate(&self, shift: &ImageBuffer) -> Result<Candidate> {
        self.clean.same_shape(shift)?;
        let (h, w, _) = shift.shape();
        let s = grayscale_proxy(shift).data;
        Ok(Candidate {
            mu_s: blur(&s, h, w),
            e_ss: blur(&product(&s, &s), h, w),
            e_xs: blur(&product(&self.gray, &s), h, w),
        })
    }

    /// Global and ROI SSIM of the clean image against a candidate filtered directly.
    fn scores_direct(&self, c: &Candidate) -> (f64, f64) {
        self.reduce(|p| {
            let (mx, ms) = (self.mu[p], c.mu_s[p]);
            ssim_pixel(mx, ms, self.e_xx[p] - mx * mx, c.e_ss[p] - ms * ms, c.e_xs[p] - mx * ms)
        })
    }

    /// Global and ROI SSIM of the clean image against `x_α`, via the moment polynomials.
    fn scores_mixed(&self, c: &Candidate, alpha: f64) -> (f64, f64) {
        self.reduce(|p| {
            let (mx, exx) = (self.mu[p], self.e_xx[p]);
            // Moments of d = s - x.
            let mu_d = c.mu_s[p] - mx;
            let e_xd = c.e_xs[p] - exx;
            let e_dd = c.e_ss[p] - 2.0 * c.e_xs[p] + exx;
            let my = mx + alpha * mu_d;
            let e_yy = exx + 2.0 * alpha * e_xd + alpha * alpha * e_dd;
            let e_xy = exx + alpha * e_xd;
            ssim_pixel(mx, my, exx - mx * mx, e_yy - my * my, e_xy - mx * my)
        })
    }

    fn reduce(&self, f: impl Fn(usize) -> f64) -> (f64, f64) {
        let (mut total, mut roi, mut count) = (0.0, 0.0, 0usize);
        for (p, &inside) in self.mask.data.iter().enumerate() {
            let v = f(p);
            total += v;
            if inside {
                roi += v;
                count += 1;
            }
        }
        (total / self.mask.data.len() as f64, roi / count as f64)
    }

    /// Global and ROI SSIM of the clean image against `candidate`, from scratch.
    pub fn scores(&self, candidate: &ImageBuffer) -> Result<(f64, f64)> {
        Ok(self.scores_direct(&self.filter_candidate(candidate)?))
    }

    /// Mixes toward `shift` with the largest verified-feasible coefficient.
    ///
    /// Feasibility is `ssim_global >= tau && ssim_roi >= tau`. A feasible
    /// candidate is returned unchanged with `α* = 1`; otherwise `α` is bisected
    /// on `[0, 1]` and the final choice is re-checked on the materialized mix,
    /// falling back through smaller verified values down to `α = 0`.
    pub fn project(&self, shift: &ImageBuffer, tau: f64) -> Result<(ImageBuffer, PlausibilityVerdict)> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::param(alloc::format!("threshold {tau} outside (0, 1]")));
        }
        let cand = self.filter_candidate(shift)?;
        let (g1, r1) = self.scores_direct(&cand);
        if g1 >= tau && r1 >= tau {
            let verdict = PlausibilityVerdict { ssim_global: g1, ssim_roi: r1, alpha_star: 1.0, feasible_at_one: true };
            return Ok((shift.clone(), verdict));
        }
        let feasible = |alpha: f64| {
            let (g, r) = self.scores_mixed(&cand, alpha);
            g >= tau && r >= tau
        };
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let mut accepted = alloc::vec![0.0];
        for _ in 0..BISECTION_MAX_ITERS {
            if hi - lo < BISECTION_TOL {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if feasible(mid) {
                lo = mid;
                accepted.push(mid);
            } else {
                hi = mid;
            }
        }
        for &alpha in accepted.iter().rev() {
            if alpha == 0.0 {
                break;
            }
            let mixed = self.clean.mix(shift, alpha)?;
            let (g, r) = self.scores(&mixed)?;
            if g >= tau && r >= tau {
                let verdict = PlausibilityVerdict { ssim_global: g, ssim_roi: r, alpha_star: alpha, feasible_at_one: false };
                return Ok((mixed, verdict));
            }
        }
        let verdict = PlausibilityVerdict { ssim_global: 1.0, ssim_roi: 1.0, alpha_star: 0.0, feasible_at_one: false };
        Ok((self.clean.clone(), verdict))
    }
}

/// One-shot projection; see [`Projector::project`].
pub fn alpha_project(
    x: &ImageBuffer,
    x_shift: &ImageBuffer,
    tau: f64,
    mask: &RoiMask,
) -> Result<(ImageBuffer, PlausibilityVerdict)> {
    Projector::new(x, mask.clone())?.project(x_shift, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::roi_mask;
    use crate::plausibility::{ssim_global, ssim_roi};

    fn scene(n: usize) -> ImageBuffer {
        let c = n as f64 / 2.0;
        let data = (0..n * n)
            .map(|p| {
                let (dy, dx) = ((p / n) as f64 - c, (p % n) as f64 - c);
                0.1 + 0.6 * libm::exp(-(dx * dx + dy * dy) / 200.0) + 0.03 * libm::sin(p as f64 * 0.7)
            })
            .collect();
        ImageBuffer::new(n, n, 1, data).unwrap()
    }

    fn inverted(x: &ImageBuffer) -> ImageBuffer {
        ImageBuffer::new(x.height(), x.width(), 1, x.data().iter().map(|v| 1.0 - v).collect()).unwrap()
    }

    #[test]
    fn identity_shift_keeps_alpha_one() {
        let x = scene(32);
        let (adv, v) = alpha_project(&x, &x, 0.9, &roi_mask(&x)).unwrap();
        assert_eq!(adv, x);
        assert_eq!((v.alpha_star, v.ssim_global, v.ssim_roi, v.feasible_at_one), (1.0, 1.0, 1.0, true));
    }

    #[test]
    fn mixed_moments_match_direct() {
        let x = scene(32);
        let s = inverted(&x);
        let proj = Projector::new(&x, roi_mask(&x)).unwrap();
        let cand = proj.filter_candidate(&s).unwrap();
        for alpha in [0.0, 0.13, 0.5, 0.91, 1.0] {
            let (g, r) = proj.scores_mixed(&cand, alpha);
            let mixed = x.mix(&s, alpha).unwrap();
            assert!((g - ssim_global(&x, &mixed).unwrap()).abs() < 1e-10);
            assert!((r - ssim_roi(&x, &mixed, proj.mask()).unwrap()).abs() < 1e-10);
        }
        assert_eq!(proj.scores_mixed(&cand, 0.0), (1.0, 1.0));
    }

    #[test]
    fn strong_shift_matches_dense_grid() {
        let x = scene(40);
        let s = inverted(&x);
        let mask = roi_mask(&x);
        let tau = 0.999;
        let (adv, v) = alpha_project(&x, &s, tau, &mask).unwrap();
        let grid = (0..=1000)
            .map(|i| i as f64 / 1000.0)
            .take_while(|&a| {
                let m = x.mix(&s, a).unwrap();
                ssim_global(&x, &m).unwrap() >= tau && ssim_roi(&x, &m, &mask).unwrap() >= tau
            })
            .last()
            .unwrap();
        assert!((v.alpha_star - grid).abs() <= 1e-3, "{} vs {}", v.alpha_star, grid);
        assert!(ssim_global(&x, &adv).unwrap() >= tau);
        assert!(ssim_roi(&x, &adv, &mask).unwrap() >= tau);
        assert!(!v.feasible_at_one && v.alpha_star < 1.0);
    }

    #[test]
    fn rejects_bad_threshold() {
        let x = scene(16);
        assert!(alpha_project(&x, &x, 0.0, &roi_mask(&x)).is_err());
        assert!(alpha_project(&x, &x, 1.5, &roi_mask(&x)).is_err());
    }
}
