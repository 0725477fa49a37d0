//! Structural-similarity constraints and the mixing projection onto the feasible set.
//!
//! SSIM is always measured on the luminance proxy, and the ROI mask always
//! comes from the clean image.

mod projection;
mod ssim;

pub use projection::{alpha_project, PlausibilityVerdict, Projector, BISECTION_MAX_ITERS, BISECTION_TOL};
pub use ssim::{gaussian_kernel, reflect, ssim_global, ssim_map, ssim_roi, SsimMap, C1, C2, SIGMA, WINDOW};

/// Default plausibility thresholds.
pub const DEFAULT_TAUS: [f64; 2] = [0.90, 0.80];
