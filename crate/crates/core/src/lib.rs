//! Chain-of-pipeline image shifts for probing zero-shot medical image classifiers.
//!
//! The crate is `no_std` (with `alloc`) and contains every numerical piece of the
//! engine: the image type and ROI extraction, the three shift stages and their
//! composition families, global and ROI-masked SSIM with the mixing projection,
//! zero-shot scoring and a synthetic phantom world, random and TPE search with
//! winner-family selection, and teacher-guided token-space repair.
//!
//! IO, configuration, archives and the command line live in the `chainshift` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod error;
pub mod image;
pub mod plausibility;
pub mod repair;
pub mod scoring;
pub mod search;
pub mod seed;
pub mod stages;

pub use error::{Error, Result};
pub use image::{clip01, grayscale_proxy, robust_quantiles, roi_mask, GrayImage, ImageBuffer, RoiMask};
pub use plausibility::{alpha_project, ssim_global, ssim_map, ssim_roi, PlausibilityVerdict, Projector};
pub use scoring::{
    build_prototypes, gen_phantoms, margin, normalize_embedding, signed_correctness, ClassPrototypes,
    Embedding, Label, MarginModel, Modality, PhantomSample, Scorer, SyntheticScorer, ZeroShotClassifier,
};
pub use stages::{apply_family, Family, FamilySpec, ThetaA, ThetaD, ThetaR};
