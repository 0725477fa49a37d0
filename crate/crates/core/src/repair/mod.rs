//! Teacher-guided token-space repair of a frozen student encoder.
//!
//! The student is adapted by a single residual matrix `W` applied to every
//! token (CLS included). Training uses only clean images and balances the
//! original zero-shot objective, margin consistency across two mild
//! workflow-style views, and alignment of the patch-token Gram matrix with a
//! stronger frozen teacher.

mod adapter;
mod encoder;
mod loss;
mod train;

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use adapter::{adapter_apply, gram, AdapterW, GRAM_EPS};
pub use encoder::{
    student_encoder, teacher_encoder, FeatureSet, TokenEncoder, TokenSequence, PATCH, PATCHES, STUDENT_DIM, TEACHER_DIM,
};
pub use loss::{
    batch_evaluate, evaluate, mild_view, repair_grad, repair_loss, LossParts, PartGrads, RepairExample, TeacherGuide,
};
pub use train::{evaluate_repair, train_adapter, train_on_examples, RepairItem, RepairReport, RepairRow, TrainedAdapter};

use crate::error::Result;
use crate::image::ImageBuffer;
use crate::scoring::synthetic::{phantom_prompts, prompt_phantom};
use crate::scoring::{build_prototypes, normalize_embedding, ClassPrototypes, Embedding, Modality, Scorer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepairConfig {
    pub lambda_cons: f64,
    pub lambda_dist: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Logit scale `s` of the task term.
    pub temperature: f64,
    pub teacher_projection_seed: u64,
}

impl Default for RepairConfig {
    fn default() -> Self {
        Self {
            lambda_cons: 0.1,
            lambda_dist: 1.0,
            learning_rate: 0.05,
            epochs: 40,
            temperature: 100.0,
            teacher_projection_seed: 0,
        }
    }
}

impl RepairConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.lambda_cons) && ok(self.lambda_dist) && ok(self.temperature)) {
            return Err(crate::Error::param("repair weights and temperature must be finite and non-negative"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(crate::Error::param("learning rate must be positive"));
        }
        Ok(())
    }
}

/// Student encoder (optionally adapted) exposed as a zero-shot scorer.
///
/// The text tower is frozen: prompts of the synthetic scheme embed as the
/// unadapted CLS of their phantom, so prototypes do not move with `W`.
#[derive(Debug, Clone)]
pub struct StudentScorer {
    encoder: TokenEncoder,
    adapter: AdapterW,
    seed: u64,
    name: String,
}

impl StudentScorer {
    pub fn new(encoder: TokenEncoder, adapter: AdapterW, seed: u64) -> Result<Self> {
        if adapter.dim() != encoder.dim() {
            return Err(crate::Error::mismatch(encoder.dim(), adapter.dim()));
        }
        let name = alloc::format!("{}-adapted", encoder.name());
        Ok(Self { encoder, adapter, seed, name })
    }

    /// Unadapted student for `seed`.
    pub fn frozen(seed: u64) -> Self {
        Self::new(student_encoder(seed), AdapterW::zeros(STUDENT_DIM), seed).expect("dims agree")
    }

    pub fn with_adapter(&self, adapter: AdapterW) -> Result<Self> {
        Self::new(self.encoder.clone(), adapter, self.seed)
    }

    pub fn encoder(&self) -> &TokenEncoder {
        &self.encoder
    }

    pub fn adapter(&self) -> &AdapterW {
        &self.adapter
    }

    /// Frozen-text prototypes for `modality`.
    pub fn prototypes(&self, modality: Modality) -> Result<ClassPrototypes> {
        let [neg, pos] = phantom_prompts(modality);
        build_prototypes(&[self.embed_texts(&neg)?, self.embed_texts(&pos)?])
    }
}

impl Scorer for StudentScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.encoder.dim()
    }

    fn embed_image(&self, img: &ImageBuffer) -> Result<Embedding> {
        let t = self.encoder.tokens(img)?;
        normalize_embedding(self.adapter.apply_token(t.cls()))
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Embedding>> {
        texts
            .iter()
            .map(|t| normalize_embedding(self.encoder.tokens(&prompt_phantom(self.seed, t)?)?.cls().to_vec()))
            .collect()
    }

    fn default_prompts(&self, modality: Modality) -> Option<[Vec<String>; 2]> {
        Some(phantom_prompts(modality))
    }
}
