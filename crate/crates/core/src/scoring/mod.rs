//! Zero-shot scoring: embeddings, prompt-averaged prototypes, margins and
//! signed correctness, plus the black-box scorer abstraction.

pub(crate) mod phantom;
pub(crate) mod synthetic;

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

pub use phantom::{gen_phantoms, render_phantom, Lesion, Modality, PhantomSample, PHANTOM_SIZE};
pub use synthetic::{features, synthetic_scorer, SyntheticScorer, FEATURE_COUNT};

/// Binary label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Negative,
    Positive,
}

impl Label {
    /// `+1` for positive, `-1` for negative.
    pub fn sign(self) -> f64 {
        match self {
            Label::Positive => 1.0,
            Label::Negative => -1.0,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Label::Negative),
            1 => Ok(Label::Positive),
            _ => Err(Error::param(alloc::format!("label {v} is not binary"))),
        }
    }
}

/// Unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    libm::sqrt(dot(v, v))
}

/// `v / ‖v‖₂`.
pub fn normalize_embedding(v: Vec<f64>) -> Result<Embedding> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { index: v.iter().position(|x| !x.is_finite()).unwrap_or(0) });
    }
    let n = norm(&v);
    if n == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(Embedding(v.into_iter().map(|x| x / n).collect()))
}

/// Class prototypes for the binary task.
///
/// `raw` is the plain mean of the unit prompt embeddings and drives every
/// margin; `unit` holds renormalized copies for diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototypes {
    pub raw: [Vec<f64>; 2],
    pub unit: [Embedding; 2],
}

impl ClassPrototypes {
    pub fn dim(&self) -> usize {
        self.raw[0].len()
    }
}

/// Averages unit prompt embeddings per class (index 0 negative, 1 positive).
pub fn build_prototypes(per_class: &[Vec<Embedding>]) -> Result<ClassPrototypes> {
    if per_class.len() != 2 {
        return Err(Error::param(alloc::format!("expected 2 classes, got {}", per_class.len())));
    }
    let dim = per_class
        .iter()
        .flatten()
        .next()
        .map(Embedding::dim)
        .ok_or_else(|| Error::param("no prompt embeddings"))?;
    let mut raw: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for (c, embeds) in per_class.iter().enumerate() {
        if embeds.is_empty() {
            return Err(Error::param(alloc::format!("class {c} has no prompts")));
        }
        let mut mean = alloc::vec![0.0; dim];
        for e in embeds {
            if e.dim() != dim {
                return Err(Error::mismatch(dim, e.dim()));
            }
            mean.iter_mut().zip(e.as_slice()).for_each(|(m, v)| *m += v);
        }
        let count = embeds.len() as f64;
        mean.iter_mut().for_each(|m| *m /= count);
        if norm(&mean) < 1e-12 {
            return Err(Error::param(alloc::format!("class {c} prompts cancel to a zero mean")));
        }
        raw[c] = mean;
    }
    let unit = [normalize_embedding(raw[0].clone())?, normalize_embedding(raw[1].clone())?];
    Ok(ClassPrototypes { raw, unit })
}

/// `⟨z, t1⟩ - ⟨z, t0⟩` with the raw-mean prototypes.
pub fn margin(z: &Embedding, protos: &ClassPrototypes) -> Result<f64> {
    if z.dim() != protos.dim() {
        return Err(Error::mismatch(protos.dim(), z.dim()));
    }
    Ok(dot(z.as_slice(), &protos.raw[1]) - dot(z.as_slice(), &protos.raw[0]))
}

/// Signed correctness `J = m σ(y)`; negative means the prediction is wrong.
pub fn signed_correctness(m: f64, y: Label) -> f64 {
    m * y.sign()
}

/// Margin decision rule; ties go to the negative class.
pub fn predict(m: f64) -> Label {
    if m > 0.0 {
        Label::Positive
    } else {
        Label::Negative
    }
}

/// Black-box embedding model.
pub trait Scorer: Send + Sync {
    fn name(&self) -> &str;

    fn dim(&self) -> usize;

    fn embed_image(&self, img: &ImageBuffer) -> Result<Embedding>;

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Embedding>>;

    /// Prompt sets `[negative, positive]` the scorer knows how to embed, if any.
    fn default_prompts(&self, _modality: Modality) -> Option<[Vec<String>; 2]> {
        None
    }
}

/// Anything that assigns a binary margin to an image.
pub trait MarginModel: Send + Sync {
    fn margin(&self, img: &ImageBuffer) -> Result<f64>;

    fn signed_correctness(&self, img: &ImageBuffer, y: Label) -> Result<f64> {
        Ok(signed_correctness(self.margin(img)?, y))
    }
}

/// A scorer paired with class prototypes.
pub struct ZeroShotClassifier<'a> {
    scorer: &'a dyn Scorer,
    protos: ClassPrototypes,
}

impl<'a> ZeroShotClassifier<'a> {
    pub fn new(scorer: &'a dyn Scorer, protos: ClassPrototypes) -> Result<Self> {
        if protos.dim() != scorer.dim() {
            return Err(Error::mismatch(scorer.dim(), protos.dim()));
        }
        Ok(Self { scorer, protos })
    }

    /// Builds prototypes by embedding `[negative, positive]` prompt sets.
    pub fn from_prompts(scorer: &'a dyn Scorer, prompts: &[Vec<String>; 2]) -> Result<Self> {
        let per_class = [scorer.embed_texts(&prompts[0])?, scorer.embed_texts(&prompts[1])?];
        Self::new(scorer, build_prototypes(&per_class)?)
    }

    pub fn prototypes(&self) -> &ClassPrototypes {
        &self.protos
    }

    pub fn scorer(&self) -> &dyn Scorer {
        self.scorer
    }
}

impl MarginModel for ZeroShotClassifier<'_> {
    fn margin(&self, img: &ImageBuffer) -> Result<f64> {
        let z = self.scorer.embed_image(img)?;
        if z.dim() != self.scorer.dim() {
            return Err(Error::Scorer(alloc::format!(
                "scorer {} declared dim {} but returned {}",
                self.scorer.name(),
                self.scorer.dim(),
                z.dim()
            )));
        }
        margin(&z, &self.protos)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn unit(v: Vec<f64>) -> Embedding {
        normalize_embedding(v).unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(unit(vec![3.0, 4.0]).as_slice(), &[0.6, 0.8]);
        assert_eq!(unit(vec![0.0, 1.0, 0.0]).as_slice(), &[0.0, 1.0, 0.0]);
        assert_eq!(normalize_embedding(vec![0.0, 0.0]), Err(Error::ZeroVector));
    }

    #[test]
    fn prototype_examples() {
        let e = unit(vec![0.2, 0.9, -0.1]);
        let p = build_prototypes(&[vec![unit(vec![1.0, 0.0, 0.0])], vec![e.clone()]]).unwrap();
        assert_eq!(p.raw[1], e.as_slice());
        let p = build_prototypes(&[vec![unit(vec![1.0, 0.0, 0.0])], vec![e.clone(); 4]]).unwrap();
        for (a, b) in p.raw[1].iter().zip(e.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
        let opposite = vec![unit(vec![1.0, 0.0]), unit(vec![-1.0, 0.0])];
        assert!(build_prototypes(&[opposite, vec![unit(vec![0.0, 1.0])]]).is_err());
        assert!(build_prototypes(&[vec![unit(vec![1.0, 0.0])], vec![unit(vec![1.0, 0.0, 0.0])]]).is_err());
        assert!(build_prototypes(&[vec![], vec![unit(vec![1.0])]]).is_err());
    }

    #[test]
    fn raw_mean_is_kept_for_margins() {
        let p = build_prototypes(&[
            vec![unit(vec![1.0, 0.0])],
            vec![unit(vec![1.0, 1.0]), unit(vec![-1.0, 1.0])],
        ])
        .unwrap();
        assert!((p.raw[1][1] - core::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(p.unit[1].as_slice(), &[0.0, 1.0]);
        let z = unit(vec![0.0, 1.0]);
        assert!((margin(&z, &p).unwrap() - core::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn margin_examples() {
        let t0 = unit(vec![1.0, 0.0]);
        let t1 = unit(vec![0.0, 1.0]);
        let p = build_prototypes(&[vec![t0.clone()], vec![t1.clone()]]).unwrap();
        assert_eq!(margin(&t1, &p).unwrap(), 1.0);
        assert!(margin(&unit(vec![1.0, 1.0]), &p).unwrap().abs() < 1e-15);
        let swapped = build_prototypes(&[vec![t1], vec![t0]]).unwrap();
        let z = unit(vec![0.3, 0.8]);
        assert_eq!(margin(&z, &p).unwrap(), -margin(&z, &swapped).unwrap());
    }

    #[test]
    fn correctness_examples() {
        assert_eq!(signed_correctness(0.2, Label::Positive), 0.2);
        assert_eq!(signed_correctness(0.2, Label::Negative), -0.2);
        assert_eq!(signed_correctness(0.0, Label::Positive), 0.0);
        assert_eq!(predict(0.0), Label::Negative);
        assert!(Label::try_from(2u8).is_err());
    }

    proptest! {
        #[test]
        fn normalized_has_unit_norm(v in proptest::collection::vec(-10.0f64..10.0, 2..32)) {
            prop_assume!(norm(&v) > 1e-6);
            prop_assert!((norm(unit(v).as_slice()) - 1.0).abs() < 1e-6);
        }

        #[test]
        fn decisions_scale_invariant(v in proptest::collection::vec(-1.0f64..1.0, 4), s in 0.01f64..100.0) {
            prop_assume!(norm(&v) > 1e-3);
            let p = build_prototypes(&[
                vec![unit(vec![1.0, 0.2, 0.0, 0.1])],
                vec![unit(vec![0.0, 1.0, 0.3, 0.0])],
            ]).unwrap();
            let a = margin(&unit(v.clone()), &p).unwrap();
            let b = margin(&unit(v.iter().map(|x| x * s).collect()), &p).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert_eq!(predict(a), predict(b));
        }
    }
}
