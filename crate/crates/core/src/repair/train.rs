use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::adapter::AdapterW;
use super::encoder::TokenEncoder;
use super::loss::{batch_evaluate, RepairExample, TeacherGuide};
use super::RepairConfig;
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::scoring::{predict, ClassPrototypes, Label, MarginModel, Modality, PhantomSample};
use crate::seed;

/// Allowed increase of the epoch loss before the step is retried.
pub const DESCENT_TOLERANCE: f64 = 1e-6;
pub const MAX_HALVINGS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedAdapter {
    pub w: AdapterW,
    /// Total loss at `W = 0` followed by the loss after each epoch.
    pub trace: Vec<f64>,
    pub final_learning_rate: f64,
}

/// Full-batch gradient descent from `W = 0`; the step size is halved whenever
/// an epoch would raise the loss, at most [`MAX_HALVINGS`] times overall.
pub fn train_on_examples(examples: &[RepairExample], protos: &ClassPrototypes, cfg: &RepairConfig) -> Result<TrainedAdapter> {
    cfg.validate()?;
    let d = examples.first().ok_or_else(|| Error::param("clean set is empty"))?.dim();
    let mut w = AdapterW::zeros(d);
    let (parts, grads) = batch_evaluate(examples, &w, protos, cfg, cfg.epochs > 0)?;
    let mut loss = parts.total(cfg);
    let mut trace = alloc::vec![loss];
    let mut grad = grads.map(|g| g.total(cfg));
    let mut lr = cfg.learning_rate;
    let mut halvings = 0;
    for epoch in 0..cfg.epochs {
        let g = grad.as_ref().expect("gradients are computed while epochs remain");
        loop {
            let mut cand = w.clone();
            cand.as_mut_slice().iter_mut().zip(g).for_each(|(v, gi)| *v -= lr * gi);
            let (parts, grads) = batch_evaluate(examples, &cand, protos, cfg, epoch + 1 < cfg.epochs)?;
            let next = parts.total(cfg);
            if next.is_finite() && next <= loss + DESCENT_TOLERANCE {
                w = cand;
                loss = next;
                grad = grads.map(|g| g.total(cfg));
                break;
            }
            if halvings == MAX_HALVINGS {
                return Err(Error::Training { epoch, halvings, trace });
            }
            halvings += 1;
            lr *= 0.5;
        }
        trace.push(loss);
    }
    Ok(TrainedAdapter { w, trace, final_learning_rate: lr })
}

/// Precomputes repair examples from clean phantoms and trains the adapter.
/// View seeds derive from `seed` and each sample id.
pub fn train_adapter(
    clean_set: &[PhantomSample],
    student: &TokenEncoder,
    teacher: &TeacherGuide,
    protos: &ClassPrototypes,
    cfg: &RepairConfig,
    seed: u64,
) -> Result<TrainedAdapter> {
    if clean_set.is_empty() {
        return Err(Error::param("clean set is empty"));
    }
    let examples = clean_set
        .iter()
        .map(|p| {
            let base = seed::derive(seed, seed::hash_str(&p.id));
            RepairExample::new(student, teacher, &p.image, p.label, [seed::derive(base, 1), seed::derive(base, 2)])
        })
        .collect::<Result<Vec<_>>>()?;
    train_on_examples(&examples, protos, cfg)
}

/// One archived sample: its clean image and the stored adversarial output.
#[derive(Debug, Clone)]
pub struct RepairItem {
    pub sample_id: String,
    pub modality: Option<Modality>,
    pub label: Label,
    pub clean: ImageBuffer,
    pub adversarial: ImageBuffer,
}

/// Accuracies (fractions) before and after adaptation for one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairRow {
    /// Modality tag, `untagged`, or `all`.
    pub group: String,
    pub count: usize,
    pub clean_before: f64,
    pub clean_after: f64,
    pub adv_before: f64,
    pub adv_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepairReport {
    /// Per-modality rows in tag order, then the overall row.
    pub rows: Vec<RepairRow>,
    /// Archive entries that could not be evaluated.
    pub missing: Vec<String>,
}

impl RepairReport {
    pub fn overall(&self) -> &RepairRow {
        self.rows.last().expect("report always has an overall row")
    }
}

#[derive(Default, Clone, Copy)]
struct Tally {
    n: usize,
    hits: [usize; 4],
}

impl Tally {
    fn row(&self, group: String) -> RepairRow {
        let f = |k: usize| if self.n == 0 { f64::NAN } else { self.hits[k] as f64 / self.n as f64 };
        RepairRow { group, count: self.n, clean_before: f(0), clean_after: f(1), adv_before: f(2), adv_after: f(3) }
    }
}

/// Scores archived clean/adversarial pairs with the unadapted and adapted
/// models. `missing` lists entries the caller could not load.
pub fn evaluate_repair(
    items: &[RepairItem],
    before: &dyn MarginModel,
    after: &dyn MarginModel,
    missing: Vec<String>,
) -> Result<RepairReport> {
    let mut groups: BTreeMap<String, Tally> = BTreeMap::new();
    let mut all = Tally::default();
    for item in items {
        let correct = |m: &dyn MarginModel, x: &ImageBuffer| -> Result<bool> { Ok(predict(m.margin(x)?) == item.label) };
        let hits = [
            correct(before, &item.clean)?,
            correct(after, &item.clean)?,
            correct(before, &item.adversarial)?,
            correct(after, &item.adversarial)?,
        ];
        let key = item.modality.map_or_else(|| "untagged".to_string(), |m| m.tag().to_string());
        for t in [groups.entry(key).or_default(), &mut all] {
            t.n += 1;
            hits.iter().enumerate().filter(|(_, h)| **h).for_each(|(k, _)| t.hits[k] += 1);
        }
    }
    let mut rows: Vec<RepairRow> = groups.into_iter().map(|(g, t)| t.row(g)).collect();
    rows.push(all.row("all".into()));
    Ok(RepairReport { rows, missing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::repair::encoder::{teacher_encoder, STUDENT_DIM};
    use crate::repair::StudentScorer;
    use crate::scoring::{gen_phantoms, ZeroShotClassifier};

    fn setup() -> (StudentScorer, TeacherGuide, ClassPrototypes, Vec<PhantomSample>) {
        let scorer = StudentScorer::frozen(4);
        let guide = TeacherGuide::new(teacher_encoder(5), STUDENT_DIM, 6);
        let protos = scorer.prototypes(Modality::XrayLike).unwrap();
        (scorer, guide, protos, gen_phantoms(8, 3, Modality::XrayLike).unwrap())
    }

    #[test]
    fn zero_epochs_keep_identity() {
        let (scorer, guide, protos, set) = setup();
        let cfg = RepairConfig { epochs: 0, ..RepairConfig::default() };
        let out = train_adapter(&set, scorer.encoder(), &guide, &protos, &cfg, 1).unwrap();
        assert_eq!(out.w, AdapterW::zeros(STUDENT_DIM));
        assert_eq!(out.trace.len(), 1);
        assert!(train_adapter(&[], scorer.encoder(), &guide, &protos, &cfg, 1).is_err());
    }

    #[test]
    fn descent_is_monotone_and_deterministic() {
        let (scorer, guide, protos, set) = setup();
        let cfg = RepairConfig { epochs: 6, ..RepairConfig::default() };
        let a = train_adapter(&set, scorer.encoder(), &guide, &protos, &cfg, 1).unwrap();
        assert!(a.trace.windows(2).all(|w| w[1] <= w[0] + DESCENT_TOLERANCE), "{:?}", a.trace);
        assert!(a.trace.last() <= a.trace.first());
        let b = train_adapter(&set, scorer.encoder(), &guide, &protos, &cfg, 1).unwrap();
        let bytes = |w: &AdapterW| w.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bytes(&a.w), bytes(&b.w));
    }

    #[test]
    fn zero_adapter_reproduces_baseline() {
        let (scorer, _, _, set) = setup();
        let adapted = scorer.with_adapter(AdapterW::zeros(STUDENT_DIM)).unwrap();
        let prompts = [scorer.prototypes(Modality::XrayLike).unwrap()];
        let before = ZeroShotClassifier::new(&scorer, prompts[0].clone()).unwrap();
        let after = ZeroShotClassifier::new(&adapted, prompts[0].clone()).unwrap();
        for p in &set {
            assert_eq!(before.margin(&p.image).unwrap().to_bits(), after.margin(&p.image).unwrap().to_bits());
        }
        let items: Vec<_> = set
            .iter()
            .map(|p| RepairItem {
                sample_id: p.id.clone(),
                modality: Some(p.modality),
                label: p.label,
                clean: p.image.clone(),
                adversarial: p.image.clone(),
            })
            .collect();
        let report = evaluate_repair(&items, &before, &after, alloc::vec!["gone".into()]).unwrap();
        let all = report.overall();
        assert_eq!((all.count, all.clean_before, all.adv_before), (8, all.clean_after, all.adv_after));
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.missing, ["gone"]);
    }
}
