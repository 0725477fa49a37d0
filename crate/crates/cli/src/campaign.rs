//! Running attack campaigns over a dataset with a worker pool.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use chainshift_core::repair::StudentScorer;
use chainshift_core::scoring::synthetic_scorer;
use chainshift_core::search::{attack_sample, AttackRecord};
use chainshift_core::{seed, Modality, Scorer, ZeroShotClassifier};

use crate::archive::{ArchiveMeta, ArchiveWriter, EncodedSample};
use crate::config::{CampaignConfig, PromptConfig, ScorerConfig};
use crate::dataset::{ingest, Sample};
use crate::error::{HarnessError, Result};
use crate::protocol::ExternalScorer;

pub fn build_scorer(cfg: &ScorerConfig) -> Result<Box<dyn Scorer>> {
    Ok(match cfg {
        ScorerConfig::Synthetic { seed, dim } => Box::new(synthetic_scorer(*seed, *dim)?),
        ScorerConfig::Student { seed } => Box::new(StudentScorer::frozen(*seed)),
        ScorerConfig::External { endpoint } => {
            Box::new(ExternalScorer::connect(endpoint.clone()).map_err(|e| HarnessError::Scorer(e.to_string()))?)
        }
    })
}

/// One zero-shot classifier per modality present in the dataset.
pub struct Classifiers<'a> {
    models: BTreeMap<Option<Modality>, ZeroShotClassifier<'a>>,
}

impl<'a> Classifiers<'a> {
    /// Explicit prompts win; otherwise the scorer's own prompts for each
    /// modality are used. Untagged samples need explicit prompts.
    pub fn build(
        scorer: &'a dyn Scorer,
        prompts: Option<&PromptConfig>,
        modalities: impl IntoIterator<Item = Option<Modality>>,
    ) -> Result<Self> {
        let mut models = BTreeMap::new();
        for m in modalities {
            if models.contains_key(&m) {
                continue;
            }
            let sets = match (prompts, m) {
                (Some(p), _) => [p.negative.clone(), p.positive.clone()],
                (None, Some(m)) => scorer.default_prompts(m).ok_or_else(|| {
                    HarnessError::config(format!("scorer {} has no prompts for {}; set [prompts]", scorer.name(), m.tag()))
                })?,
                (None, None) => return Err(HarnessError::config("untagged samples need an explicit [prompts] section")),
            };
            models.insert(m, ZeroShotClassifier::from_prompts(scorer, &sets)?);
        }
        Ok(Self { models })
    }

    pub fn for_sample(&self, modality: Option<Modality>) -> &ZeroShotClassifier<'a> {
        &self.models[&modality]
    }
}

/// Per-sample seed: the campaign seed mixed with a hash of the sample id.
pub fn sample_seed(master: u64, id: &str) -> u64 {
    seed::derive(master, seed::hash_str(id))
}

/// Attacks in canonical order (threshold list order, then sample id).
#[derive(Debug)]
pub struct CampaignRun {
    pub samples: Vec<EncodedSample>,
    /// Jobs that never produced a result.
    pub missing: usize,
    pub failure: Option<HarnessError>,
}

impl CampaignRun {
    pub fn complete(&self) -> bool {
        self.missing == 0 && self.failure.is_none()
    }

    pub fn records(&self) -> Vec<AttackRecord> {
        self.samples.iter().map(|s| s.record.clone()).collect()
    }
}

/// Runs every `(tau, sample)` job. The first failure stops further jobs from
/// starting; finished jobs are kept so a partial archive can be written.
pub fn run_attacks(cfg: &CampaignConfig, samples: &[Sample], models: &Classifiers) -> CampaignRun {
    let jobs: Vec<(f64, &Sample)> = cfg.attack.taus.iter().flat_map(|&t| samples.iter().map(move |s| (t, s))).collect();
    let slots: Mutex<Vec<Option<Result<EncodedSample>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let run_job = |(tau, s): (f64, &Sample)| -> Result<EncodedSample> {
        let model = models.for_sample(s.modality);
        let settings = cfg.attack.settings(tau);
        let out = attack_sample(&s.id, &s.image, s.label, model, &settings, sample_seed(cfg.seed, &s.id))?;
        let mut record = out.record;
        record.modality = s.modality;
        EncodedSample::new(record, &s.image, &out.adversarial, model)
    };
    std::thread::scope(|scope| {
        for _ in 0..cfg.workers.min(jobs.len()).max(1) {
            scope.spawn(|| {
                while !abort.load(Ordering::Relaxed) {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(&job) = jobs.get(i) else { break };
                    let result = run_job(job);
                    if result.is_err() {
                        abort.store(true, Ordering::Relaxed);
                    }
                    slots.lock().expect("slot lock")[i] = Some(result);
                }
            });
        }
    });
    let mut run = CampaignRun { samples: Vec::new(), missing: 0, failure: None };
    for slot in slots.into_inner().expect("slot lock") {
        match slot {
            Some(Ok(s)) => run.samples.push(s),
            Some(Err(e)) => {
                run.missing += 1;
                run.failure.get_or_insert(e);
            }
            None => run.missing += 1,
        }
    }
    run
}

/// Ingests, attacks and archives. A failed campaign still writes the
/// finished records, flagged incomplete, before the error is returned.
pub fn run_campaign(cfg: &CampaignConfig, scorer: &dyn Scorer, archive_dir: &Path) -> Result<(CampaignRun, ArchiveMeta)> {
    cfg.validate()?;
    let samples = ingest(&cfg.dataset)?;
    let models = Classifiers::build(scorer, cfg.prompts.as_ref(), samples.iter().map(|s| s.modality))?;
    let mut run = run_attacks(cfg, &samples, &models);
    let mut writer = ArchiveWriter::create(archive_dir, scorer.name(), Some(cfg.clone()))?;
    for s in &run.samples {
        writer.append(s)?;
    }
    let note = run.failure.as_ref().map(|e| format!("stopped after failure: {e}"));
    let meta = writer.finish(run.complete(), note)?;
    if let Some(e) = run.failure.take() {
        return Err(match e {
            HarnessError::Core(chainshift_core::Error::Scorer(msg)) => HarnessError::Scorer(msg),
            other => other,
        });
    }
    Ok((run, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::read_archive;
    use chainshift_core::search::Optimizer;
    use chainshift_core::{Embedding, Family, ImageBuffer};

    fn config(workers: usize) -> CampaignConfig {
        let mut cfg = CampaignConfig::from_toml(
            "[dataset]\nsource = \"phantoms\"\nn = 4\nseed = 9\nmodalities = [\"xray-like\"]\n[scorer]\nkind = \"synthetic\"\nseed = 2024\n",
        )
        .unwrap();
        cfg.workers = workers;
        cfg.attack.taus = vec![0.8];
        cfg.attack.optimizer = Optimizer::Random;
        cfg.attack.budget = 3;
        cfg.attack.families = vec![Family::A, Family::D];
        cfg
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let scorer = build_scorer(&config(1).scorer).unwrap();
        let samples = ingest(&config(1).dataset).unwrap();
        let models = Classifiers::build(scorer.as_ref(), None, samples.iter().map(|s| s.modality)).unwrap();
        let a = run_attacks(&config(1), &samples, &models);
        let b = run_attacks(&config(3), &samples, &models);
        assert!(a.complete() && b.complete());
        assert_eq!(a.records(), b.records());
        assert!(a.records().windows(2).all(|w| w[0].sample_id < w[1].sample_id));
    }

    /// Fails on every image embedding after the first `ok` calls.
    struct Flaky {
        inner: chainshift_core::SyntheticScorer,
        calls: AtomicUsize,
        ok: usize,
    }

    impl Scorer for Flaky {
        fn name(&self) -> &str {
            "flaky"
        }
        fn dim(&self) -> usize {
            self.inner.dim()
        }
        fn embed_image(&self, img: &ImageBuffer) -> chainshift_core::Result<Embedding> {
            if self.calls.fetch_add(1, Ordering::Relaxed) >= self.ok {
                return Err(chainshift_core::Error::Scorer("backend went away".into()));
            }
            self.inner.embed_image(img)
        }
        fn embed_texts(&self, texts: &[String]) -> chainshift_core::Result<Vec<Embedding>> {
            self.inner.embed_texts(texts)
        }
        fn default_prompts(&self, m: Modality) -> Option<[Vec<String>; 2]> {
            self.inner.default_prompts(m)
        }
    }

    #[test]
    fn scorer_failure_leaves_partial_archive() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(1);
        let scorer = Flaky { inner: synthetic_scorer(2024, 64).unwrap(), calls: AtomicUsize::new(0), ok: 12 };
        let err = run_campaign(&cfg, &scorer, dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 4, "{err}");
        let archive = read_archive(dir.path()).unwrap();
        assert!(!archive.meta.complete);
        assert!(archive.entries.len() < 4);
        assert!(archive.meta.note.unwrap().contains("backend went away"));
    }

    #[test]
    fn untagged_samples_need_prompts() {
        let scorer = synthetic_scorer(1, 16).unwrap();
        assert!(matches!(Classifiers::build(&scorer, None, [None]), Err(HarnessError::Config(_))));
        let p = PromptConfig { negative: vec!["phantom:xray-like:0:0".into()], positive: vec!["phantom:xray-like:1:0".into()] };
        assert!(Classifiers::build(&scorer, Some(&p), [None]).is_ok());
    }
}
