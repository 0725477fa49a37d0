//! Campaign configuration, read from TOML.

use std::fs;
use std::path::{Path, PathBuf};

use chainshift_core::repair::RepairConfig;
use chainshift_core::search::{AttackSettings, Optimizer, ParamKind, DEFAULT_BUDGET};
use chainshift_core::{Family, Modality};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, IoContext, Result};
use crate::protocol::Endpoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Seeded phantoms: `n` per listed modality.
    Phantoms { n: usize, seed: u64, modalities: Vec<Modality> },
    /// A CSV `id,path,label`; relative paths resolve against the CSV's directory.
    Labels {
        path: PathBuf,
        #[serde(default)]
        modality: Option<Modality>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScorerConfig {
    Synthetic {
        seed: u64,
        #[serde(default = "default_dim")]
        dim: usize,
    },
    /// The toy student encoder (the repair target).
    Student { seed: u64 },
    External { endpoint: Endpoint },
}

fn default_dim() -> usize {
    64
}

/// Prompt sets for scorers without built-in prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptConfig {
    pub negative: Vec<String>,
    pub positive: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverrideConfig {
    pub name: String,
    #[serde(flatten)]
    pub kind: ParamKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub taus: Vec<f64>,
    pub optimizer: Optimizer,
    pub budget: usize,
    pub families: Vec<Family>,
    pub overrides: Vec<OverrideConfig>,
    pub record_trace: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            taus: vec![0.9, 0.8],
            optimizer: Optimizer::Tpe,
            budget: DEFAULT_BUDGET,
            families: Family::ALL.to_vec(),
            overrides: Vec::new(),
            record_trace: false,
        }
    }
}

impl AttackConfig {
    pub fn settings(&self, tau: f64) -> AttackSettings {
        let mut s = AttackSettings::new(tau, self.optimizer, self.budget, &self.families);
        s.overrides = self.overrides.iter().map(|o| (o.name.clone(), o.kind.clone())).collect();
        s.record_trace = self.record_trace;
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepairSection {
    #[serde(flatten)]
    pub config: RepairConfig,
    pub teacher_seed: u64,
    /// Clean phantoms used for training.
    pub train_n: usize,
    pub train_seed: u64,
    pub modality: Modality,
}

impl Default for RepairSection {
    fn default() -> Self {
        Self { config: RepairConfig::default(), teacher_seed: 1, train_n: 200, train_seed: 11, modality: Modality::XrayLike }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub scorer: ScorerConfig,
    #[serde(default)]
    pub prompts: Option<PromptConfig>,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub repair: RepairSection,
}

fn default_workers() -> usize {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("chainshift-out")
}

impl CampaignConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HarnessError::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let mut cfg = Self::from_toml(&text).map_err(|e| HarnessError::config(format!("{}: {e}", path.display())))?;
        if let DatasetConfig::Labels { path: labels, .. } = &mut cfg.dataset {
            if labels.is_relative() {
                *labels = path.parent().unwrap_or(Path::new(".")).join(&*labels);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(HarnessError::config("workers must be at least 1"));
        }
        if self.attack.taus.is_empty() {
            return Err(HarnessError::config("no plausibility thresholds given"));
        }
        for &tau in &self.attack.taus {
            self.attack.settings(tau).validate()?;
        }
        if let DatasetConfig::Phantoms { n, modalities, .. } = &self.dataset {
            if *n == 0 || n % 2 != 0 || modalities.is_empty() {
                return Err(HarnessError::config("phantom source needs an even n ≥ 2 and at least one modality"));
            }
        }
        if let Some(p) = &self.prompts {
            if p.negative.is_empty() || p.positive.is_empty() {
                return Err(HarnessError::config("each prompt class needs at least one prompt"));
            }
        }
        self.repair.config.validate()?;
        Ok(())
    }
}

/// Parses a comma-separated family list such as `A,R,D` or `all`.
pub fn parse_families(list: &str) -> Result<Vec<Family>> {
    if list.trim() == "all" {
        return Ok(Family::ALL.to_vec());
    }
    let families = list.split(',').map(|f| Family::parse(f.trim())).collect::<chainshift_core::Result<Vec<_>>>()?;
    if families.is_empty() {
        return Err(HarnessError::config("family subset is empty"));
    }
    Ok(families)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
seed = 3
[dataset]
source = "phantoms"
n = 10
seed = 7
modalities = ["xray-like"]
[scorer]
kind = "synthetic"
seed = 2024
[attack]
taus = [0.8]
optimizer = "random"
budget = 5
families = ["A", "ARD"]
[[attack.overrides]]
name = "d.quality"
kind = "integer"
lo = 90
hi = 95
"#;

    #[test]
    fn parses_and_roundtrips() {
        let cfg = CampaignConfig::from_toml(SAMPLE).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.attack.families, [Family::A, Family::ARD]);
        assert_eq!(cfg.attack.overrides[0].kind, ParamKind::Integer { lo: 90, hi: 95 });
        assert_eq!(CampaignConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(CampaignConfig::from_toml(&SAMPLE.replace("seed = 3", "sed = 3")).is_err());
        let mut cfg = CampaignConfig::from_toml(SAMPLE).unwrap();
        cfg.attack.families.clear();
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
        let mut cfg = CampaignConfig::from_toml(SAMPLE).unwrap();
        cfg.attack.taus = vec![1.5];
        assert!(cfg.validate().is_err());
        assert!(parse_families("A,Q").is_err());
        assert_eq!(parse_families("A∘R, d").unwrap(), [Family::AR, Family::D]);
    }
}
