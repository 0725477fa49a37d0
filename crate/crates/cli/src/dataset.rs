use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use chainshift_core::{gen_phantoms, ImageBuffer, Label, Modality};

use crate::config::DatasetConfig;
use crate::error::{HarnessError, Result};
use crate::png_io::read_png;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: Label,
    pub modality: Option<Modality>,
    pub image: ImageBuffer,
}

/// Loads every sample of `cfg`, sorted by id.
///
/// For a labels CSV all rows are checked first; any bad row aborts ingestion
/// with the full list of problems.
pub fn ingest(cfg: &DatasetConfig) -> Result<Vec<Sample>> {
    let mut samples = match cfg {
        DatasetConfig::Phantoms { n, seed, modalities } => {
            let mut out = Vec::new();
            for &m in modalities {
                out.extend(gen_phantoms(*n, *seed, m)?.into_iter().map(|p| Sample {
                    id: p.id,
                    label: p.label,
                    modality: Some(p.modality),
                    image: p.image,
                }));
            }
            out
        }
        DatasetConfig::Labels { path, modality } => read_labels(path, *modality)?,
    };
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(samples)
}

fn read_labels(path: &Path, modality: Option<Modality>) -> Result<Vec<Sample>> {
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::Reader::from_path(path).map_err(|e| HarnessError::config(format!("{}: {e}", path.display())))?;
    let headers = reader.headers().map_err(|e| HarnessError::config(format!("{}: {e}", path.display())))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "path", "label"] {
        return Err(HarnessError::config(format!("{}: header must be id,path,label", path.display())));
    }
    let mut samples = Vec::new();
    let mut problems = Vec::new();
    let mut seen = BTreeSet::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("line {line}: {e}"));
                continue;
            }
        };
        let (id, rel, label) = (&record[0], &record[1], &record[2]);
        if !seen.insert(id.to_string()) {
            problems.push(format!("line {line}: duplicate id {id}"));
            continue;
        }
        let label = match label.trim() {
            "0" => Label::Negative,
            "1" => Label::Positive,
            other => {
                problems.push(format!("line {line}: label {other:?} is not 0 or 1"));
                continue;
            }
        };
        let file: PathBuf = root.join(rel);
        match read_png(&file) {
            Ok(image) => samples.push(Sample { id: id.to_string(), label, modality, image }),
            Err(e) => problems.push(format!("line {line}: {e}")),
        }
    }
    if !problems.is_empty() {
        return Err(HarnessError::config(format!("{}: {} bad rows\n  {}", path.display(), problems.len(), problems.join("\n  "))));
    }
    Ok(samples)
}
