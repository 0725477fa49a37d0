//! Attack archives: a directory holding `archive.json`, a JSON-lines
//! manifest and 16-bit PNGs of every clean and adversarial image.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chainshift_core::search::AttackRecord;
use chainshift_core::{ImageBuffer, MarginModel};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::CampaignConfig;
use crate::error::{HarnessError, IoContext, Result};
use crate::png_io::{decode_png, encode_png16, read_png};

pub const SCHEMA: u32 = 1;
pub const META_FILE: &str = "archive.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const IMAGE_DIR: &str = "images";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub schema: u32,
    #[serde(flatten)]
    pub record: AttackRecord,
    /// Paths relative to the archive root.
    pub clean_png: String,
    pub adv_png: String,
    pub clean_sha256: String,
    pub adv_sha256: String,
    /// `J` re-evaluated on the decoded adversarial PNG.
    pub j_adv_decoded: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveMeta {
    pub schema: u32,
    pub complete: bool,
    pub records: usize,
    pub scorer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<CampaignConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Both images of one sample, encoded and scored, ready to be written.
#[derive(Debug, Clone)]
pub struct EncodedSample {
    pub record: AttackRecord,
    pub clean_png: Vec<u8>,
    pub adv_png: Vec<u8>,
    pub j_adv_decoded: f64,
}

impl EncodedSample {
    /// Encodes both images and re-scores the decoded adversarial PNG.
    pub fn new(record: AttackRecord, clean: &ImageBuffer, adv: &ImageBuffer, model: &dyn MarginModel) -> Result<Self> {
        let clean_png = encode_png16(clean);
        let adv_png = encode_png16(adv);
        let decoded = decode_png(&adv_png).map_err(HarnessError::format)?;
        let j_adv_decoded = model.signed_correctness(&decoded, record.label)?;
        Ok(Self { record, clean_png, adv_png, j_adv_decoded })
    }
}

fn file_stem(record: &AttackRecord) -> String {
    let id: String =
        record.sample_id.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect();
    format!("{id}_t{:.2}", record.tau)
}

pub struct ArchiveWriter {
    root: PathBuf,
    manifest: BufWriter<File>,
    meta: ArchiveMeta,
}

impl ArchiveWriter {
    /// Starts a fresh archive; it stays flagged incomplete until [`finish`](Self::finish).
    pub fn create(root: &Path, scorer: &str, config: Option<CampaignConfig>) -> Result<Self> {
        fs::create_dir_all(root.join(IMAGE_DIR)).at(root)?;
        let meta = ArchiveMeta { schema: SCHEMA, complete: false, records: 0, scorer: scorer.into(), config, note: None };
        write_meta(root, &meta)?;
        let path = root.join(MANIFEST_FILE);
        let manifest = BufWriter::new(File::create(&path).at(&path)?);
        Ok(Self { root: root.to_path_buf(), manifest, meta })
    }

    pub fn append(&mut self, sample: &EncodedSample) -> Result<ManifestEntry> {
        let stem = file_stem(&sample.record);
        let clean_png = format!("{IMAGE_DIR}/{stem}_clean.png");
        let adv_png = format!("{IMAGE_DIR}/{stem}_adv.png");
        for (rel, bytes) in [(&clean_png, &sample.clean_png), (&adv_png, &sample.adv_png)] {
            let path = self.root.join(rel);
            fs::write(&path, bytes).at(&path)?;
        }
        let entry = ManifestEntry {
            schema: SCHEMA,
            record: sample.record.clone(),
            clean_png,
            adv_png,
            clean_sha256: sha256_hex(&sample.clean_png),
            adv_sha256: sha256_hex(&sample.adv_png),
            j_adv_decoded: sample.j_adv_decoded,
        };
        let line = serde_json::to_string(&entry).map_err(|e| HarnessError::format(e.to_string()))?;
        let path = self.root.join(MANIFEST_FILE);
        writeln!(self.manifest, "{line}").at(&path)?;
        self.meta.records += 1;
        Ok(entry)
    }

    pub fn finish(mut self, complete: bool, note: Option<String>) -> Result<ArchiveMeta> {
        let path = self.root.join(MANIFEST_FILE);
        self.manifest.flush().at(&path)?;
        self.meta.complete = complete;
        self.meta.note = note;
        write_meta(&self.root, &self.meta)?;
        Ok(self.meta)
    }
}

fn write_meta(root: &Path, meta: &ArchiveMeta) -> Result<()> {
    let path = root.join(META_FILE);
    let text = serde_json::to_string_pretty(meta).map_err(|e| HarnessError::format(e.to_string()))?;
    fs::write(&path, text + "\n").at(&path)
}

#[derive(Debug, Clone)]
pub struct Archive {
    pub root: PathBuf,
    pub meta: ArchiveMeta,
    pub entries: Vec<ManifestEntry>,
    /// Manifest lines that failed to parse, with 1-based line numbers.
    pub corrupt: Vec<(usize, String)>,
}

impl Archive {
    pub fn records(&self) -> Vec<AttackRecord> {
        self.entries.iter().map(|e| e.record.clone()).collect()
    }

    pub fn image(&self, rel: &str) -> Result<ImageBuffer> {
        read_png(&self.root.join(rel))
    }
}

/// Reads an archive; unparsable manifest lines are collected, not fatal.
pub fn read_archive(root: &Path) -> Result<Archive> {
    let meta_path = root.join(META_FILE);
    let meta_text = fs::read_to_string(&meta_path).at(&meta_path)?;
    let meta: ArchiveMeta =
        serde_json::from_str(&meta_text).map_err(|e| HarnessError::format(format!("{}: {e}", meta_path.display())))?;
    if meta.schema != SCHEMA {
        return Err(HarnessError::format(format!("unsupported archive schema {}", meta.schema)));
    }
    let manifest_path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).at(&manifest_path)?;
    let mut entries = Vec::new();
    let mut corrupt = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ManifestEntry>(line) {
            Ok(e) if e.schema == SCHEMA => entries.push(e),
            Ok(e) => corrupt.push((i + 1, format!("schema {} is not {SCHEMA}", e.schema))),
            Err(e) => corrupt.push((i + 1, e.to_string())),
        }
    }
    Ok(Archive { root: root.to_path_buf(), meta, entries, corrupt })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Verification {
    pub checked: usize,
    /// `(sample id, problem)` for missing files and hash mismatches.
    pub problems: Vec<(String, String)>,
    /// Largest `|J(decoded PNG) − J_adv|` seen.
    pub max_j_drift: f64,
}

impl Verification {
    pub fn ok(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Checks hashes, file presence and (with a model) the decoded-PNG objective.
pub fn verify_archive(archive: &Archive, model: Option<&dyn MarginModel>, j_tolerance: f64) -> Verification {
    let mut v = Verification::default();
    for e in &archive.entries {
        v.checked += 1;
        let id = &e.record.sample_id;
        for (rel, hash) in [(&e.clean_png, &e.clean_sha256), (&e.adv_png, &e.adv_sha256)] {
            match fs::read(archive.root.join(rel)) {
                Ok(bytes) if sha256_hex(&bytes) == *hash => {}
                Ok(_) => v.problems.push((id.clone(), format!("{rel}: hash mismatch"))),
                Err(err) => v.problems.push((id.clone(), format!("{rel}: {err}"))),
            }
        }
        let drift = (e.j_adv_decoded - e.record.j_adv).abs();
        v.max_j_drift = v.max_j_drift.max(drift);
        if drift > j_tolerance {
            v.problems.push((id.clone(), format!("recorded decoded J drifts by {drift:.3e}")));
        }
        if let Some(model) = model {
            match archive.image(&e.adv_png).and_then(|img| Ok(model.signed_correctness(&img, e.record.label)?)) {
                Ok(j) => {
                    let drift = (j - e.record.j_adv).abs();
                    v.max_j_drift = v.max_j_drift.max(drift);
                    if drift > j_tolerance {
                        v.problems.push((id.clone(), format!("re-scored J drifts by {drift:.3e}")));
                    }
                }
                Err(err) => v.problems.push((id.clone(), format!("re-scoring failed: {err}"))),
            }
        }
    }
    v
}
