//! Corpora: manifests, the synthetic generator, and speaker-disjoint folds.

mod folds;
mod ravdess;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dsp::{load_wav, write_wav, Waveform};
use crate::error::{Error, Result};

pub use folds::{make_folds, read_fold_plan, write_fold_plan, FoldPlan};
pub use ravdess::{ravdess_label, ravdess_manifest, ravdess_records, RAVDESS_CLASSES};
pub use synthetic::{generate_synthetic_corpus, ClassTemplate, SyntheticSpec, CLASS_NAMES};

/// One utterance; `label` indexes [`CorpusManifest::classes`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub utterance_id: String,
    pub speaker_id: String,
    pub label: usize,
    /// Audio path relative to the corpus root.
    pub relpath: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CorpusManifest {
    pub classes: Vec<String>,
    pub records: Vec<Record>,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    utterance_id: String,
    speaker_id: String,
    label: String,
    relpath: String,
}

/// Result of reading a manifest, with non-fatal findings.
#[derive(Clone, Debug)]
pub struct Ingested {
    pub manifest: CorpusManifest,
    pub warnings: Vec<String>,
}

impl CorpusManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn speakers(&self) -> Vec<String> {
        self.records.iter().map(|r| r.speaker_id.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Unique ids and in-range labels.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let dups: BTreeSet<&str> = self.records.iter().filter(|r| !seen.insert(&r.utterance_id)).map(|r| r.utterance_id.as_str()).collect();
        if !dups.is_empty() {
            return Err(Error::Data(format!("duplicate utterance ids: {}", dups.into_iter().collect::<Vec<_>>().join(", "))));
        }
        if let Some(r) = self.records.iter().find(|r| r.label >= self.classes.len()) {
            return Err(Error::Data(format!("{}: label index {} outside {} classes", r.utterance_id, r.label, self.classes.len())));
        }
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(CsvRow {
                utterance_id: r.utterance_id.clone(),
                speaker_id: r.speaker_id.clone(),
                label: self.classes[r.label].clone(),
                relpath: r.relpath.clone(),
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Subset by record index.
    pub fn select(&self, indices: &[usize]) -> CorpusManifest {
        CorpusManifest { classes: self.classes.clone(), records: indices.iter().map(|&i| self.records[i].clone()).collect() }
    }
}

/// Reads a manifest CSV (`utterance_id, speaker_id, label, relpath`) and
/// checks every referenced file under `audio_root`. With `classes` given,
/// labels outside it are errors; otherwise the class set is the sorted set
/// of labels found.
pub fn ingest_manifest(csv_path: impl AsRef<Path>, audio_root: impl AsRef<Path>, classes: Option<&[String]>) -> Result<Ingested> {
    let csv_path = csv_path.as_ref();
    let text = fs::read_to_string(csv_path).map_err(|e| Error::io(csv_path, e))?;
    let mut warnings = Vec::new();
    let mut rows = Vec::new();
    if !text.trim().is_empty() {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = r.headers()?.clone();
        for col in ["utterance_id", "speaker_id", "label", "relpath"] {
            if !headers.iter().any(|h| h == col) {
                return Err(Error::Data(format!("{}: missing column {col:?}", csv_path.display())));
            }
        }
        for row in r.deserialize() {
            let row: CsvRow = row?;
            rows.push(row);
        }
    }
    if rows.is_empty() {
        warnings.push(format!("{}: manifest is empty", csv_path.display()));
    }

    let classes: Vec<String> = match classes {
        Some(c) => c.to_vec(),
        None => rows.iter().map(|r| r.label.clone()).collect::<BTreeSet<_>>().into_iter().collect(),
    };
    let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let unknown: Vec<String> = rows.iter().filter(|r| !index.contains_key(r.label.as_str())).map(|r| format!("{} ({})", r.utterance_id, r.label)).collect();
    if !unknown.is_empty() {
        return Err(Error::Data(format!("unknown labels: {}", unknown.join(", "))));
    }
    let manifest = CorpusManifest {
        records: rows
            .iter()
            .map(|r| Record {
                utterance_id: r.utterance_id.clone(),
                speaker_id: r.speaker_id.clone(),
                label: index[r.label.as_str()],
                relpath: r.relpath.clone(),
            })
            .collect(),
        classes: classes.clone(),
    };
    manifest.validate()?;
    let root = audio_root.as_ref();
    let missing: Vec<String> = manifest.records.iter().map(|r| root.join(&r.relpath)).filter(|p| !p.is_file()).map(|p| p.display().to_string()).collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("missing audio files: {}", missing.join(", "))));
    }
    Ok(Ingested { manifest, warnings })
}

/// Loads record audio at 16 kHz.
pub fn load_audio(root: impl AsRef<Path>, record: &Record) -> Result<Waveform> {
    load_wav(root.as_ref().join(&record.relpath))
}

/// Writes the corpus as PCM-16 WAVs plus `manifest.csv` under `dir`.
pub fn write_corpus(dir: impl AsRef<Path>, manifest: &CorpusManifest, waves: &[Waveform]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    for (r, w) in manifest.records.iter().zip(waves) {
        let path = dir.join(&r.relpath);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_wav(&path, w)?;
    }
    let csv = dir.join("manifest.csv");
    manifest.write_csv(&csv)?;
    Ok(csv)
}
