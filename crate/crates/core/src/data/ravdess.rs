//! Labels from RAVDESS-style file names:
//! `modality-channel-emotion-intensity-statement-repetition-actor.wav`.

use std::fs;
use std::path::Path;

use super::{CorpusManifest, Record};
use crate::error::{Error, Result};

pub const RAVDESS_CLASSES: [&str; 8] = ["neutral", "calm", "happy", "sad", "angry", "fearful", "disgust", "surprised"];

/// `(class index, speaker id)` encoded in a file name.
pub fn ravdess_label(file_name: &str) -> Result<(usize, String)> {
    let stem = file_name.strip_suffix(".wav").unwrap_or(file_name);
    let fields: Vec<&str> = stem.split('-').collect();
    let bad = || Error::Data(format!("{file_name}: expected seven two-digit fields like 03-01-05-01-02-01-12.wav"));
    if fields.len() != 7 || fields.iter().any(|f| f.len() != 2 || !f.bytes().all(|b| b.is_ascii_digit())) {
        return Err(bad());
    }
    let emotion: usize = fields[2].parse().map_err(|_| bad())?;
    if !(1..=8).contains(&emotion) {
        return Err(Error::Data(format!("{file_name}: emotion code {emotion} outside 01..08")));
    }
    Ok((emotion - 1, format!("actor{}", fields[6])))
}

/// Records for relative paths whose file names follow the RAVDESS scheme.
pub fn ravdess_records<S: AsRef<str>>(relpaths: &[S]) -> Result<CorpusManifest> {
    let mut records = Vec::with_capacity(relpaths.len());
    for rel in relpaths {
        let rel = rel.as_ref();
        let name = rel.rsplit('/').next().unwrap_or(rel);
        let (label, speaker_id) = ravdess_label(name)?;
        records.push(Record { utterance_id: name.trim_end_matches(".wav").to_string(), speaker_id, label, relpath: rel.to_string() });
    }
    let m = CorpusManifest { classes: RAVDESS_CLASSES.iter().map(|s| s.to_string()).collect(), records };
    m.validate()?;
    Ok(m)
}

/// Scans `root` (one directory level of actor folders, or flat) for `.wav` files.
pub fn ravdess_manifest(root: impl AsRef<Path>) -> Result<CorpusManifest> {
    let root = root.as_ref();
    let mut rel = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "wav") {
                let r = path.strip_prefix(root).expect("under root");
                rel.push(r.to_string_lossy().replace('\\', "/"));
            }
        }
    }
    rel.sort();
    ravdess_records(&rel)
}
