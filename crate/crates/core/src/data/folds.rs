use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::CorpusManifest;
use crate::error::{Error, Result};

/// Speaker partition for k-fold cross-validation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldPlan {
    pub folds: Vec<Vec<String>>,
}

impl FoldPlan {
    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }

    /// Record indices of fold `f`'s test speakers.
    pub fn test_indices(&self, m: &CorpusManifest, f: usize) -> Vec<usize> {
        let spk: BTreeSet<&str> = self.folds[f].iter().map(String::as_str).collect();
        (0..m.len()).filter(|&i| spk.contains(m.records[i].speaker_id.as_str())).collect()
    }

    /// Record indices of every other fold.
    pub fn train_indices(&self, m: &CorpusManifest, f: usize) -> Vec<usize> {
        let spk: BTreeSet<&str> = self.folds[f].iter().map(String::as_str).collect();
        (0..m.len()).filter(|&i| !spk.contains(m.records[i].speaker_id.as_str())).collect()
    }

    /// Errors if any speaker occurs on both sides of fold `f`.
    pub fn check_disjoint(m: &CorpusManifest, train: &[usize], test: &[usize]) -> Result<()> {
        let a: BTreeSet<&str> = train.iter().map(|&i| m.records[i].speaker_id.as_str()).collect();
        let shared: Vec<&str> = test.iter().map(|&i| m.records[i].speaker_id.as_str()).filter(|s| a.contains(s)).collect::<BTreeSet<_>>().into_iter().collect();
        if shared.is_empty() {
            Ok(())
        } else {
            Err(Error::Data(format!("speakers in both train and test: {}", shared.join(", "))))
        }
    }
}

/// Shuffles speakers by `seed` and deals them round-robin into `n_folds`.
pub fn make_folds(m: &CorpusManifest, n_folds: usize, seed: u64) -> Result<FoldPlan> {
    let mut speakers = m.speakers();
    if n_folds == 0 || speakers.len() < n_folds {
        return Err(Error::Data(format!("{} speakers cannot fill {n_folds} folds", speakers.len())));
    }
    speakers.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![Vec::new(); n_folds];
    for (i, s) in speakers.into_iter().enumerate() {
        folds[i % n_folds].push(s);
    }
    Ok(FoldPlan { folds })
}

/// CSV with columns `fold, speaker_id`.
pub fn write_fold_plan(plan: &FoldPlan, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["fold", "speaker_id"])?;
    for (f, spk) in plan.folds.iter().enumerate() {
        for s in spk {
            w.write_record([f.to_string(), s.clone()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_fold_plan(path: impl AsRef<Path>) -> Result<FoldPlan> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    let mut folds: Vec<Vec<String>> = Vec::new();
    for row in r.records() {
        let row = row?;
        let f: usize = row.get(0).unwrap_or("").parse().map_err(|_| Error::Data(format!("bad fold index in {:?}", row)))?;
        if folds.len() <= f {
            folds.resize(f + 1, Vec::new());
        }
        folds[f].push(row.get(1).unwrap_or("").to_string());
    }
    Ok(FoldPlan { folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Record;
    use proptest::prelude::*;

    fn manifest(speakers: usize, per: usize) -> CorpusManifest {
        CorpusManifest {
            classes: vec!["a".into(), "b".into()],
            records: (0..speakers * per)
                .map(|i| Record { utterance_id: format!("u{i}"), speaker_id: format!("s{}", i / per), label: i % 2, relpath: String::new() })
                .collect(),
        }
    }

    #[test]
    fn twenty_four_speakers_in_five_folds() {
        let plan = make_folds(&manifest(24, 3), 5, 0).unwrap();
        let mut sizes: Vec<_> = plan.folds.iter().map(Vec::len).collect();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, vec![5, 5, 5, 5, 4]);
        assert_eq!(plan, make_folds(&manifest(24, 3), 5, 0).unwrap());
    }

    #[test]
    fn too_few_speakers() {
        assert!(make_folds(&manifest(4, 3), 5, 0).is_err());
    }

    #[test]
    fn overlap_is_detected() {
        let m = manifest(5, 2);
        assert!(FoldPlan::check_disjoint(&m, &[0, 2], &[1]).is_err());
        assert!(FoldPlan::check_disjoint(&m, &[0, 1], &[2]).is_ok());
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let plan = make_folds(&manifest(12, 1), 5, 3).unwrap();
        let p = dir.path().join("folds.csv");
        write_fold_plan(&plan, &p).unwrap();
        assert_eq!(read_fold_plan(&p).unwrap(), plan);
    }

    proptest! {
        #[test]
        fn folds_partition_speakers(speakers in 5usize..40, per in 1usize..4, seed in any::<u64>()) {
            let m = manifest(speakers, per);
            let plan = make_folds(&m, 5, seed).unwrap();
            let mut seen = vec![0; m.len()];
            for f in 0..5 {
                let (train, test) = (plan.train_indices(&m, f), plan.test_indices(&m, f));
                prop_assert!(FoldPlan::check_disjoint(&m, &train, &test).is_ok());
                prop_assert_eq!(train.len() + test.len(), m.len());
                test.iter().for_each(|&i| seen[i] += 1);
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
        }
    }
}
