//! Generates a small synthetic emotion corpus and writes it to disk as
//! WAV files plus `manifest.csv`.

use vqmae::data::{generate_synthetic_corpus, make_folds, write_corpus, SyntheticSpec};

fn main() -> vqmae::Result<()> {
    let spec = SyntheticSpec { speakers: 10, per_speaker: 8, ..SyntheticSpec::default() };
    let (manifest, waves) = generate_synthetic_corpus(&spec)?;
    let dir = std::env::temp_dir().join("vqmae-synthetic-example");
    let csv = write_corpus(&dir, &manifest, &waves)?;
    println!("{} utterances from {} speakers -> {}", manifest.len(), manifest.speakers().len(), csv.display());
    for (c, name) in manifest.classes.iter().enumerate() {
        let n = manifest.records.iter().filter(|r| r.label == c).count();
        println!("  {name:8} {n}");
    }
    let secs: f64 = waves.iter().map(|w| w.duration_secs()).sum();
    println!("{secs:.1} s of audio");
    let folds = make_folds(&manifest, 5, 0)?;
    for f in 0..folds.len() {
        println!("fold {f}: test speakers {:?}", folds.folds[f]);
    }
    Ok(())
}
