//! Saves a VQ-VAE checkpoint, reloads it bit-exactly, and shows the
//! config fingerprint guard refusing a mismatched architecture.

use vqmae::config::{ArtifactKind, Config};
use vqmae::pipeline;
use vqmae::train::Checkpoint;

fn main() -> vqmae::Result<()> {
    let mut cfg = Config::default();
    cfg.apply_overrides(&["data.speakers=5", "data.per_speaker=2", "vqvae.channels1=4", "vqvae.channels2=8", "vqvae.codes=16", "train.vq_epochs=1"])?;
    let corpus = pipeline::synthetic_corpus(&cfg)?;
    let specs = pipeline::spectrograms(&corpus.waves, &cfg.stft()?, 1)?;
    let (vq, out) = pipeline::train_vqvae(&cfg, &specs, &mut |_| {})?;

    let dir = std::env::temp_dir().join("vqmae-checkpoint-example");
    std::fs::create_dir_all(&dir).map_err(|e| vqmae::Error::io(&dir, e))?;
    let path = dir.join("vqvae.ckpt");
    let ck = pipeline::vqvae_checkpoint(&cfg, &vq, Some(&out))?;
    ck.save(&path)?;
    println!("wrote {} ({} tensors, fingerprint {})", path.display(), ck.params.len(), cfg.fingerprint(ArtifactKind::VqVae));

    let back = pipeline::load_vqvae(&cfg, &path, false)?;
    let identical =
        vq.store.iter().zip(back.store.iter()).all(|((_, a), (_, b))| a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    println!("reloaded parameters bit-identical: {identical}");
    let raw = Checkpoint::load(&path, ArtifactKind::VqVae.name(), None, false)?;
    println!("stored epoch {} seed {}", raw.epoch, raw.rng_seed);

    let mut other = cfg.clone();
    other.set("vqvae.codes", "32")?;
    match pipeline::load_vqvae(&other, &path, false) {
        Err(e) => println!("mismatched config refused: {e}"),
        Ok(_) => println!("mismatched config unexpectedly accepted"),
    }
    Ok(())
}
