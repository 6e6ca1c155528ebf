//! Trains a small VQ-VAE on synthetic speech and turns each utterance into
//! a grid of codebook indices.

use vqmae::config::Config;
use vqmae::pipeline;
use vqmae::vqvae::usage_entropy;

fn main() -> vqmae::Result<()> {
    let mut cfg = Config::default();
    cfg.apply_overrides(&[
        "data.speakers=6",
        "data.per_speaker=8",
        "vqvae.channels1=8",
        "vqvae.channels2=16",
        "vqvae.codes=32",
        "tokens.e=4",
        "train.vq_epochs=3",
        "train.vq_pool_frames=2048",
    ])?;
    let corpus = pipeline::synthetic_corpus(&cfg)?;
    let specs = pipeline::spectrograms(&corpus.waves, &cfg.stft()?, 1)?;
    let (vq, out) = pipeline::train_vqvae(&cfg, &specs, &mut |e| {
        println!("epoch {}: loss {:.4} recon {:.4} usage entropy {:.3} nats, {} codes reseeded", e.epoch, e.loss, e.recon_loss, e.entropy, e.reseeded)
    })?;
    let grids = pipeline::tokenize(&vq, &specs, 1)?;
    let mut counts = vec![0u64; vq.cfg.codes];
    for g in &grids {
        for &i in &g.indices {
            counts[i] += 1;
        }
    }
    println!("{} epochs; {} utterances -> grids of {} x {}", out.epochs.len(), grids.len(), grids[0].n_frames, grids[0].width);
    println!("corpus entropy {:.3} nats over {} used codes", usage_entropy(&counts), counts.iter().filter(|&&c| c > 0).count());
    println!("first frame of utterance 0: {:?}", grids[0].frame(0));
    let rec = vq.decode_indices(&grids[0])?;
    let err: f64 = specs[0].data.iter().zip(&rec.data).map(|(a, b)| (a.ln_1p() - b.ln_1p()).abs()).sum::<f64>() / rec.data.len() as f64;
    println!("mean |log1p error| of its reconstruction: {err:.3}");
    Ok(())
}
