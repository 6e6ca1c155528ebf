//! Masked pretraining over VQ-VAE tokens, then reconstruction of a masked
//! utterance.

use vqmae::config::Config;
use vqmae::mae::reconstruct;
use vqmae::pipeline;
use vqmae::tokens::{make_mask, patchify};
use vqmae::train::crop_wrap;

fn main() -> vqmae::Result<()> {
    let mut cfg = Config::default();
    cfg.apply_overrides(&[
        "data.speakers=6",
        "data.per_speaker=8",
        "vqvae.channels1=8",
        "vqvae.channels2=16",
        "vqvae.codes=32",
        "tokens.e=4",
        "tokens.frames=20",
        "mae.depth=2",
        "mae.decoder_depth=1",
        "train.vq_epochs=2",
        "train.vq_pool_frames=2048",
        "train.mae_epochs=8",
        "train.mae_batch=16",
        "train.mae_lr=1e-2",
    ])?;
    let corpus = pipeline::synthetic_corpus(&cfg)?;
    let specs = pipeline::spectrograms(&corpus.waves, &cfg.stft()?, 1)?;
    let (vq, _) = pipeline::train_vqvae(&cfg, &specs, &mut |_| {})?;
    let grids = pipeline::tokenize(&vq, &specs, 1)?;
    let (mae, _) = pipeline::pretrain_mae(&cfg, &vq, &grids, &mut |e| {
        println!("epoch {:2}: masked cross-entropy {:.4}, masked accuracy {:.3}", e.epoch, e.loss, e.masked_acc)
    })?;

    let (t, d) = (mae.cfg.t, mae.cfg.d);
    let x_q = patchify(&crop_wrap(&grids[0], 0, mae.cfg.frames), t, d)?;
    let plan = make_mask(&x_q.geometry, cfg.strategy()?, 0.8, 1)?;
    let logits = mae.predict(&x_q, &plan)?;
    let rec = reconstruct(&logits, &plan, &x_q)?;
    let truth = crop_wrap(&grids[0], 0, mae.cfg.frames);
    let masked: Vec<usize> = plan.masked_indices();
    let hits = masked
        .iter()
        .flat_map(|&n| {
            let (i, j) = (n / x_q.geometry.n_d, n % x_q.geometry.n_d);
            (0..t).flat_map(move |a| (0..d).map(move |b| (i * t + a, j * d + b)))
        })
        .filter(|&(f, p)| rec.get(f, p) == truth.get(f, p))
        .count();
    println!("utterance 0, first crop: {hits} of {} masked indices recovered", masked.len() * t * d);
    print!("{}", plan.render_text(&x_q.geometry));
    Ok(())
}
