//! Speaker-disjoint cross-validation of the emotion classifier on top of a
//! pretrained MAE encoder, for both heads. Sized to finish in a minute or
//! two, which is far too small to beat chance by much.

use vqmae::config::Config;
use vqmae::pipeline;

fn main() -> vqmae::Result<()> {
    let mut cfg = Config::default();
    cfg.apply_overrides(&[
        "data.speakers=10",
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
        "train.mae_epochs=5",
        "train.mae_batch=16",
        "train.mae_lr=1e-2",
        "train.ft_epochs=6",
        "train.ft_batch=16",
        "train.ft_lr=4e-3",
    ])?;
    let corpus = pipeline::synthetic_corpus(&cfg)?;
    let specs = pipeline::spectrograms(&corpus.waves, &cfg.stft()?, 1)?;
    let (vq, _) = pipeline::train_vqvae(&cfg, &specs, &mut |_| {})?;
    let grids = pipeline::tokenize(&vq, &specs, 1)?;
    let (mae, _) = pipeline::pretrain_mae(&cfg, &vq, &grids, &mut |_| {})?;
    let plan = pipeline::folds(&cfg, &corpus.manifest)?;

    for head in ["cls", "query2emo"] {
        let mut c = cfg.clone();
        c.set("heads.type", head)?;
        let report = pipeline::cross_validate(&c, &mae, &corpus.manifest, &grids, &plan, &mut |r, _| {
            println!("  {head} fold {}: accuracy {:.3} macro-F1 {:.3}", r.fold, r.accuracy, r.macro_f1)
        })?;
        let (acc, acc_sd) = report.accuracy();
        let (f1, f1_sd) = report.macro_f1();
        println!("{head}: accuracy {acc:.3} ± {acc_sd:.3}, macro-F1 {f1:.3} ± {f1_sd:.3}");
        print!("{}", report.confusion().to_csv(&corpus.manifest.classes));
    }
    Ok(())
}
