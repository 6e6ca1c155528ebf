//! End-to-end stages driven by a [`Config`]: corpus, VQ-VAE, tokens, MAE
//! pretraining, cross-validated fine-tuning, and their checkpoints.

use std::path::Path;
use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ArtifactKind, Config};
use crate::data::{generate_synthetic_corpus, ingest_manifest, load_audio, make_folds, CorpusManifest, FoldPlan};
use crate::dsp::{stft_power, PowerSpectrogram, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::mae::Mae;
use crate::tokens::{derive_seed, EmbeddingTable};
use crate::train::{run_finetune, run_pretrain_mae, run_pretrain_vqvae, Checkpoint, CvReport, FoldResult, MaeEpoch, SerModel, TrainOutcome, VqEpoch};
use crate::vqvae::{QuantizedGrid, VqVae};

#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub waves: Vec<Waveform>,
    pub warnings: Vec<String>,
}

/// Runs `f` over `items` on up to `workers` threads, keeping input order.
pub fn par_map<T: Sync, U: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    let parts: Vec<Result<Vec<U>>> = thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(move || c.iter().map(f).collect())).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// The synthetic corpus described by `data.*`.
pub fn synthetic_corpus(cfg: &Config) -> Result<Corpus> {
    let (manifest, waves) = generate_synthetic_corpus(&cfg.synthetic()?)?;
    Ok(Corpus { manifest, waves, warnings: Vec::new() })
}

/// A corpus directory holding `manifest.csv` and the audio it references.
pub fn load_corpus_dir(dir: impl AsRef<Path>, workers: usize) -> Result<Corpus> {
    let dir = dir.as_ref();
    load_manifest(&dir.join("manifest.csv"), dir, workers)
}

fn load_manifest(csv: &Path, root: &Path, workers: usize) -> Result<Corpus> {
    let ing = ingest_manifest(csv, root, None)?;
    let waves = par_map(&ing.manifest.records, workers, |r| load_audio(root, r))?;
    Ok(Corpus { manifest: ing.manifest, waves, warnings: ing.warnings })
}

/// The corpus named by the config, or by `dir` when given.
pub fn load_corpus(cfg: &Config, dir: Option<&Path>, workers: usize) -> Result<Corpus> {
    if let Some(d) = dir {
        return load_corpus_dir(d, workers);
    }
    match cfg.raw("data", "source") {
        "synthetic" => synthetic_corpus(cfg),
        _ => {
            let csv = Path::new(cfg.raw("data", "manifest"));
            let root = match cfg.raw("data", "audio_root") {
                "" => csv.parent().unwrap_or(Path::new(".")),
                r => Path::new(r),
            };
            load_manifest(csv, root, workers)
        }
    }
}

pub fn spectrograms(waves: &[Waveform], stft: &StftConfig, workers: usize) -> Result<Vec<PowerSpectrogram>> {
    par_map(waves, workers, |w| stft_power(w, stft))
}

pub fn tokenize(vq: &VqVae, specs: &[PowerSpectrogram], workers: usize) -> Result<Vec<QuantizedGrid>> {
    par_map(specs, workers, |s| vq.tokenize(s))
}

pub fn train_vqvae(cfg: &Config, specs: &[PowerSpectrogram], on_epoch: &mut dyn FnMut(&VqEpoch)) -> Result<(VqVae, TrainOutcome<VqEpoch>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed()?, 0x0076_7161, 0));
    let mut vq = VqVae::new(cfg.vqvae()?, &mut rng)?;
    let out = run_pretrain_vqvae(&mut vq, specs, &cfg.vq_train()?, on_epoch)?;
    Ok((vq, out))
}

/// A freshly initialized MAE whose embedding table starts from the
/// VQ-VAE codebook.
pub fn init_mae(cfg: &Config, vq: &VqVae) -> Result<Mae> {
    let mcfg = cfg.mae()?;
    let table = EmbeddingTable::from_codebook(&vq.codebook(), mcfg.train_embedding);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed()?, 0x006d_6165, 0));
    Mae::new(mcfg, &table, &mut rng)
}

pub fn pretrain_mae(cfg: &Config, vq: &VqVae, grids: &[QuantizedGrid], on_epoch: &mut dyn FnMut(&MaeEpoch)) -> Result<(Mae, TrainOutcome<MaeEpoch>)> {
    let mut mae = init_mae(cfg, vq)?;
    let out = run_pretrain_mae(&mut mae, grids, &cfg.mae_train()?, on_epoch)?;
    Ok((mae, out))
}

pub fn folds(cfg: &Config, manifest: &CorpusManifest) -> Result<FoldPlan> {
    make_folds(manifest, cfg.get("train", "folds")?, cfg.seed()?)
}

pub fn cross_validate(
    cfg: &Config,
    mae: &Mae,
    manifest: &CorpusManifest,
    grids: &[QuantizedGrid],
    plan: &FoldPlan,
    on_fold: &mut dyn FnMut(&FoldResult, &SerModel),
) -> Result<CvReport> {
    run_finetune(mae, manifest, grids, plan, &cfg.finetune()?, on_fold)
}

pub fn vqvae_checkpoint(cfg: &Config, vq: &VqVae, out: Option<&TrainOutcome<VqEpoch>>) -> Result<Checkpoint> {
    let mut ck = Checkpoint::from_store(ArtifactKind::VqVae.name(), &cfg.canonical(ArtifactKind::VqVae), &vq.store);
    ck.extras.push(("usage_counts".into(), vq.usage_counts.clone()));
    stamp(&mut ck, cfg, out)?;
    Ok(ck)
}

pub fn mae_checkpoint(cfg: &Config, mae: &Mae, out: Option<&TrainOutcome<MaeEpoch>>) -> Result<Checkpoint> {
    let mut ck = Checkpoint::from_store(ArtifactKind::Mae.name(), &cfg.canonical(ArtifactKind::Mae), &mae.store);
    stamp(&mut ck, cfg, out)?;
    Ok(ck)
}

pub fn finetune_checkpoint(cfg: &Config, model: &SerModel, fold: usize) -> Result<Checkpoint> {
    let mut ck = Checkpoint::from_store(ArtifactKind::Finetune.name(), &cfg.canonical(ArtifactKind::Finetune), &model.mae.store);
    ck.rng_seed = cfg.seed()?;
    ck.extras.push(("fold".into(), vec![fold as u64]));
    ck.extras.push(("classes".into(), vec![model.classes as u64]));
    Ok(ck)
}

fn stamp<E>(ck: &mut Checkpoint, cfg: &Config, out: Option<&TrainOutcome<E>>) -> Result<()> {
    ck.rng_seed = cfg.seed()?;
    if let Some(o) = out {
        ck.epoch = o.epochs.len() as u64;
        ck.rng_word_pos = o.rng_word_pos;
        ck.optimizer = Some(o.optimizer.clone());
    }
    Ok(())
}

fn expected(cfg: &Config, kind: ArtifactKind) -> String {
    cfg.canonical(kind)
}

pub fn load_vqvae(cfg: &Config, path: impl AsRef<Path>, force: bool) -> Result<VqVae> {
    let ck = Checkpoint::load(path, ArtifactKind::VqVae.name(), Some(&expected(cfg, ArtifactKind::VqVae)), force)?;
    let mut vq = VqVae::new(cfg.vqvae()?, &mut ChaCha8Rng::seed_from_u64(0))?;
    ck.restore_into(&mut vq.store, "")?;
    if let Some(u) = ck.extra("usage_counts") {
        if u.len() == vq.usage_counts.len() {
            vq.usage_counts = u.to_vec();
        }
    }
    Ok(vq)
}

pub fn load_mae(cfg: &Config, path: impl AsRef<Path>, force: bool) -> Result<Mae> {
    let ck = Checkpoint::load(path, ArtifactKind::Mae.name(), Some(&expected(cfg, ArtifactKind::Mae)), force)?;
    let mcfg = cfg.mae()?;
    let table = EmbeddingTable { codes: crate::ndauto::Tensor::zeros(&[mcfg.codes, mcfg.code_dim]), trainable: mcfg.train_embedding };
    let mut mae = Mae::new(mcfg, &table, &mut ChaCha8Rng::seed_from_u64(0))?;
    ck.restore_into(&mut mae.store, "")?;
    Ok(mae)
}

/// A fine-tuned classifier, plus the fold it was trained for.
pub fn load_classifier(cfg: &Config, path: impl AsRef<Path>, force: bool) -> Result<(SerModel, Option<usize>)> {
    let ck = Checkpoint::load(path, ArtifactKind::Finetune.name(), Some(&expected(cfg, ArtifactKind::Finetune)), force)?;
    let classes =
        ck.extra("classes").and_then(|c| c.first()).copied().ok_or_else(|| Error::Checkpoint("classifier checkpoint lacks its class count".into()))?;
    let mcfg = cfg.mae()?;
    let table = EmbeddingTable { codes: crate::ndauto::Tensor::zeros(&[mcfg.codes, mcfg.code_dim]), trainable: mcfg.train_embedding };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mae = Mae::new(mcfg, &table, &mut rng)?;
    let mut model = SerModel::new(mae, cfg.head()?, classes as usize, false, &mut rng);
    ck.restore_into(&mut model.mae.store, "")?;
    Ok((model, ck.extra("fold").and_then(|f| f.first()).map(|&f| f as usize)))
}
