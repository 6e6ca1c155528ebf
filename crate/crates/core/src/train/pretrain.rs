use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{crop_wrap, AdamW, ScheduleConfig};
use crate::dsp::PowerSpectrogram;
use crate::error::{Error, Result};
use crate::mae::Mae;
use crate::ndauto::Graph;
use crate::tokens::{derive_seed, make_mask, patchify, MaskStrategy};
use crate::vqvae::{usage_entropy, QuantizedGrid, VqVae};

#[derive(Clone, Debug, PartialEq)]
pub struct VqTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    /// Frames sampled once from the corpus to form the training pool
    /// (0 keeps every frame).
    pub pool_frames: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_frac: f64,
    /// Re-seed unused codes every this many epochs (0 disables).
    pub reseed_every: usize,
    /// Start the codebook from encoder outputs instead of its random init.
    pub data_init: bool,
    pub seed: u64,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        VqTrainConfig { epochs: 10, batch: 64, pool_frames: 4096, base_lr: 4e-3, min_lr: 1e-5, warmup_frac: 0.1, reseed_every: 1, data_init: true, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub recon_loss: f64,
    /// Usage entropy (nats) of the codes selected during the epoch.
    pub entropy: f64,
    pub reseeded: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<E> {
    pub optimizer: AdamW,
    pub epochs: Vec<E>,
    pub rng_word_pos: u128,
}

/// Trains the VQ-VAE on frames pooled from `specs`.
pub fn run_pretrain_vqvae(
    vq: &mut VqVae,
    specs: &[PowerSpectrogram],
    cfg: &VqTrainConfig,
    on_epoch: &mut dyn FnMut(&VqEpoch),
) -> Result<TrainOutcome<VqEpoch>> {
    if cfg.batch == 0 || cfg.epochs == 0 {
        return Err(Error::Config("vqvae training needs positive epochs and batch".into()));
    }
    let bins = vq.cfg.n_bins;
    let mut pool: Vec<(usize, usize)> = specs.iter().enumerate().flat_map(|(u, s)| (0..s.n_frames).map(move |t| (u, t))).collect();
    if pool.is_empty() {
        return Err(Error::Data("no frames to train on".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if cfg.pool_frames > 0 && pool.len() > cfg.pool_frames {
        pool = pool.choose_multiple(&mut rng, cfg.pool_frames).copied().collect();
        pool.sort_unstable();
    }
    let steps_per_epoch = pool.len().div_ceil(cfg.batch);
    let sched = ScheduleConfig::from_epochs(cfg.base_lr, cfg.batch, cfg.epochs, steps_per_epoch, cfg.warmup_frac, cfg.min_lr);
    let mut opt = AdamW::new(&vq.store);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    if cfg.data_init {
        let sample: Vec<_> = pool.choose_multiple(&mut rng, cfg.batch.max(64)).copied().collect();
        let frames: Vec<f64> = sample.iter().flat_map(|&(u, t)| specs[u].frame(t).iter().copied()).collect();
        let z = vq.forward_train(&mut Graph::new(), &frames)?.z_e;
        vq.init_codebook_from(&z, &mut rng);
    }
    for epoch in 1..=cfg.epochs {
        pool.shuffle(&mut rng);
        vq.usage_counts.iter_mut().for_each(|c| *c = 0);
        let (mut loss_sum, mut recon_sum, mut seen) = (0.0, 0.0, 0);
        let mut z_pool = Vec::new();
        for batch in pool.chunks(cfg.batch) {
            let mut frames = Vec::with_capacity(batch.len() * bins);
            for &(u, t) in batch {
                frames.extend_from_slice(specs[u].frame(t));
            }
            vq.store.zero_grad();
            let mut g = Graph::new();
            let fwd = vq.forward_train(&mut g, &frames)?;
            g.backward(fwd.loss)?.accumulate(&mut vq.store, 1.0);
            opt.update(&mut vq.store, sched.lr_at(step));
            step += 1;
            for &i in &fwd.indices {
                vq.usage_counts[i] += 1;
            }
            loss_sum += g.value(fwd.loss).item() * batch.len() as f64;
            recon_sum += fwd.recon_loss * batch.len() as f64;
            seen += batch.len();
            z_pool = fwd.z_e;
        }
        let entropy = usage_entropy(&vq.usage_counts);
        let reseeded = if cfg.reseed_every > 0 && epoch % cfg.reseed_every == 0 && epoch < cfg.epochs { vq.reseed_dead_codes(&z_pool, &mut rng) } else { 0 };
        let log = VqEpoch { epoch, loss: loss_sum / seen as f64, recon_loss: recon_sum / seen as f64, entropy, reseeded };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(TrainOutcome { optimizer: opt, epochs: logs, rng_word_pos: rng.get_word_pos() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaeTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_frac: f64,
    pub strategy: MaskStrategy,
    pub ratio: f64,
    pub seed: u64,
}

impl Default for MaeTrainConfig {
    fn default() -> Self {
        MaeTrainConfig { epochs: 20, batch: 32, base_lr: 1e-3, min_lr: 1e-6, warmup_frac: 0.1, strategy: MaskStrategy::PatchTf, ratio: 0.8, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaeEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub masked_acc: f64,
}

/// Masked pretraining on random crops of `grids`, with a fresh mask for
/// every item of every step.
pub fn run_pretrain_mae(mae: &mut Mae, grids: &[QuantizedGrid], cfg: &MaeTrainConfig, on_epoch: &mut dyn FnMut(&MaeEpoch)) -> Result<TrainOutcome<MaeEpoch>> {
    if cfg.batch == 0 || cfg.epochs == 0 || grids.is_empty() {
        return Err(Error::Config("mae training needs positive epochs, batch and a nonempty corpus".into()));
    }
    let geo = mae.cfg.geometry()?;
    // surface geometry/strategy conflicts before any work
    make_mask(&geo, cfg.strategy, cfg.ratio, 0)?;
    let n = geo.num_tokens();
    let frames = mae.cfg.frames;
    let steps_per_epoch = grids.len().div_ceil(cfg.batch);
    let sched = ScheduleConfig::from_epochs(cfg.base_lr, cfg.batch, cfg.epochs, steps_per_epoch, cfg.warmup_frac, cfg.min_lr);
    let mut opt = AdamW::new(&mae.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..grids.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut total, mut items) = (0.0, 0, 0, 0);
        for batch in order.chunks(cfg.batch) {
            let mut tokens = Vec::with_capacity(batch.len());
            let mut plans = Vec::with_capacity(batch.len());
            for (j, &u) in batch.iter().enumerate() {
                let start = rng.gen_range(0..=grids[u].n_frames.saturating_sub(frames));
                tokens.push(patchify(&crop_wrap(&grids[u], start, frames), mae.cfg.t, mae.cfg.d)?);
                plans.push(make_mask(&geo, cfg.strategy, cfg.ratio, derive_seed(cfg.seed, step as u64, j as u64))?);
            }
            mae.store.zero_grad();
            let mut g = Graph::new();
            let out = mae.forward_pretrain(&mut g, &tokens, &plans)?;
            let expect = n - plans[0].num_masked() + 1;
            if out.encoder_len != expect {
                return Err(Error::Data(format!("encoder saw {} tokens, expected N − |Ω_M| + 1 = {expect}", out.encoder_len)));
            }
            g.backward(out.loss)?.accumulate(&mut mae.store, 1.0);
            opt.update(&mut mae.store, sched.lr_at(step));
            step += 1;
            loss_sum += g.value(out.loss).item() * batch.len() as f64;
            items += batch.len();
            correct += out.masked_correct;
            total += out.masked_total;
        }
        let log = MaeEpoch { epoch, loss: loss_sum / items as f64, masked_acc: correct as f64 / total.max(1) as f64 };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(TrainOutcome { optimizer: opt, epochs: logs, rng_word_pos: rng.get_word_pos() })
}
