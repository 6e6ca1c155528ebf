use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::metrics::{mean_std, Confusion, MetricsLog};
use super::{crop_wrap, AdamW, ScheduleConfig};
use crate::data::{CorpusManifest, FoldPlan};
use crate::error::{Error, Result};
use crate::heads::{asymmetric_loss, predict, AslConfig, Head, HeadKind};
use crate::mae::Mae;
use crate::ndauto::{Graph, Tensor, Var};
use crate::tokens::{derive_seed, patchify, DiscreteTokens};
use crate::vqvae::QuantizedGrid;

/// MAE encoder plus a classification head sharing one parameter store.
#[derive(Clone, Debug)]
pub struct SerModel {
    pub mae: Mae,
    pub head: Head,
    pub classes: usize,
}

impl SerModel {
    /// Adds a head to `mae`'s store. The MAE decoder is frozen; with
    /// `freeze_encoder` the embedding table and encoder are frozen as well.
    pub fn new(mut mae: Mae, kind: HeadKind, classes: usize, freeze_encoder: bool, rng: &mut impl Rng) -> Self {
        let w = mae.token_width();
        let head = Head::new(kind, &mut mae.store, w, classes, mae.cfg.heads, rng);
        mae.store.set_trainable("dec.", false);
        if freeze_encoder {
            mae.store.set_trainable("enc.", false);
            mae.store.set_trainable("embed.", false);
        }
        SerModel { mae, head, classes }
    }

    /// Class logits `[B, C]` for a batch of token grids.
    pub fn logits(&self, g: &mut Graph, tokens: &[DiscreteTokens]) -> Result<Var> {
        let enc = self.mae.encode_all(g, tokens)?;
        self.head.forward(g, &self.mae.store, enc.latent, enc.batch, enc.seq_len)
    }

    /// Non-overlapping segments of the model's crop length (at least one,
    /// wrap-padded when the grid is shorter).
    pub fn segments(&self, grid: &QuantizedGrid) -> Result<Vec<DiscreteTokens>> {
        let frames = self.mae.cfg.frames;
        let count = (grid.n_frames / frames).max(1);
        (0..count).map(|s| patchify(&crop_wrap(grid, s * frames, frames), self.mae.cfg.t, self.mae.cfg.d)).collect()
    }

    /// Utterance-level logits: the mean over segment logits.
    pub fn utterance_logits(&self, grid: &QuantizedGrid) -> Result<Vec<f64>> {
        let segs = self.segments(grid)?;
        let mut g = Graph::new();
        let y = self.logits(&mut g, &segs)?;
        let mut mean = vec![0.0; self.classes];
        for row in g.value(y).data().chunks_exact(self.classes) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / segs.len() as f64);
        }
        Ok(mean)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_frac: f64,
    pub head: HeadKind,
    pub asl: AslConfig,
    pub freeze_encoder: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 20,
            batch: 32,
            base_lr: 1e-4,
            min_lr: 1e-6,
            warmup_frac: 0.1,
            head: HeadKind::ClsLinear,
            asl: AslConfig::default(),
            freeze_encoder: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub confusion: Confusion,
    pub predictions: Vec<usize>,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        self.confusion.accuracy()
    }

    pub fn macro_f1(&self) -> f64 {
        self.confusion.macro_f1()
    }
}

/// Trains `model` on random crops; logs `(epoch, split, loss, acc, f1)`
/// rows under `split` with training-batch predictions.
pub fn train_classifier(
    model: &mut SerModel,
    grids: &[QuantizedGrid],
    labels: &[usize],
    cfg: &FinetuneConfig,
    split: &str,
    log: &mut MetricsLog,
) -> Result<AdamW> {
    if grids.len() != labels.len() || grids.is_empty() || cfg.batch == 0 || cfg.epochs == 0 {
        return Err(Error::Config("fine-tuning needs a nonempty labeled set, positive batch and epochs".into()));
    }
    let frames = model.mae.cfg.frames;
    let steps_per_epoch = grids.len().div_ceil(cfg.batch);
    let sched = ScheduleConfig::from_epochs(cfg.base_lr, cfg.batch, cfg.epochs, steps_per_epoch, cfg.warmup_frac, cfg.min_lr);
    let mut opt = AdamW::new(&model.mae.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..grids.len()).collect();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let (mut truth, mut pred) = (Vec::new(), Vec::new());
        for batch in order.chunks(cfg.batch) {
            let mut tokens = Vec::with_capacity(batch.len());
            let mut ys = Vec::with_capacity(batch.len());
            for &u in batch {
                let start = rng.gen_range(0..=grids[u].n_frames.saturating_sub(frames));
                tokens.push(patchify(&crop_wrap(&grids[u], start, frames), model.mae.cfg.t, model.mae.cfg.d)?);
                ys.push(labels[u]);
            }
            model.mae.store.zero_grad();
            let mut g = Graph::new();
            let y = model.logits(&mut g, &tokens)?;
            let loss = asymmetric_loss(&mut g, y, &ys, &cfg.asl)?;
            g.backward(loss)?.accumulate(&mut model.mae.store, 1.0);
            opt.update(&mut model.mae.store, sched.lr_at(step));
            step += 1;
            loss_sum += g.value(loss).item() * batch.len() as f64;
            pred.extend(predict(g.value(y)));
            truth.extend(ys);
        }
        let c = Confusion::from_predictions(model.classes, &truth, &pred);
        log.push(epoch, split, loss_sum / grids.len() as f64, c.accuracy(), c.macro_f1());
    }
    Ok(opt)
}

/// Segment-averaged predictions and asymmetric loss on a labeled set.
pub fn evaluate(model: &SerModel, grids: &[QuantizedGrid], labels: &[usize], asl: &AslConfig) -> Result<Evaluation> {
    let mut all = Vec::with_capacity(grids.len() * model.classes);
    for grid in grids {
        all.extend(model.utterance_logits(grid)?);
    }
    let logits = Tensor::new(&[grids.len(), model.classes], all)?;
    let predictions = predict(&logits);
    let mut g = Graph::new();
    let v = g.constant(logits)?;
    let l = asymmetric_loss(&mut g, v, labels, asl)?;
    let loss = g.value(l).item();
    Ok(Evaluation { loss, confusion: Confusion::from_predictions(model.classes, labels, &predictions), predictions })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub confusion: Confusion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub log: MetricsLog,
}

impl CvReport {
    pub fn accuracy(&self) -> (f64, f64) {
        mean_std(&self.folds.iter().map(|f| f.accuracy).collect::<Vec<_>>())
    }

    pub fn macro_f1(&self) -> (f64, f64) {
        mean_std(&self.folds.iter().map(|f| f.macro_f1).collect::<Vec<_>>())
    }

    /// Confusion summed over folds.
    pub fn confusion(&self) -> Confusion {
        let mut total = Confusion::new(self.folds.first().map_or(0, |f| f.confusion.classes));
        for f in &self.folds {
            total.merge(&f.confusion);
        }
        total
    }
}

/// Speaker-disjoint cross-validation: for each fold a fresh head on a copy
/// of `base` is trained on the other folds and evaluated on this one.
/// `grids[i]` is the token grid of `manifest.records[i]`; `on_fold` sees
/// each trained model with its result.
pub fn run_finetune(
    base: &Mae,
    manifest: &CorpusManifest,
    grids: &[QuantizedGrid],
    folds: &FoldPlan,
    cfg: &FinetuneConfig,
    on_fold: &mut dyn FnMut(&FoldResult, &SerModel),
) -> Result<CvReport> {
    if grids.len() != manifest.len() {
        return Err(Error::Data(format!("{} token grids for {} records", grids.len(), manifest.len())));
    }
    let classes = manifest.classes.len();
    let mut results = Vec::with_capacity(folds.len());
    let mut log = MetricsLog::default();
    for f in 0..folds.len() {
        let (train, test) = (folds.train_indices(manifest, f), folds.test_indices(manifest, f));
        FoldPlan::check_disjoint(manifest, &train, &test)?;
        if train.is_empty() || test.is_empty() {
            return Err(Error::Data(format!("fold {f} has an empty train or test side")));
        }
        let pick = |idx: &[usize]| -> (Vec<QuantizedGrid>, Vec<usize>) { idx.iter().map(|&i| (grids[i].clone(), manifest.records[i].label)).unzip() };
        let (tr_g, tr_y) = pick(&train);
        let (te_g, te_y) = pick(&test);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x4ead, f as u64));
        let mut model = SerModel::new(base.clone(), cfg.head, classes, cfg.freeze_encoder, &mut rng);
        let fold_cfg = FinetuneConfig { seed: derive_seed(cfg.seed, 0xf01d, f as u64), ..cfg.clone() };
        train_classifier(&mut model, &tr_g, &tr_y, &fold_cfg, &format!("fold{f}/train"), &mut log)?;
        let ev = evaluate(&model, &te_g, &te_y, &cfg.asl)?;
        log.push(cfg.epochs, format!("fold{f}/test"), ev.loss, ev.accuracy(), ev.macro_f1());
        let res = FoldResult { fold: f, accuracy: ev.accuracy(), macro_f1: ev.macro_f1(), confusion: ev.confusion };
        on_fold(&res, &model);
        results.push(res);
    }
    Ok(CvReport { folds: results, log })
}
