// Trend checks on the synthetic corpus. These train real models and take a
// while; the desk configuration below is what fits the CPU budget.

use std::time::Instant;

use vqmae::config::Config;
use vqmae::data::FoldPlan;
use vqmae::mae::Mae;
use vqmae::pipeline;
use vqmae::vqvae::{QuantizedGrid, VqVae};

use super::Outcome;

/// Reduced model: L=4, token width 160 (t=10, d=4, e=4).
const DESK: &[&str] = &[
    "vqvae.channels1=16",
    "vqvae.channels2=32",
    "vqvae.codes=64",
    "tokens.e=4",
    "tokens.frames=20",
    "mae.depth=4",
    "mae.decoder_depth=2",
    "train.vq_epochs=5",
    "train.vq_pool_frames=8192",
    "train.mae_epochs=30",
    "train.mae_lr=1e-2",
    "train.ft_epochs=15",
    "train.ft_lr=4e-3",
    "data.per_speaker=20",
];

/// Unlabeled pretraining corpus: different speakers from the labeled one.
const UNLABELED: &[&str] = &["data.seed=1", "data.speakers=60", "data.per_speaker=15"];

fn config(extra: &[&str]) -> Result<Config, String> {
    let mut cfg = Config::default();
    cfg.apply_overrides(DESK).map_err(|e| e.to_string())?;
    cfg.apply_overrides(extra).map_err(|e| e.to_string())?;
    Ok(cfg)
}

struct Labeled {
    cfg: Config,
    vq: VqVae,
    unlabeled: Vec<QuantizedGrid>,
    corpus: pipeline::Corpus,
    grids: Vec<QuantizedGrid>,
    plan: FoldPlan,
}

fn prepare(extra: &[&str], folds: usize) -> Result<Labeled, String> {
    let e = |e: vqmae::Error| e.to_string();
    let cfg = config(extra)?;
    let mut pcfg = cfg.clone();
    pcfg.apply_overrides(UNLABELED).map_err(e)?;
    let stft = cfg.stft().map_err(e)?;
    let pspecs = pipeline::spectrograms(&pipeline::synthetic_corpus(&pcfg).map_err(e)?.waves, &stft, 1).map_err(e)?;
    let (vq, _) = pipeline::train_vqvae(&pcfg, &pspecs, &mut |_| {}).map_err(e)?;
    let unlabeled = pipeline::tokenize(&vq, &pspecs, 1).map_err(e)?;
    let corpus = pipeline::synthetic_corpus(&cfg).map_err(e)?;
    let specs = pipeline::spectrograms(&corpus.waves, &stft, 1).map_err(e)?;
    let grids = pipeline::tokenize(&vq, &specs, 1).map_err(e)?;
    let mut plan = pipeline::folds(&cfg, &corpus.manifest).map_err(e)?;
    plan.folds.truncate(folds);
    Ok(Labeled { cfg, vq, unlabeled, corpus, grids, plan })
}

impl Labeled {
    fn pretrain(&self, extra: &[&str]) -> Result<Mae, String> {
        let mut cfg = self.cfg.clone();
        cfg.apply_overrides(UNLABELED).map_err(|e| e.to_string())?;
        cfg.apply_overrides(extra).map_err(|e| e.to_string())?;
        Ok(pipeline::pretrain_mae(&cfg, &self.vq, &self.unlabeled, &mut |_| {}).map_err(|e| e.to_string())?.0)
    }

    fn accuracy(&self, mae: &Mae, extra: &[&str]) -> Result<f64, String> {
        let mut cfg = self.cfg.clone();
        cfg.apply_overrides(extra).map_err(|e| e.to_string())?;
        let rep = pipeline::cross_validate(&cfg, mae, &self.corpus.manifest, &self.grids, &self.plan, &mut |_, _| {}).map_err(|e| e.to_string())?;
        Ok(rep.accuracy().0)
    }
}

pub fn pretraining_ordering() -> Outcome {
    let t0 = Instant::now();
    let data = prepare(&[], 5)?;
    // the attention head; a linear probe on the frozen CLS token sits at chance
    let head = "heads.type=query2emo";
    let scratch = data.accuracy(&pipeline::init_mae(&data.cfg, &data.vq).map_err(|e| e.to_string())?, &[head])?;
    let pre = data.pretrain(&[])?;
    let frozen = data.accuracy(&pre, &[head, "heads.freeze_encoder=true"])?;
    let full = data.accuracy(&pre, &[head])?;
    let msg = format!(
        "scratch {:.1}% < frozen {:.1}% < full {:.1}% (full >= 85%, gap >= 10) in {:.0}s",
        100.0 * scratch,
        100.0 * frozen,
        100.0 * full,
        t0.elapsed().as_secs_f64()
    );
    if scratch < frozen && frozen < full && full >= 0.85 && full - scratch >= 0.10 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Fewer pretraining epochs and two folds per run keep the 15 runs of this
/// grid within a couple of hours.
const TREND: &[&str] = &["train.mae_epochs=5"];

pub fn masking_trends() -> Outcome {
    let t0 = Instant::now();
    let data = prepare(&[], 2)?;
    let runs = [("frame", 0.8), ("patch-tf", 0.8), ("patch-t", 0.8), ("patch-f", 0.8), ("patch-tf", 0.9)];
    let mut means = Vec::new();
    for (strategy, ratio) in runs {
        let mut sum = 0.0;
        for seed in 0..3 {
            let over = [format!("tokens.strategy={strategy}"), format!("tokens.ratio={ratio}"), format!("train.seed={seed}")];
            let mut extra: Vec<&str> = TREND.to_vec();
            if strategy == "frame" {
                // frame masking works on one token per frame
                extra.extend(["tokens.t=1", "tokens.d=64"]);
            }
            extra.extend(over.iter().map(String::as_str));
            let mae = data.pretrain(&extra)?;
            sum += data.accuracy(&mae, &extra[TREND.len()..])?;
        }
        means.push(sum / 3.0);
    }
    let [frame, tf, t, f, tf9] = [means[0], means[1], means[2], means[3], means[4]];
    let msg = format!(
        "frame {:.1}% >= patch-tf {:.1}% >= max(patch-t {:.1}%, patch-f {:.1}%); patch-tf 0.8 {:.1}% >= 0.9 {:.1}% in {:.0}s",
        100.0 * frame,
        100.0 * tf,
        100.0 * t,
        100.0 * f,
        100.0 * tf,
        100.0 * tf9,
        t0.elapsed().as_secs_f64()
    );
    if frame >= tf && tf >= t.max(f) && tf >= tf9 {
        Ok(msg)
    } else {
        Err(msg)
    }
}
