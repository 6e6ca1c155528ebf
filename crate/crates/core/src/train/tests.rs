use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{make_folds, CorpusManifest, Record};
use crate::dsp::PowerSpectrogram;
use crate::heads::HeadKind;
use crate::mae::{Mae, MaeConfig};
use crate::ndauto::Tensor;
use crate::tokens::EmbeddingTable;
use crate::vqvae::{VqVae, VqVaeConfig};

fn tiny_mae(rng: &mut ChaCha8Rng) -> Mae {
    // 4 frames × 4 positions, 1×2 tokens → 8 tokens of width 16
    let cfg = MaeConfig { t: 1, d: 2, frames: 4, width: 4, code_dim: 8, codes: 6, depth: 2, decoder_depth: 1, ..MaeConfig::default() };
    let table = EmbeddingTable { codes: Tensor::from_fn(&[6, 8], |_| rng.gen_range(-1.0..1.0)), trainable: true };
    Mae::new(cfg, &table, rng).unwrap()
}

/// Class `c` draws most codes from `{c, c + 3}` with some noise codes.
fn labeled_grids(n: usize, frames: usize, seed: u64) -> (Vec<QuantizedGrid>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grids = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let c = i % 3;
        let idx = (0..frames * 4).map(|_| if rng.gen_bool(0.8) { c + 3 * rng.gen_range(0..2) } else { rng.gen_range(0..6) }).collect();
        grids.push(QuantizedGrid::new(frames, 4, idx));
        labels.push(c);
    }
    (grids, labels)
}

#[test]
fn crop_wrap_pads_by_repetition() {
    let g = QuantizedGrid::new(3, 2, vec![0, 1, 2, 3, 4, 5]);
    assert_eq!(crop_wrap(&g, 1, 2).indices, vec![2, 3, 4, 5]);
    assert_eq!(crop_wrap(&g, 2, 4).indices, vec![4, 5, 0, 1, 2, 3, 4, 5]);
    assert_eq!(crop_wrap(&g, 0, 3), g);
}

#[test]
fn vqvae_loss_falls_and_codes_are_used() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // three spectral shapes with random gain
    let specs: Vec<PowerSpectrogram> = (0..6)
        .map(|u| {
            let mut data = Vec::new();
            for _ in 0..20 {
                let gain: f64 = rng.gen_range(0.5..2.0);
                data.extend((0..513).map(|b| gain * 100.0 * (-(((b as f64) - 60.0 * (u % 3 + 1) as f64) / 30.0).powi(2)).exp()));
            }
            PowerSpectrogram { n_frames: 20, n_bins: 513, hop: 307, data }
        })
        .collect();
    let vcfg = VqVaeConfig { channels1: 4, channels2: 6, codes: 16, code_dim: 4, ..Default::default() };
    let mut vq = VqVae::new(vcfg, &mut rng).unwrap();
    let cfg = VqTrainConfig { epochs: 4, batch: 16, pool_frames: 64, base_lr: 0.05, warmup_frac: 0.0, ..Default::default() };
    let out = run_pretrain_vqvae(&mut vq, &specs, &cfg, &mut |_| {}).unwrap();
    let first = &out.epochs[0];
    let last = out.epochs.last().unwrap();
    assert!(last.loss < first.loss, "{} !< {}", last.loss, first.loss);
    assert!(last.entropy > 0.0);
    assert!(out.epochs.iter().all(|e| e.loss.is_finite()));
}

#[test]
fn mae_pretraining_is_deterministic_and_learns() {
    let (grids, _) = labeled_grids(12, 6, 1);
    let cfg = MaeTrainConfig { epochs: 12, batch: 4, base_lr: 0.2, ratio: 0.5, warmup_frac: 0.1, ..Default::default() };
    let run = || {
        let mut mae = tiny_mae(&mut ChaCha8Rng::seed_from_u64(5));
        let out = run_pretrain_mae(&mut mae, &grids, &cfg, &mut |_| {}).unwrap();
        (mae, out)
    };
    let (a, out_a) = run();
    let (b, out_b) = run();
    assert_eq!(out_a.epochs, out_b.epochs);
    assert_eq!(out_a.rng_word_pos, out_b.rng_word_pos);
    for ((_, pa), (_, pb)) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(pa.value, pb.value);
    }
    let (first, last) = (&out_a.epochs[0], out_a.epochs.last().unwrap());
    assert!(last.loss < first.loss, "{} !< {}", last.loss, first.loss);
}

#[test]
fn cls_head_fits_separable_classes() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (grids, labels) = labeled_grids(24, 4, 2);
    let mut model = SerModel::new(tiny_mae(&mut rng), HeadKind::ClsLinear, 3, false, &mut rng);
    // 200 steps: 25 epochs of 8 batches
    let cfg = FinetuneConfig { epochs: 25, batch: 3, base_lr: 0.1, warmup_frac: 0.05, ..Default::default() };
    let mut log = MetricsLog::default();
    train_classifier(&mut model, &grids, &labels, &cfg, "train", &mut log).unwrap();
    let ev = evaluate(&model, &grids, &labels, &cfg.asl).unwrap();
    assert_eq!(ev.accuracy(), 1.0, "{:?}", ev.confusion);
    assert_eq!(log.rows.len(), 25);
}

#[test]
fn frozen_encoder_is_left_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (grids, labels) = labeled_grids(6, 4, 3);
    let mae = tiny_mae(&mut rng);
    let mut model = SerModel::new(mae.clone(), HeadKind::Query2Emo, 3, true, &mut rng);
    let cfg = FinetuneConfig { epochs: 2, batch: 3, base_lr: 0.1, ..Default::default() };
    train_classifier(&mut model, &grids, &labels, &cfg, "train", &mut MetricsLog::default()).unwrap();
    for (_, p) in mae.store.iter() {
        let id = model.mae.store.id(&p.name).unwrap();
        assert_eq!(&p.value, model.mae.store.value(id), "{}", p.name);
    }
    let head = model.mae.store.iter().find(|(_, p)| p.name.starts_with("head.")).unwrap().1;
    assert!(head.trainable);
}

#[test]
fn cross_validation_covers_every_speaker_once() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (grids, _) = labeled_grids(30, 4, 4);
    let records =
        (0..30).map(|i| Record { utterance_id: format!("u{i}"), speaker_id: format!("s{}", i / 3), label: i % 3, relpath: format!("u{i}.wav") }).collect();
    let manifest = CorpusManifest { classes: vec!["a".into(), "b".into(), "c".into()], records };
    let folds = make_folds(&manifest, 5, 0).unwrap();
    let cfg = FinetuneConfig { epochs: 1, batch: 8, ..Default::default() };
    let report = run_finetune(&tiny_mae(&mut rng), &manifest, &grids, &folds, &cfg, &mut |_, _| {}).unwrap();
    assert_eq!(report.folds.len(), 5);
    assert_eq!(report.confusion().total(), 30);
    let (acc, sd) = report.accuracy();
    assert!((0.0..=1.0).contains(&acc) && sd >= 0.0);
    assert_eq!(report.log.rows.iter().filter(|r| r.split.ends_with("/test")).count(), 5);
}
