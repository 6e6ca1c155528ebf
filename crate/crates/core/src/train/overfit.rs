//! Memorization runs: a healthy model must drive its loss on a tiny fixed
//! batch toward zero.

use super::AdamW;
use crate::error::Result;
use crate::mae::Mae;
use crate::ndauto::Graph;
use crate::tokens::{derive_seed, make_mask, DiscreteTokens, MaskStrategy};
use crate::vqvae::VqVae;

#[derive(Clone, Debug, PartialEq)]
pub struct OverfitReport {
    pub initial: f64,
    pub last: f64,
    /// Steps taken; fewer than the budget when the target was reached.
    pub steps: usize,
    pub reached: bool,
}

/// Trains on `frames` (`B × 513` raw power) at constant `lr` until the
/// reconstruction loss falls below `target_frac` of its initial value.
pub fn overfit_vqvae(vq: &mut VqVae, frames: &[f64], lr: f64, max_steps: usize, target_frac: f64) -> Result<OverfitReport> {
    let mut opt = AdamW::with_hyper(&vq.store, 0.9, 0.95, 1e-8, 0.0);
    let mut initial = None;
    let mut last = f64::NAN;
    for step in 0..max_steps {
        vq.store.zero_grad();
        let mut g = Graph::new();
        let fwd = vq.forward_train(&mut g, frames)?;
        last = fwd.recon_loss;
        let init = *initial.get_or_insert(last);
        if last < target_frac * init {
            return Ok(OverfitReport { initial: init, last, steps: step, reached: true });
        }
        g.backward(fwd.loss)?.accumulate(&mut vq.store, 1.0);
        opt.update(&mut vq.store, lr);
    }
    Ok(OverfitReport { initial: initial.unwrap_or(last), last, steps: max_steps, reached: false })
}

/// Trains on one token grid with `batch` fresh masks per step until the
/// masked-slot accuracy of a step exceeds `target_acc`. `initial` and
/// `last` hold accuracies.
#[allow(clippy::too_many_arguments)]
pub fn overfit_mae(
    mae: &mut Mae,
    tokens: &DiscreteTokens,
    strategy: MaskStrategy,
    ratio: f64,
    batch: usize,
    lr: f64,
    max_steps: usize,
    target_acc: f64,
) -> Result<OverfitReport> {
    let mut opt = AdamW::with_hyper(&mae.store, 0.9, 0.95, 1e-8, 0.0);
    let geo = tokens.geometry;
    let mut initial = None;
    let mut last = 0.0;
    let items = vec![tokens.clone(); batch];
    for step in 0..max_steps {
        let plans = (0..batch).map(|j| make_mask(&geo, strategy, ratio, derive_seed(0x0f17, step as u64, j as u64))).collect::<Result<Vec<_>>>()?;
        mae.store.zero_grad();
        let mut g = Graph::new();
        let out = mae.forward_pretrain(&mut g, &items, &plans)?;
        last = out.masked_correct as f64 / out.masked_total.max(1) as f64;
        let init = *initial.get_or_insert(last);
        if last > target_acc {
            return Ok(OverfitReport { initial: init, last, steps: step, reached: true });
        }
        g.backward(out.loss)?.accumulate(&mut mae.store, 1.0);
        opt.update(&mut mae.store, lr);
    }
    Ok(OverfitReport { initial: initial.unwrap_or(last), last, steps: max_steps, reached: false })
}
