//! Optimization: AdamW, learning-rate schedule, training loops,
//! checkpoints and metrics.

mod checkpoint;
mod finetune;
pub mod metrics;
mod optim;
mod overfit;
mod pretrain;
mod schedule;

use crate::dsp::{stft_power, PowerSpectrogram, StftConfig, Waveform};
use crate::error::Result;
use crate::vqvae::{QuantizedGrid, VqVae};

pub use checkpoint::{fingerprint, fingerprint_hex, Checkpoint, NamedParam};
pub use finetune::{evaluate, run_finetune, train_classifier, CvReport, Evaluation, FinetuneConfig, FoldResult, SerModel};
pub use metrics::{Confusion, MetricsLog, MetricsRow};
pub use optim::AdamW;
pub use overfit::{overfit_mae, overfit_vqvae, OverfitReport};
pub use pretrain::{run_pretrain_mae, run_pretrain_vqvae, MaeEpoch, MaeTrainConfig, TrainOutcome, VqEpoch, VqTrainConfig};
pub use schedule::{peak_lr, ScheduleConfig};

/// `len` frames starting at `start`, wrapping around to the first frame
/// when the grid runs out.
pub fn crop_wrap(grid: &QuantizedGrid, start: usize, len: usize) -> QuantizedGrid {
    if start + len <= grid.n_frames {
        return grid.crop(start, len);
    }
    let mut indices = Vec::with_capacity(len * grid.width);
    for f in 0..len {
        indices.extend_from_slice(grid.frame((start + f) % grid.n_frames));
    }
    QuantizedGrid::new(len, grid.width, indices)
}

pub fn spectrograms(waves: &[Waveform], stft: &StftConfig) -> Result<Vec<PowerSpectrogram>> {
    waves.iter().map(|w| stft_power(w, stft)).collect()
}

pub fn tokenize_all(vq: &VqVae, specs: &[PowerSpectrogram]) -> Result<Vec<QuantizedGrid>> {
    specs.iter().map(|s| vq.tokenize(s)).collect()
}

#[cfg(test)]
mod tests;
