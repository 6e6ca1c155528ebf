//! Power spectrogram of a 1 kHz tone: every frame peaks at bin 64.

use std::f64::consts::PI;

use vqmae::dsp::{stft_power, StftConfig, Waveform};

fn main() -> vqmae::Result<()> {
    let sr = 16_000;
    let samples = (0..sr).map(|n| (2.0 * PI * 1000.0 * n as f64 / sr as f64).sin()).collect();
    let wave = Waveform::new(samples, sr as u32)?;
    let cfg = StftConfig::default();
    let spec = stft_power(&wave, &cfg)?;
    println!("{} samples, fft {} hop {} -> {} frames x {} bins", wave.samples.len(), cfg.fft_size, cfg.hop, spec.n_frames, spec.n_bins);
    for t in [0, spec.n_frames / 2, spec.n_frames - 1] {
        let frame = spec.frame(t);
        let peak = (0..frame.len()).max_by(|&a, &b| frame[a].total_cmp(&frame[b])).unwrap();
        println!("frame {t:3}: peak bin {peak} ({:.1} Hz), power {:.3e}", peak as f64 * sr as f64 / cfg.fft_size as f64, frame[peak]);
    }
    Ok(())
}
