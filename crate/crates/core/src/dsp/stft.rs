use std::f64::consts::PI;

use rustfft::{num_complex::Complex, FftPlanner};

use super::Waveform;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop: usize,
}

impl Default for StftConfig {
    /// 64 ms Hann window at 16 kHz with hop `floor(0.3 · 1024) = 307`.
    fn default() -> Self {
        StftConfig { fft_size: 1024, hop: 307 }
    }
}

impl StftConfig {
    pub fn from_overlap(fft_size: usize, overlap: f64) -> Self {
        let hop = ((1.0 - overlap) * fft_size as f64 + 1e-9).floor() as usize;
        StftConfig { fft_size, hop: hop.max(1) }
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// `floor((n - fft) / hop) + 1` frames, no padding.
    pub fn frame_count(&self, n: usize) -> Option<usize> {
        (n >= self.fft_size).then(|| (n - self.fft_size) / self.hop + 1)
    }
}

/// Nonnegative `frames × bins` power matrix, row = frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerSpectrogram {
    pub n_frames: usize,
    pub n_bins: usize,
    pub hop: usize,
    pub data: Vec<f64>,
}

impl PowerSpectrogram {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_bins..(t + 1) * self.n_bins]
    }

    /// Keeps frames `[start, start + len)`.
    pub fn crop(&self, start: usize, len: usize) -> PowerSpectrogram {
        PowerSpectrogram { n_frames: len, n_bins: self.n_bins, hop: self.hop, data: self.data[start * self.n_bins..(start + len) * self.n_bins].to_vec() }
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Short-time power spectrum: `|DFT(hann · frame)|²` for bins `0..=fft/2`.
pub fn stft_power(w: &Waveform, cfg: &StftConfig) -> Result<PowerSpectrogram> {
    let n_frames = cfg.frame_count(w.samples.len()).ok_or(Error::TooShort { len: w.samples.len(), min: cfg.fft_size })?;
    let window = hann(cfg.fft_size);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let bins = cfg.bins();
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let mut data = Vec::with_capacity(n_frames * bins);
    for t in 0..n_frames {
        let start = t * cfg.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(w.samples[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        data.extend(buf[..bins].iter().map(|c| c.norm_sqr()));
    }
    Ok(PowerSpectrogram { n_frames, n_bins: bins, hop: cfg.hop, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_dft_power(x: &[f64], bin: usize) -> f64 {
        let n = x.len() as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (i, v) in x.iter().enumerate() {
            let a = -2.0 * PI * bin as f64 * i as f64 / n;
            re += v * a.cos();
            im += v * a.sin();
        }
        re * re + im * im
    }

    fn sine(freq: f64, n: usize) -> Waveform {
        Waveform::new((0..n).map(|i| (2.0 * PI * freq * i as f64 / 16000.0).sin() * 0.5).collect(), 16000).unwrap()
    }

    #[test]
    fn hop_from_overlap() {
        assert_eq!(StftConfig::from_overlap(1024, 0.7), StftConfig::default());
        assert_eq!(StftConfig::default().bins(), 513);
    }

    #[test]
    fn zero_signal_frames() {
        let w = Waveform::new(vec![0.0; 1638], 16000).unwrap();
        let s = stft_power(&w, &StftConfig::default()).unwrap();
        assert_eq!((s.n_frames, s.n_bins), (3, 513));
        assert!(s.data.iter().all(|&v| v == 0.0));
        let w = Waveform::new(vec![0.0; 1024 + 307], 16000).unwrap();
        assert_eq!(stft_power(&w, &StftConfig::default()).unwrap().n_frames, 2);
    }

    #[test]
    fn too_short_input_names_minimum() {
        let w = Waveform::new(vec![0.0; 1000], 16000).unwrap();
        let err = stft_power(&w, &StftConfig::default()).unwrap_err();
        assert!(err.to_string().contains("at least 1024"), "{err}");
    }

    #[test]
    fn sine_peaks_at_expected_bin_and_matches_direct_dft() {
        let w = sine(1000.0, 16000);
        let cfg = StftConfig::default();
        let s = stft_power(&w, &cfg).unwrap();
        let expected_bin = (1000.0f64 * 1024.0 / 16000.0).round() as usize;
        assert_eq!(expected_bin, 64);
        for t in 0..s.n_frames {
            let f = s.frame(t);
            let argmax = (0..f.len()).max_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap();
            assert_eq!(argmax, 64, "frame {t}");
        }
        // one windowed frame against a direct DFT
        let win = hann(1024);
        let frame: Vec<f64> = (0..1024).map(|i| w.samples[307 + i] * win[i]).collect();
        for bin in [0, 10, 63, 64, 65, 512] {
            let d = direct_dft_power(&frame, bin);
            assert!((s.frame(1)[bin] - d).abs() <= 1e-9 * d.max(1.0), "bin {bin}");
        }
    }

    #[test]
    fn power_scales_quadratically() {
        let w = sine(440.0, 4000);
        let scaled = Waveform::new(w.samples.iter().map(|v| v * 0.3).collect(), 16000).unwrap();
        let (a, b) = (stft_power(&w, &StftConfig::default()).unwrap(), stft_power(&scaled, &StftConfig::default()).unwrap());
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x * 0.09 - y).abs() <= 1e-9 * x.max(1e-3));
            assert!(*y >= 0.0);
        }
    }
}
