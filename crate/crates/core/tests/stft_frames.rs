use proptest::prelude::*;
use vqmae::dsp::{stft_power, StftConfig, Waveform};

/// Counts analysis windows by walking start offsets one hop at a time.
fn enumerate_frames(n: usize, fft: usize, hop: usize) -> usize {
    let mut count = 0;
    let mut start = 0;
    while start + fft <= n {
        count += 1;
        start += hop;
    }
    count
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn frame_count_matches_enumeration(n in 0usize..40_000) {
        let cfg = StftConfig::default();
        let expected = enumerate_frames(n, cfg.fft_size, cfg.hop);
        prop_assert_eq!(cfg.frame_count(n).unwrap_or(0), expected);
    }

    #[test]
    fn spectrogram_has_counted_frames(n in 1024usize..6000) {
        let cfg = StftConfig::default();
        let w = Waveform::new((0..n).map(|i| ((i * 7919) % 113) as f64 / 113.0 - 0.5).collect(), 16_000).unwrap();
        let spec = stft_power(&w, &cfg).unwrap();
        prop_assert_eq!(spec.n_frames, enumerate_frames(n, cfg.fft_size, cfg.hop));
        prop_assert_eq!(spec.data.len(), spec.n_frames * 513);
        prop_assert!(spec.data.iter().all(|&p| p >= 0.0));
    }
}

#[test]
fn too_short_input_is_an_error() {
    let w = Waveform::new(vec![0.0; 1023], 16_000).unwrap();
    assert!(stft_power(&w, &StftConfig::default()).is_err());
}
