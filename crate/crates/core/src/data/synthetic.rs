//! Deterministic harmonic "emotional speech" generator.
//!
//! Each utterance is a fundamental plus eight partials. Class identity lives
//! mostly in prosody (pitch contour, amplitude-modulation rate, spectral
//! tilt); speakers differ in base pitch, so absolute pitch overlaps across
//! classes.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{CorpusManifest, Record};
use crate::dsp::{Waveform, TARGET_RATE};
use crate::error::{Error, Result};
use crate::tokens::derive_seed;

/// Class names in order; the first `C` are used.
pub const CLASS_NAMES: [&str; 8] = ["neutral", "happy", "sad", "angry", "calm", "fearful", "disgust", "surprised"];

const PARTIALS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub speakers: usize,
    pub per_speaker: usize,
    pub min_secs: f64,
    pub max_secs: f64,
    /// Standard deviation of per-utterance perturbations of the class
    /// template, relative to the template's spread.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { classes: 4, speakers: 20, per_speaker: 50, min_secs: 1.5, max_secs: 2.5, jitter: 0.35, seed: 0 }
    }
}

/// Prosody template of one class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassTemplate {
    /// Pitch excursion in semitones over the utterance.
    pub contour_slope: f64,
    /// Mid-utterance bump in semitones (positive: rise-fall).
    pub contour_bend: f64,
    /// Semitone offset relative to the speaker's base pitch.
    pub pitch_offset: f64,
    pub am_rate: f64,
    pub am_depth: f64,
    /// Partial `h` has amplitude `h^-tilt`.
    pub tilt: f64,
}

impl ClassTemplate {
    pub fn for_class(c: usize) -> Self {
        // four base shapes; classes 4..8 reuse them with altered dynamics
        let (slope, bend, offset) = [(0.0, 0.0, 0.0), (5.0, 2.0, 2.0), (-5.0, 0.0, -1.5), (1.0, 5.0, 1.0)][c % 4];
        let variant = (c / 4) as f64;
        ClassTemplate {
            contour_slope: slope * (1.0 - 0.5 * variant),
            contour_bend: bend - 2.0 * variant,
            pitch_offset: offset,
            am_rate: [3.0, 6.0, 2.0, 8.0][c % 4] + 1.5 * variant,
            am_depth: [0.2, 0.45, 0.15, 0.6][c % 4],
            tilt: [1.2, 0.9, 1.6, 0.7][c % 4] + 0.2 * variant,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=CLASS_NAMES.len()).contains(&self.classes) {
            return Err(Error::Config(format!("synthetic corpus needs 2..=8 classes, got {}", self.classes)));
        }
        if self.speakers < 5 {
            return Err(Error::Config(format!("synthetic corpus needs at least 5 speakers for 5-fold speaker-disjoint folds, got {}", self.speakers)));
        }
        if self.per_speaker == 0 || !(self.min_secs > 0.1 && self.min_secs <= self.max_secs) || self.jitter < 0.0 {
            return Err(Error::Config(format!("invalid synthetic corpus spec {self:?}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.speakers * self.per_speaker
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_names(&self) -> Vec<String> {
        CLASS_NAMES[..self.classes].iter().map(|s| s.to_string()).collect()
    }

    /// Base pitch of speaker `s` in Hz, spread over 90–240 Hz with a
    /// minimum spacing so speakers stay distinguishable.
    pub fn speaker_pitch(&self, s: usize) -> f64 {
        // pitch slots are dealt to speakers in seeded random order
        let mut slots: Vec<usize> = (0..self.speakers).collect();
        slots.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 0x5107, 0)));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 0x5bea_4e55, s as u64));
        let step = (90f64 / 240.0).log2() / self.speakers as f64; // negative octave step
        let frac = (slots[s] as f64 + rng.gen_range(0.2..0.8)) * step;
        240.0 * 2f64.powf(frac)
    }

    pub fn speaker_id(s: usize) -> String {
        format!("spk{s:03}")
    }

    /// Utterance `i` (speaker `i / per_speaker`, class `i % classes`): its
    /// record and waveform. A pure function of `(self, i)`.
    pub fn utterance(&self, i: usize) -> (Record, Waveform) {
        let speaker = i / self.per_speaker;
        let class = i % self.classes;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, 0x0a7e_7a2c, i as u64));
        let tpl = ClassTemplate::for_class(class);
        let unit = Normal::new(0.0, 1.0).expect("valid normal");
        let secs = rng.gen_range(self.min_secs..=self.max_secs);
        let mut jit = |scale: f64| scale * self.jitter * unit.sample(&mut rng);
        let n = (secs * TARGET_RATE as f64) as usize;
        let base = self.speaker_pitch(speaker) * 2f64.powf((tpl.pitch_offset + jit(1.0)) / 12.0);
        let slope = tpl.contour_slope + jit(2.0);
        let bend = tpl.contour_bend + jit(1.5);
        let am_rate = (tpl.am_rate + jit(1.5)).max(0.5);
        let am_depth = (tpl.am_depth + jit(0.1)).clamp(0.0, 0.9);
        let tilt = (tpl.tilt + jit(0.2)).max(0.3);
        let am_phase = rng.gen_range(0.0..2.0 * PI);
        let vibrato = rng.gen_range(4.0..6.0);

        let rate = TARGET_RATE as f64;
        let amps: Vec<f64> = (1..=PARTIALS + 1).map(|h| (h as f64).powf(-tilt)).collect();
        let norm: f64 = amps.iter().sum();
        let mut phase = rng.gen_range(0.0..2.0 * PI);
        let mut samples = Vec::with_capacity(n);
        for k in 0..n {
            let u = k as f64 / n as f64;
            let semis = slope * (u - 0.5) + bend * (PI * u).sin() + 0.15 * (2.0 * PI * vibrato * k as f64 / rate).sin();
            let f0 = base * 2f64.powf(semis / 12.0);
            phase += 2.0 * PI * f0 / rate;
            let mut v = 0.0;
            for (h, a) in amps.iter().enumerate() {
                if f0 * (h + 1) as f64 >= rate / 2.0 {
                    break;
                }
                v += a * ((h + 1) as f64 * phase).sin();
            }
            let t = k as f64 / rate;
            let am = 1.0 - am_depth * 0.5 * (1.0 + (2.0 * PI * am_rate * t + am_phase).sin());
            // 30 ms raised-cosine onset/offset
            let edge = (t.min(n as f64 / rate - t) / 0.03).min(1.0);
            let env = 0.5 - 0.5 * (PI * edge).cos();
            samples.push(0.5 * env * am * v / norm + 1e-3 * unit.sample(&mut rng));
        }

        let record = Record {
            utterance_id: format!("syn{i:05}"),
            speaker_id: Self::speaker_id(speaker),
            label: class,
            relpath: format!("{}/syn{i:05}.wav", Self::speaker_id(speaker)),
        };
        (record, Waveform { samples, sample_rate: TARGET_RATE })
    }
}

/// The whole corpus in memory, in utterance order.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<(CorpusManifest, Vec<Waveform>)> {
    spec.validate()?;
    let (records, waves): (Vec<_>, Vec<_>) = (0..spec.len()).map(|i| spec.utterance(i)).unzip();
    Ok((CorpusManifest { classes: spec.class_names(), records }, waves))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{stft_power, StftConfig};

    fn small() -> SyntheticSpec {
        SyntheticSpec { speakers: 6, per_speaker: 8, ..SyntheticSpec::default() }
    }

    #[test]
    fn generation_is_deterministic() {
        let (m1, w1) = generate_synthetic_corpus(&small()).unwrap();
        let (m2, w2) = generate_synthetic_corpus(&small()).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(w1, w2);
        let (_, w3) = generate_synthetic_corpus(&SyntheticSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(w1, w3);
    }

    #[test]
    fn durations_and_amplitudes_in_range() {
        let (m, w) = generate_synthetic_corpus(&small()).unwrap();
        assert_eq!(m.records.len(), 48);
        for x in &w {
            assert!((1.5..=2.5).contains(&x.duration_secs()), "{}", x.duration_secs());
            assert!(x.samples.iter().all(|s| s.abs() < 1.0));
        }
        let classes: std::collections::BTreeSet<_> = m.records.iter().map(|r| r.label).collect();
        assert_eq!(classes.len(), 4);
    }

    #[test]
    fn too_few_speakers_is_an_error() {
        let err = generate_synthetic_corpus(&SyntheticSpec { speakers: 4, ..small() }).unwrap_err();
        assert!(err.to_string().contains("5 speakers"), "{err}");
    }

    fn mean_log_spectrum(w: &Waveform) -> Vec<f64> {
        let s = stft_power(w, &StftConfig::default()).unwrap();
        let mut m = vec![0.0; s.n_bins];
        for t in 0..s.n_frames {
            for (a, v) in m.iter_mut().zip(s.frame(t)) {
                *a += (1e-8 + v).ln() / s.n_frames as f64;
            }
        }
        m
    }

    #[test]
    fn nearest_centroid_beats_chance() {
        let spec = SyntheticSpec { speakers: 10, per_speaker: 8, ..SyntheticSpec::default() };
        let (m, w) = generate_synthetic_corpus(&spec).unwrap();
        let feats: Vec<Vec<f64>> = w.iter().map(mean_log_spectrum).collect();
        // centroids from the first 5 speakers, tested on the other 5
        let split = 5 * spec.per_speaker;
        let mut centroids = vec![vec![0.0; feats[0].len()]; 4];
        let mut counts = [0.0; 4];
        for (f, r) in feats[..split].iter().zip(&m.records) {
            counts[r.label] += 1.0;
            centroids[r.label].iter_mut().zip(f).for_each(|(c, v)| *c += v);
        }
        for (c, n) in centroids.iter_mut().zip(counts) {
            c.iter_mut().for_each(|v| *v /= n);
        }
        let mut correct = 0;
        for (f, r) in feats[split..].iter().zip(&m.records[split..]) {
            let dist = |c: &Vec<f64>| c.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            let best = (0..4).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
            correct += (best == r.label) as usize;
        }
        let acc = correct as f64 / (feats.len() - split) as f64;
        assert!(acc > 1.5 * 0.25, "{acc}");
    }

    /// Autocorrelation pitch of the middle 100 ms.
    fn median_f0(w: &Waveform) -> f64 {
        let mid = w.samples.len() / 2;
        let x = &w.samples[mid - 800..mid + 800];
        let (lo, hi) = (16000 / 400, 16000 / 60);
        let ac = |lag: usize| x[..x.len() - lag].iter().zip(&x[lag..]).map(|(a, b)| a * b).sum::<f64>();
        let lag = (lo..hi).max_by(|&a, &b| ac(a).total_cmp(&ac(b))).unwrap();
        16000.0 / lag as f64
    }

    #[test]
    fn speakers_have_distinct_pitch() {
        // neutral utterances only: flat contour, no class offset
        let spec = SyntheticSpec { jitter: 0.0, ..small() };
        let mut meds = Vec::new();
        for s in 0..spec.speakers {
            let mut f0s: Vec<f64> =
                (0..spec.per_speaker).map(|k| s * spec.per_speaker + k).filter(|i| i % spec.classes == 0).map(|i| median_f0(&spec.utterance(i).1)).collect();
            f0s.sort_by(f64::total_cmp);
            meds.push(f0s[f0s.len() / 2]);
        }
        for a in 0..meds.len() {
            for b in a + 1..meds.len() {
                let rel = (meds[a] / meds[b]).ln().abs();
                assert!(rel > 0.02, "speakers {a} and {b}: {} vs {}", meds[a], meds[b]);
            }
        }
        // pitch oracle tracks the generator's base pitch
        for (s, m) in meds.iter().enumerate() {
            assert!((m / spec.speaker_pitch(s)).ln().abs() < 0.1, "speaker {s}: {m} vs {}", spec.speaker_pitch(s));
        }
    }

    #[test]
    fn generation_throughput() {
        let spec = SyntheticSpec { speakers: 5, per_speaker: 40, ..SyntheticSpec::default() };
        let start = std::time::Instant::now();
        let (_, w) = generate_synthetic_corpus(&spec).unwrap();
        let rate = w.len() as f64 / start.elapsed().as_secs_f64();
        assert!(rate >= 100.0, "{rate} utterances/s");
    }
}
