//! PCM-16 WAV reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const TARGET_RATE: u32 = 16_000;

/// Mono audio with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Data("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Data("waveform contains non-finite samples".into()));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn wav_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Wav { offset, message: message.into() }
}

fn u16_at(b: &[u8], off: usize) -> Result<u16> {
    b.get(off..off + 2).map(|s| u16::from_le_bytes([s[0], s[1]])).ok_or_else(|| wav_err(off, "unexpected end of file"))
}

fn u32_at(b: &[u8], off: usize) -> Result<u32> {
    b.get(off..off + 4).map(|s| u32::from_le_bytes([s[0], s[1], s[2], s[3]])).ok_or_else(|| wav_err(off, "unexpected end of file"))
}

/// Decodes a 16-bit PCM WAV byte stream at its native rate; channels are averaged.
pub fn decode_wav(bytes: &[u8]) -> Result<Waveform> {
    if bytes.get(0..4) != Some(b"RIFF") {
        return Err(wav_err(0, "missing RIFF tag"));
    }
    if bytes.get(8..12) != Some(b"WAVE") {
        return Err(wav_err(8, "missing WAVE tag"));
    }
    let mut off = 12;
    let mut format: Option<(u16, u32, u16)> = None;
    while off + 8 <= bytes.len() {
        let id = &bytes[off..off + 4];
        let size = u32_at(bytes, off + 4)? as usize;
        let body = off + 8;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(wav_err(body, format!("fmt chunk too small ({size} bytes)")));
                }
                let mut tag = u16_at(bytes, body)?;
                let channels = u16_at(bytes, body + 2)?;
                let rate = u32_at(bytes, body + 4)?;
                let bits = u16_at(bytes, body + 14)?;
                if tag == 0xFFFE && size >= 26 {
                    // WAVE_FORMAT_EXTENSIBLE: first two bytes of the subformat GUID
                    tag = u16_at(bytes, body + 24)?;
                }
                if tag != 1 {
                    return Err(wav_err(body, format!("unsupported encoding tag {tag}, only PCM is read")));
                }
                if bits != 16 {
                    return Err(wav_err(body + 14, format!("unsupported bit depth {bits}, only 16-bit PCM is read")));
                }
                if channels == 0 || rate == 0 {
                    return Err(wav_err(body + 2, "zero channels or sample rate"));
                }
                format = Some((channels, rate, bits));
            }
            b"data" => {
                let (channels, rate, _) = format.ok_or_else(|| wav_err(off, "data chunk before fmt chunk"))?;
                let end = body + size;
                if end > bytes.len() {
                    return Err(wav_err(off + 4, format!("data chunk claims {size} bytes, file has {}", bytes.len() - body)));
                }
                let frame = 2 * channels as usize;
                let samples = bytes[body..end]
                    .chunks_exact(frame)
                    .map(|f| {
                        let sum: f64 = f.chunks_exact(2).map(|s| i16::from_le_bytes([s[0], s[1]]) as f64).sum();
                        sum / channels as f64 / 32768.0
                    })
                    .collect();
                return Waveform::new(samples, rate);
            }
            _ => {}
        }
        off = body + size + (size & 1);
    }
    Err(wav_err(off, "no data chunk"))
}

/// Reads a PCM-16 WAV file and resamples it to 16 kHz.
pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(resample_linear(&decode_wav(&bytes)?, TARGET_RATE))
}

/// Linear-interpolation resampling; `N` samples map to `floor((N-1)·to/from) + 1`.
pub fn resample_linear(w: &Waveform, to: u32) -> Waveform {
    if w.sample_rate == to || w.samples.is_empty() {
        return Waveform { samples: w.samples.clone(), sample_rate: to };
    }
    let n = w.samples.len();
    let out_len = ((n as u64 - 1) * to as u64 / w.sample_rate as u64) as usize + 1;
    let step = w.sample_rate as f64 / to as f64;
    let samples = (0..out_len)
        .map(|j| {
            let pos = j as f64 * step;
            let i = (pos.floor() as usize).min(n - 1);
            let frac = pos - i as f64;
            if i + 1 < n {
                w.samples[i] * (1.0 - frac) + w.samples[i + 1] * frac
            } else {
                w.samples[i]
            }
        })
        .collect();
    Waveform { samples, sample_rate: to }
}

pub fn encode_wav(w: &Waveform) -> Vec<u8> {
    let data_len = (w.samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_wav(w)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pcm(rate: u32, channels: u16, samples: &[i16]) -> Vec<u8> {
        let data_len = (samples.len() * 2) as u32;
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data_len).to_le_bytes());
        out.extend_from_slice(b"WAVEfmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        out.extend_from_slice(&(rate * 2 * channels as u32).to_le_bytes());
        out.extend_from_slice(&(2 * channels).to_le_bytes());
        out.extend_from_slice(&16u16.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&data_len.to_le_bytes());
        for s in samples {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    #[test]
    fn one_second_of_silence() {
        let w = decode_wav(&pcm(16000, 1, &vec![0; 16000])).unwrap();
        assert_eq!(w.samples.len(), 16000);
        assert!(w.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn int16_scaling() {
        let w = decode_wav(&pcm(16000, 1, &[16384, -32768])).unwrap();
        assert!((w.samples[0] - 0.5).abs() < 1e-4);
        assert_eq!(w.samples[1], -1.0);
    }

    #[test]
    fn stereo_is_averaged() {
        let w = decode_wav(&pcm(16000, 2, &[16384, 0, -16384, -16384])).unwrap();
        assert_eq!(w.samples, vec![0.25, -0.5]);
    }

    #[test]
    fn upsampling_from_8khz() {
        let n = 101;
        let w = Waveform::new((0..n).map(|i| i as f64 / n as f64).collect(), 8000).unwrap();
        let r = resample_linear(&w, TARGET_RATE);
        assert_eq!(r.samples.len(), 2 * n - 1);
        assert!((r.samples[1] - 0.5 / n as f64).abs() < 1e-12);
    }

    #[test]
    fn malformed_headers_report_offsets() {
        let err = decode_wav(b"RIFX0000WAVE").unwrap_err();
        assert!(matches!(err, Error::Wav { offset: 0, .. }));
        let mut bytes = pcm(16000, 1, &[1, 2]);
        bytes[20] = 3; // IEEE float tag
        let err = decode_wav(&bytes).unwrap_err();
        assert!(matches!(err, Error::Wav { offset: 20, .. }), "{err}");
        let mut bytes = pcm(16000, 1, &[1, 2]);
        bytes[34] = 24;
        assert!(matches!(decode_wav(&bytes).unwrap_err(), Error::Wav { offset: 34, .. }));
        let bytes = pcm(16000, 1, &[1, 2]);
        assert!(matches!(decode_wav(&bytes[..40]).unwrap_err(), Error::Wav { .. }));
    }

    #[test]
    fn encode_decode_roundtrip_within_quantization() {
        let w = Waveform::new((0..500).map(|i| (i as f64 * 0.01).sin() * 0.9).collect(), 16000).unwrap();
        let back = decode_wav(&encode_wav(&w)).unwrap();
        assert_eq!(back.sample_rate, 16000);
        for (a, b) in w.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() <= 0.5 / 32768.0 + 1e-12);
        }
    }
}
