//! Waveform ingestion and STFT power spectrograms.

pub mod export;
mod stft;
mod wav;

pub use stft::{hann, stft_power, PowerSpectrogram, StftConfig};
pub use wav::{decode_wav, encode_wav, load_wav, resample_linear, write_wav, Waveform, TARGET_RATE};
