//! Text and image dumps for inspection.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::PowerSpectrogram;
use crate::error::{Error, Result};

/// One CSV row per frame.
pub fn spectrogram_csv(spec: &PowerSpectrogram) -> String {
    let mut out = String::new();
    for t in 0..spec.n_frames {
        let row: Vec<String> = spec.frame(t).iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Binary 8-bit PGM of a row-major `height × width` grid, min-max scaled.
pub fn pgm_bytes(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    assert_eq!(values.len(), width * height);
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (((v - lo) / span) * 255.0).round() as u8));
    out
}

/// Log-compressed (`log1p`) spectrogram image; row = frame.
pub fn spectrogram_pgm(spec: &PowerSpectrogram) -> Vec<u8> {
    let logged: Vec<f64> = spec.data.iter().map(|v| v.ln_1p()).collect();
    pgm_bytes(spec.n_bins, spec.n_frames, &logged)
}

pub fn write_file(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_scaling() {
        let bytes = pgm_bytes(2, 1, &[0.0, 4.0]);
        assert_eq!(&bytes[..11], b"P5\n2 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 255]);
    }

    #[test]
    fn csv_has_one_row_per_frame() {
        let s = PowerSpectrogram { n_frames: 2, n_bins: 3, hop: 1, data: vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0] };
        let csv = spectrogram_csv(&s);
        assert_eq!(csv.lines().count(), 2);
        assert_eq!(csv.lines().next().unwrap().split(',').count(), 3);
    }
}
