//! Audio frontend: 16 kHz mono waveforms to PCEN-normalized Mel features.

mod features;
mod mel;
mod pcen;
mod stft;

use std::path::Path;

pub use features::{FeatureExtractor, FeatureMatrix};
pub use mel::{hz_to_mel, mel_energies, mel_to_hz, MelFilterbank};
pub use pcen::{pcen, PcenParams, PcenState};
pub use stft::{hamming, stft_power, StftPlan};

use crate::error::{io_err, KwsError, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const FRAME_LEN: usize = 480;
pub const FRAME_HOP: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const N_BINS: usize = FFT_SIZE / 2 + 1;
pub const N_MELS: usize = 40;
/// Fixed model input length in seconds.
pub const SEGMENT_SECONDS: f64 = 1.8;

/// Mono audio at [`SAMPLE_RATE`].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(KwsError::NonFinite("waveform"));
        }
        Ok(Waveform { samples })
    }

    pub fn silence(len: usize) -> Self {
        Waveform {
            samples: vec![0.0; len],
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Reads a 16-bit PCM mono 16 kHz WAV file; anything else is rejected.
    pub fn read_wav(path: &Path) -> Result<Self> {
        let reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        let reject = |reason: String| KwsError::UnsupportedAudio {
            path: path.to_path_buf(),
            reason,
        };
        if spec.channels != 1 {
            return Err(reject(format!("{} channels, expected mono", spec.channels)));
        }
        if spec.sample_rate != SAMPLE_RATE {
            return Err(reject(format!("{} Hz, expected 16000", spec.sample_rate)));
        }
        if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(reject(format!(
                "{}-bit {:?}, expected 16-bit PCM",
                spec.bits_per_sample, spec.sample_format
            )));
        }
        let samples = reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Waveform { samples })
    }

    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
        }
        let mut writer = hound::WavWriter::create(path, spec)?;
        for s in &self.samples {
            let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            writer.write_sample(v)?;
        }
        writer.finalize()?;
        Ok(())
    }
}

/// Fixes the length to `round(target_s · 16000)` samples: shorter input is
/// zero-padded symmetrically (extra sample on the right), longer input is
/// center-cropped (extra sample dropped from the right).
pub fn segment(w: &Waveform, target_s: f64) -> Result<Waveform> {
    if !(target_s > 0.0) {
        return Err(KwsError::InvalidArgument(format!(
            "segment length must be positive, got {target_s}"
        )));
    }
    if w.is_empty() {
        return Err(KwsError::EmptyWaveform);
    }
    let n = (target_s * SAMPLE_RATE as f64).round() as usize;
    let len = w.len();
    let samples = if len >= n {
        let start = (len - n) / 2;
        w.samples[start..start + n].to_vec()
    } else {
        let left = (n - len) / 2;
        let mut out = vec![0.0; n];
        out[left..left + len].copy_from_slice(&w.samples);
        out
    };
    Ok(Waveform { samples })
}
