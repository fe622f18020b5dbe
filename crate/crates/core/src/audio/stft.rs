use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{Waveform, FFT_SIZE, FRAME_HOP, FRAME_LEN, N_BINS};
use crate::error::{KwsError, Result};
use crate::tensor::Tensor;

/// Symmetric Hamming window.
pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Reusable FFT plan and window for [`stft_power`].
#[derive(Clone)]
pub struct StftPlan {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

impl Default for StftPlan {
    fn default() -> Self {
        Self::new()
    }
}

impl StftPlan {
    pub fn new() -> Self {
        StftPlan {
            fft: FftPlanner::new().plan_fft_forward(FFT_SIZE),
            window: hamming(FRAME_LEN),
        }
    }

    pub fn frame_count(len: usize) -> usize {
        if len < FRAME_LEN {
            0
        } else {
            (len - FRAME_LEN) / FRAME_HOP + 1
        }
    }

    /// `T × 257` power spectrogram over full frames only.
    pub fn power(&self, w: &Waveform) -> Result<Tensor> {
        let frames = Self::frame_count(w.len());
        if frames == 0 {
            return Err(KwsError::TooShort {
                len: w.len(),
                needed: FRAME_LEN,
            });
        }
        let mut out = Vec::with_capacity(frames * N_BINS);
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for f in 0..frames {
            let frame = &w.samples()[f * FRAME_HOP..f * FRAME_HOP + FRAME_LEN];
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < FRAME_LEN {
                    Complex::new(frame[i] * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            out.extend(buf[..N_BINS].iter().map(|c| c.norm_sqr()));
        }
        Tensor::new(&[frames, N_BINS], out)
    }
}

/// 480-sample Hamming frames every 160 samples, zero-padded to a 512-point
/// FFT; squared magnitude of bins 0..=256.
pub fn stft_power(w: &Waveform) -> Result<Tensor> {
    StftPlan::new().power(w)
}
