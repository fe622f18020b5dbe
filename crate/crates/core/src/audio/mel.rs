use super::{FFT_SIZE, N_BINS, N_MELS, SAMPLE_RATE};
use crate::error::{KwsError, Result};
use crate::tensor::Tensor;

/// HTK Mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with unit peak, centers equally spaced on the Mel
/// scale. Each band stores only its nonzero span.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    n_bins: usize,
    bands: Vec<(usize, Vec<f64>)>,
}

impl Default for MelFilterbank {
    fn default() -> Self {
        Self::new(N_MELS, FFT_SIZE, SAMPLE_RATE as f64, 0.0, SAMPLE_RATE as f64 / 2.0)
    }
}

impl MelFilterbank {
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: f64, fmin: f64, fmax: f64) -> Self {
        let n_bins = n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = sample_rate / n_fft as f64;
        let bands = (0..n_mels)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                let weights: Vec<(usize, f64)> = (0..n_bins)
                    .filter_map(|k| {
                        let f = k as f64 * bin_hz;
                        let w = if f > l && f <= c {
                            (f - l) / (c - l)
                        } else if f > c && f < r {
                            (r - f) / (r - c)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((k, w))
                    })
                    .collect();
                let start = weights.first().map_or(0, |w| w.0);
                (start, weights.into_iter().map(|w| w.1).collect())
            })
            .collect();
        MelFilterbank { n_bins, bands }
    }

    pub fn n_mels(&self) -> usize {
        self.bands.len()
    }

    /// Dense `n_mels × n_bins` weight matrix.
    pub fn dense(&self) -> Tensor {
        let mut out = Tensor::zeros(&[self.bands.len(), self.n_bins]);
        for (m, (start, w)) in self.bands.iter().enumerate() {
            let row = &mut out.data_mut()[m * self.n_bins..(m + 1) * self.n_bins];
            row[*start..start + w.len()].copy_from_slice(w);
        }
        out
    }

    pub fn band_weight_sums(&self) -> Vec<f64> {
        self.bands.iter().map(|(_, w)| w.iter().sum()).collect()
    }

    pub fn apply(&self, power: &Tensor) -> Result<Tensor> {
        if power.shape().len() != 2 || power.cols() != self.n_bins {
            return Err(KwsError::Shape(format!(
                "power spectrogram {:?}, expected [T, {}]",
                power.shape(),
                self.n_bins
            )));
        }
        let t = power.rows();
        let mut out = Vec::with_capacity(t * self.bands.len());
        for f in 0..t {
            let row = power.row(f);
            for (start, w) in &self.bands {
                out.push(w.iter().zip(&row[*start..]).map(|(a, b)| a * b).sum());
            }
        }
        Tensor::new(&[t, self.bands.len()], out)
    }
}

/// 40 HTK-Mel bands over 0–8000 Hz applied to a `T × 257` power spectrogram.
pub fn mel_energies(power: &Tensor) -> Result<Tensor> {
    if power.cols() != N_BINS {
        return Err(KwsError::Shape(format!("expected {N_BINS} bins, got {}", power.cols())));
    }
    MelFilterbank::default().apply(power)
}
