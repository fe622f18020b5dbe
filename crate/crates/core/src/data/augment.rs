use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::read_path_list;
use crate::audio::Waveform;
use crate::error::{KwsError, Result};

/// Fraction of clipped samples above which the mix is peak-normalized
/// instead of hard-clipped.
const CLIP_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSpec {
    pub noise_paths: Vec<PathBuf>,
    pub rir_paths: Vec<PathBuf>,
    pub snr_choices_db: Vec<f64>,
    pub augment_probability: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            noise_paths: Vec::new(),
            rir_paths: Vec::new(),
            snr_choices_db: vec![-6.0, 0.0, 6.0],
            augment_probability: 0.5,
        }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.augment_probability) {
            return Err(KwsError::InvalidArgument(format!(
                "augment_probability {} outside [0, 1]",
                self.augment_probability
            )));
        }
        if !self.noise_paths.is_empty() && self.snr_choices_db.is_empty() {
            return Err(KwsError::InvalidArgument("noise given but no SNR choices".into()));
        }
        Ok(())
    }

    /// Reads noise and RIR paths from newline-delimited list files.
    pub fn with_lists(mut self, noise_list: Option<&std::path::Path>, rir_list: Option<&std::path::Path>) -> Result<Self> {
        if let Some(p) = noise_list {
            self.noise_paths = read_path_list(p)?;
        }
        if let Some(p) = rir_list {
            self.rir_paths = read_path_list(p)?;
        }
        Ok(self)
    }
}

/// Loaded noise and impulse-response waveforms plus the augmentation policy.
#[derive(Debug, Clone)]
pub struct AugmentationBank {
    pub noises: Vec<Waveform>,
    pub rirs: Vec<Waveform>,
    pub snr_choices_db: Vec<f64>,
    pub probability: f64,
}

impl AugmentationBank {
    pub fn none() -> Self {
        AugmentationBank {
            noises: Vec::new(),
            rirs: Vec::new(),
            snr_choices_db: Vec::new(),
            probability: 0.0,
        }
    }

    pub fn load(spec: &AugmentationSpec) -> Result<Self> {
        spec.validate()?;
        let read = |ps: &[PathBuf]| ps.iter().map(|p| Waveform::read_wav(p)).collect::<Result<Vec<_>>>();
        Ok(AugmentationBank {
            noises: read(&spec.noise_paths)?,
            rirs: read(&spec.rir_paths)?,
            snr_choices_db: spec.snr_choices_db.clone(),
            probability: spec.augment_probability,
        })
    }

    pub fn is_active(&self) -> bool {
        self.probability > 0.0 && (!self.noises.is_empty() || !self.rirs.is_empty())
    }

    /// Decides and applies augmentation for one clip. Returns `None` when
    /// the clip is left untouched.
    pub fn maybe_augment(&self, w: &Waveform, rng: &mut impl Rng) -> Result<Option<Waveform>> {
        if !self.is_active() || !rng.gen_bool(self.probability) {
            return Ok(None);
        }
        let mut out = w.clone();
        if let Some(rir) = self.rirs.choose(rng) {
            out = convolve_rir(&out, rir)?;
        }
        if let (Some(noise), Some(snr)) = (self.noises.choose(rng), self.snr_choices_db.choose(rng)) {
            if out.power() > 0.0 && noise.power() > 0.0 {
                let offset = rng.gen_range(0..noise.len());
                let mut shifted = noise.samples()[offset..].to_vec();
                shifted.extend_from_slice(&noise.samples()[..offset]);
                out = mix_at_snr(&out, &Waveform::new(shifted)?, *snr)?;
            }
        }
        Ok(Some(out))
    }
}

/// Adds `noise` scaled so that `10·log10(P_clean / P_noise) = snr_db`, with
/// powers measured over the whole clean length. Noise shorter than the clean
/// signal is looped; longer noise is cropped.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    if clean.is_empty() || clean.power() == 0.0 {
        return Err(KwsError::Silent("clean signal"));
    }
    if noise.is_empty() || noise.power() == 0.0 {
        return Err(KwsError::Silent("noise"));
    }
    let n = clean.len();
    let looped: Vec<f64> = noise.samples().iter().copied().cycle().take(n).collect();
    let p_noise = looped.iter().map(|s| s * s).sum::<f64>() / n as f64;
    if p_noise == 0.0 {
        return Err(KwsError::Silent("noise"));
    }
    let gain = (clean.power() / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let mut out: Vec<f64> = clean.samples().iter().zip(&looped).map(|(c, v)| c + gain * v).collect();
    let clipped = out.iter().filter(|s| s.abs() > 1.0).count();
    if clipped as f64 > CLIP_FRACTION * n as f64 {
        let peak = out.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        out.iter_mut().for_each(|s| *s /= peak);
    } else {
        out.iter_mut().for_each(|s| *s = s.clamp(-1.0, 1.0));
    }
    Waveform::new(out)
}

/// Linear convolution truncated to the input length, rescaled to the
/// input's peak. Computed with FFTs.
pub fn convolve_rir(w: &Waveform, rir: &Waveform) -> Result<Waveform> {
    if rir.is_empty() {
        return Err(KwsError::InvalidArgument("empty impulse response".into()));
    }
    if w.is_empty() {
        return Ok(w.clone());
    }
    let n = w.len();
    let size = (n + rir.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let pad = |s: &[f64]| {
        let mut v: Vec<Complex<f64>> = s.iter().map(|x| Complex::new(*x, 0.0)).collect();
        v.resize(size, Complex::new(0.0, 0.0));
        v
    };
    let mut a = pad(w.samples());
    let mut b = pad(rir.samples());
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    inv.process(&mut a);
    let mut out: Vec<f64> = a[..n].iter().map(|c| c.re / size as f64).collect();
    let (peak_in, peak_out) = (w.peak(), out.iter().fold(0.0f64, |m, s| m.max(s.abs())));
    if peak_out > 0.0 {
        let g = peak_in / peak_out;
        out.iter_mut().for_each(|s| *s *= g);
    }
    Waveform::new(out)
}
