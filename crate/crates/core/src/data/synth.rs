//! Synthetic keyword corpus: a fixed four-syllable "keyword" built from
//! harmonic tone complexes, versus other syllable sequences, near-miss
//! variants of the keyword, and non-speech noise. Speaker variation comes
//! from pitch, formant and tempo scaling; every clip carries background
//! noise.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AugmentationBank, Clip, Corpus, Manifest, ManifestEntry, Split};
use crate::audio::{Waveform, SAMPLE_RATE, SEGMENT_SECONDS};
use crate::error::{io_err, Result};

const SR: f64 = SAMPLE_RATE as f64;

/// Syllable recipe: fundamental, two formants, duration, relative pitch glide.
#[derive(Debug, Clone, Copy)]
struct Syllable {
    f0: f64,
    formants: [f64; 2],
    dur_s: f64,
    glide: f64,
}

const KEYWORD_SYLLABLES: [Syllable; 4] = [
    Syllable { f0: 140.0, formants: [700.0, 1200.0], dur_s: 0.15, glide: 0.10 },
    Syllable { f0: 170.0, formants: [400.0, 2200.0], dur_s: 0.13, glide: 0.0 },
    Syllable { f0: 120.0, formants: [600.0, 1000.0], dur_s: 0.17, glide: -0.10 },
    Syllable { f0: 150.0, formants: [500.0, 1800.0], dur_s: 0.20, glide: -0.20 },
];

/// Formant shift of the near-miss twin of each keyword syllable.
const TWIN_SHIFT: [f64; 2] = [1.12, 0.9];

/// Keyword syllables `0..4`, then their twins `4..8`.
fn syllable(i: usize) -> Syllable {
    let base = KEYWORD_SYLLABLES[i % 4];
    if i < 4 {
        return base;
    }
    Syllable {
        formants: [base.formants[0] * TWIN_SHIFT[0], base.formants[1] * TWIN_SHIFT[1]],
        ..base
    }
}

const N_SYLLABLES: usize = 8;

pub const KEYWORD: [usize; 4] = [0, 1, 2, 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_positives: usize,
    pub train_negatives: usize,
    pub valid_positives: usize,
    pub valid_negatives: usize,
    pub test_positives: usize,
    pub test_negatives: usize,
    /// Background noise SNR range (dB) applied to every clip.
    pub background_snr_db: (f64, f64),
    /// Fraction of negatives that are near-miss keyword variants.
    pub hard_negative_fraction: f64,
    /// Fraction of negatives that are non-speech noise.
    pub noise_negative_fraction: f64,
    /// Speakers per split; splits never share a speaker.
    pub speakers_per_split: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            train_positives: 400,
            train_negatives: 1200,
            valid_positives: 100,
            valid_negatives: 400,
            test_positives: 200,
            test_negatives: 2000,
            background_snr_db: (-8.0, 12.0),
            hard_negative_fraction: 0.5,
            noise_negative_fraction: 0.1,
            speakers_per_split: 40,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Speaker {
    pitch: f64,
    formant: f64,
    tempo: f64,
}

impl Speaker {
    fn sample(rng: &mut impl Rng) -> Self {
        Speaker {
            pitch: rng.gen_range(0.75..1.35),
            formant: rng.gen_range(0.88..1.12),
            tempo: rng.gen_range(0.8..1.25),
        }
    }
}

pub struct Synthesizer {
    cfg: SynthConfig,
}

impl Synthesizer {
    pub fn new(cfg: SynthConfig) -> Self {
        Synthesizer { cfg }
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn corpus(&self) -> Corpus {
        let c = &self.cfg;
        Corpus {
            train: self.split(Split::Train, c.train_positives, c.train_negatives, 1),
            valid: self.split(Split::Valid, c.valid_positives, c.valid_negatives, 2),
            test: self.split(Split::Test, c.test_positives, c.test_negatives, 3),
        }
    }

    fn split(&self, split: Split, n_pos: usize, n_neg: usize, salt: u64) -> Vec<Clip> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_mul(1000).wrapping_add(salt));
        let speakers: Vec<Speaker> = (0..self.cfg.speakers_per_split.max(1))
            .map(|_| Speaker::sample(&mut rng))
            .collect();
        let mut clips = Vec::with_capacity(n_pos + n_neg);
        for i in 0..n_pos + n_neg {
            let label = (i < n_pos) as u8;
            let spk = *speakers.choose(&mut rng).unwrap();
            let wave = if label == 1 {
                self.utterance(&KEYWORD, spk, &mut rng)
            } else {
                self.negative(spk, &mut rng)
            };
            let wave = self.add_background(wave, &mut rng);
            clips.push(Clip {
                id: format!("{split}/{}_{i:05}.wav", if label == 1 { "pos" } else { "neg" }),
                wave,
                label,
            });
        }
        clips
    }

    fn negative(&self, spk: Speaker, rng: &mut ChaCha8Rng) -> Waveform {
        let u: f64 = rng.gen();
        if u < self.cfg.noise_negative_fraction {
            return non_speech(rng);
        }
        if u < self.cfg.noise_negative_fraction + self.cfg.hard_negative_fraction {
            let mut seq = KEYWORD.to_vec();
            match rng.gen_range(0..3) {
                0 => {
                    seq.remove(rng.gen_range(0..4));
                }
                1 => {
                    let i = rng.gen_range(0..3);
                    seq.swap(i, i + 1);
                }
                _ => {
                    let i = rng.gen_range(0..4);
                    seq[i] += 4;
                }
            }
            return self.utterance(&seq, spk, rng);
        }
        loop {
            let len = rng.gen_range(2..=6);
            let seq: Vec<usize> = (0..len).map(|_| rng.gen_range(0..N_SYLLABLES)).collect();
            if !seq.windows(4).any(|w| w == KEYWORD) {
                return self.utterance(&seq, spk, rng);
            }
        }
    }

    fn utterance(&self, seq: &[usize], spk: Speaker, rng: &mut ChaCha8Rng) -> Waveform {
        let n = (SEGMENT_SECONDS * SR).round() as usize;
        let mut parts = Vec::new();
        let mut total = 0usize;
        for &s in seq {
            // per-token jitter on top of the speaker
            let syl = syllable(s);
            let pitch = spk.pitch * rng.gen_range(0.95..1.05);
            let dur = syl.dur_s / spk.tempo * rng.gen_range(0.9..1.1);
            let samples = render_syllable(syl, pitch, spk.formant, dur, rng.gen_range(0.15..0.3));
            let gap = (rng.gen_range(0.02..0.07) / spk.tempo * SR) as usize;
            total += samples.len() + gap;
            parts.push((samples, gap));
        }
        let mut out = vec![0.0; n];
        let slack = n.saturating_sub(total);
        let mut pos = if slack > 1600 { rng.gen_range(800..slack - 800) } else { slack / 2 };
        for (samples, gap) in parts {
            for (i, v) in samples.iter().enumerate() {
                if pos + i < n {
                    out[pos + i] += v;
                }
            }
            pos += samples.len() + gap;
        }
        Waveform::new(out).unwrap()
    }

    fn add_background(&self, w: Waveform, rng: &mut ChaCha8Rng) -> Waveform {
        let (lo, hi) = self.cfg.background_snr_db;
        let noise = colored_noise(w.len(), rng.gen_range(0..3), rng);
        let snr = if hi > lo { rng.gen_range(lo..hi) } else { lo };
        if w.power() == 0.0 {
            return w;
        }
        super::mix_at_snr(&w, &noise, snr).unwrap_or(w)
    }

    /// A long recording of background noise and non-keyword speech with the
    /// keyword starting at each of `keyword_at_s`.
    pub fn stream(&self, duration_s: f64, keyword_at_s: &[f64]) -> Result<Waveform> {
        let n = (duration_s * SR).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x5EED_0057);
        let spk = Speaker::sample(&mut rng);
        let mut out = vec![0.0; n];
        let mut add = |start: usize, samples: &[f64]| {
            for (i, v) in samples.iter().enumerate() {
                if start + i < n {
                    out[start + i] += v;
                }
            }
        };
        // filler syllables away from the keyword positions
        let clear = |t: f64| keyword_at_s.iter().all(|k| (t - k).abs() > 1.5);
        let mut t = 0.3;
        while t < duration_s {
            if clear(t) {
                let syl = syllable(rng.gen_range(4..N_SYLLABLES));
                add((t * SR) as usize, &render_syllable(syl, spk.pitch, spk.formant, syl.dur_s / spk.tempo, 0.2));
            }
            t += rng.gen_range(0.6..1.4);
        }
        for k in keyword_at_s {
            let mut pos = (k * SR) as usize;
            for &s in &KEYWORD {
                let syl = syllable(s);
                let samples = render_syllable(syl, spk.pitch, spk.formant, syl.dur_s / spk.tempo, 0.25);
                add(pos, &samples);
                pos += samples.len() + (0.04 / spk.tempo * SR) as usize;
            }
        }
        let w = Waveform::new(out)?;
        let noise = colored_noise(n, 1, &mut rng);
        let (lo, hi) = self.cfg.background_snr_db;
        super::mix_at_snr(&w, &noise, hi.max(lo))
    }

    /// Synthetic noise recordings and room responses for online augmentation.
    pub fn augmentation_bank(&self, probability: f64) -> AugmentationBank {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0xA5A5_5A5A);
        let len = 3 * SAMPLE_RATE as usize;
        let mut noises: Vec<Waveform> = (0..3).map(|k| colored_noise(len, k, &mut rng)).collect();
        noises.push(hum(len, &mut rng));
        noises.push(self.babble(len, &mut rng));
        let rirs = (0..4).map(|_| room_response(rng.gen_range(0.15..0.5), &mut rng)).collect();
        AugmentationBank {
            noises,
            rirs,
            snr_choices_db: vec![-6.0, 0.0, 6.0],
            probability,
        }
    }

    fn babble(&self, len: usize, rng: &mut ChaCha8Rng) -> Waveform {
        let mut out = vec![0.0; len];
        for _ in 0..40 {
            let syl = syllable(rng.gen_range(0..N_SYLLABLES));
            let spk = Speaker::sample(rng);
            let s = render_syllable(syl, spk.pitch, spk.formant, syl.dur_s / spk.tempo, 0.2);
            let start = rng.gen_range(0..len);
            for (i, v) in s.iter().enumerate() {
                out[(start + i) % len] += v;
            }
        }
        Waveform::new(out).unwrap()
    }

    /// Writes every clip as WAV plus `manifest.csv`, `noise.txt` and `rir.txt`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<Manifest> {
        let corpus = self.corpus();
        let mut entries = Vec::new();
        for (split, clips) in [(Split::Train, &corpus.train), (Split::Valid, &corpus.valid), (Split::Test, &corpus.test)] {
            for c in clips {
                c.wave.write_wav(&dir.join(&c.id))?;
                entries.push(ManifestEntry {
                    path: PathBuf::from(&c.id),
                    label: c.label,
                    split,
                    speaker: None,
                });
            }
        }
        let manifest = Manifest::new(dir, entries)?;
        manifest.save(&dir.join("manifest.csv"))?;
        let bank = self.augmentation_bank(0.5);
        let list = |name: &str, waves: &[Waveform]| -> Result<()> {
            let mut text = String::new();
            for (i, w) in waves.iter().enumerate() {
                let rel = format!("{name}/{name}_{i}.wav");
                w.write_wav(&dir.join(&rel))?;
                text.push_str(&rel);
                text.push('\n');
            }
            let p = dir.join(format!("{name}.txt"));
            std::fs::write(&p, text).map_err(io_err(format!("writing {}", p.display())))
        };
        list("noise", &bank.noises)?;
        list("rir", &bank.rirs)?;
        Ok(manifest)
    }
}

fn render_syllable(s: Syllable, pitch: f64, formant: f64, dur_s: f64, amp: f64) -> Vec<f64> {
    let n = (dur_s * SR) as usize;
    let attack = (0.015 * SR) as usize;
    let release = (0.03 * SR) as usize;
    let f0 = s.f0 * pitch;
    let formants = [s.formants[0] * formant, s.formants[1] * formant];
    let harmonics: Vec<(f64, f64)> = (1..)
        .map(|h| h as f64)
        .take_while(|h| h * f0 * (1.0 + s.glide.max(0.0)) < 4000.0)
        .map(|h| {
            let f = h * f0;
            let a: f64 = formants.iter().map(|fm| 1.0 / (1.0 + ((f - fm) / 120.0).powi(2))).sum();
            (h, a)
        })
        .collect();
    let norm: f64 = harmonics.iter().map(|(_, a)| a * a).sum::<f64>().sqrt().max(1e-9);
    let mut phase = 0.0;
    (0..n)
        .map(|i| {
            let frac = i as f64 / n.max(1) as f64;
            let f = f0 * (1.0 + s.glide * frac);
            phase += 2.0 * std::f64::consts::PI * f / SR;
            let env = if i < attack {
                0.5 - 0.5 * (std::f64::consts::PI * i as f64 / attack as f64).cos()
            } else if i + release > n {
                0.5 - 0.5 * (std::f64::consts::PI * (n - i) as f64 / release as f64).cos()
            } else {
                1.0
            };
            let v: f64 = harmonics.iter().map(|(h, a)| a * (h * phase).sin()).sum();
            amp * env * v / norm
        })
        .collect()
}

/// 0 = white, 1 = pink-ish, 2 = brown-ish.
fn colored_noise(len: usize, kind: u32, rng: &mut impl Rng) -> Waveform {
    let mut state = [0.0f64; 3];
    let mut out: Vec<f64> = (0..len)
        .map(|_| {
            let w: f64 = rng.gen_range(-1.0..1.0);
            match kind {
                0 => w,
                1 => {
                    state[0] = 0.997 * state[0] + 0.029 * w;
                    state[1] = 0.985 * state[1] + 0.032 * w;
                    state[2] = 0.950 * state[2] + 0.048 * w;
                    state[0] + state[1] + state[2] + 0.02 * w
                }
                _ => {
                    state[0] = 0.995 * state[0] + 0.05 * w;
                    state[0]
                }
            }
        })
        .collect();
    let peak = out.iter().fold(0.0f64, |m, s| m.max(s.abs())).max(1e-12);
    out.iter_mut().for_each(|s| *s *= 0.5 / peak);
    Waveform::new(out).unwrap()
}

fn hum(len: usize, rng: &mut impl Rng) -> Waveform {
    let base = rng.gen_range(48.0..62.0);
    Waveform::new(
        (0..len)
            .map(|i| {
                let t = i as f64 / SR;
                (1..6)
                    .map(|h| 0.08 / h as f64 * (2.0 * std::f64::consts::PI * base * h as f64 * t).sin())
                    .sum::<f64>()
                    + rng.gen_range(-0.01..0.01)
            })
            .collect(),
    )
    .unwrap()
}

fn non_speech(rng: &mut ChaCha8Rng) -> Waveform {
    let n = (SEGMENT_SECONDS * SR).round() as usize;
    let mut out = vec![0.0; n];
    for _ in 0..rng.gen_range(1..4) {
        let len = rng.gen_range(1600..8000);
        let start = rng.gen_range(0..n - len);
        let amp = rng.gen_range(0.05..0.3);
        if rng.gen_bool(0.5) {
            let burst = colored_noise(len, rng.gen_range(0..3), rng);
            for (i, v) in burst.samples().iter().enumerate() {
                out[start + i] += amp * v;
            }
        } else {
            let (f1, f2) = (rng.gen_range(200.0..3000.0), rng.gen_range(200.0..3000.0));
            let mut phase = 0.0;
            for i in 0..len {
                let f = f1 + (f2 - f1) * i as f64 / len as f64;
                phase += 2.0 * std::f64::consts::PI * f / SR;
                out[start + i] += amp * phase.sin();
            }
        }
    }
    Waveform::new(out).unwrap()
}

fn room_response(rt60: f64, rng: &mut impl Rng) -> Waveform {
    let len = (rt60 * SR) as usize;
    let decay = 6.9 / (rt60 * SR);
    let mut h: Vec<f64> = (0..len)
        .map(|i| rng.gen_range(-1.0..1.0) * (-decay * i as f64).exp() * 0.3)
        .collect();
    h[0] = 1.0;
    Waveform::new(h).unwrap()
}
