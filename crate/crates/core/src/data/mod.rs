//! Dataset manifests, waveform augmentation, batch construction and a
//! synthetic keyword corpus.

mod augment;
mod batch;
mod manifest;
pub mod synth;

pub use augment::{convolve_rir, mix_at_snr, AugmentationBank, AugmentationSpec};
pub use batch::{assemble_batch, make_batch, sample_seed, Batch, BatchSampler, FeatureStore};
pub use manifest::{read_path_list, Manifest, ManifestEntry, Split};

use crate::audio::Waveform;

/// One labelled utterance.
#[derive(Debug, Clone)]
pub struct Clip {
    pub id: String,
    pub wave: Waveform,
    pub label: u8,
}

/// Clips of the three splits, loaded into memory.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub train: Vec<Clip>,
    pub valid: Vec<Clip>,
    pub test: Vec<Clip>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Clip] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Loads one split, skipping unreadable files; returns the skipped
    /// paths with their errors.
    pub fn load_split(m: &Manifest, split: Split) -> (Vec<Clip>, Vec<(String, crate::KwsError)>) {
        let mut clips = Vec::new();
        let mut failed = Vec::new();
        for e in m.entries().iter().filter(|e| e.split == split) {
            let id = e.path.display().to_string();
            match Waveform::read_wav(&m.resolve(&e.path)) {
                Ok(wave) => clips.push(Clip { id, wave, label: e.label }),
                Err(err) => {
                    log::warn!("skipping {id}: {err}");
                    failed.push((id, err));
                }
            }
        }
        (clips, failed)
    }

    pub fn from_manifest(m: &Manifest) -> crate::Result<Self> {
        let mut c = Corpus::default();
        for e in m.entries() {
            let clip = Clip {
                id: e.path.display().to_string(),
                wave: Waveform::read_wav(&m.resolve(&e.path))?,
                label: e.label,
            };
            match e.split {
                Split::Train => c.train.push(clip),
                Split::Valid => c.valid.push(clip),
                Split::Test => c.test.push(clip),
            }
        }
        Ok(c)
    }
}
