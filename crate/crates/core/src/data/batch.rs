use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{AugmentationBank, Clip};
use crate::audio::FeatureExtractor;
use crate::error::{KwsError, Result};
use crate::tensor::Tensor;

pub const DEFAULT_POSITIVES: usize = 32;
pub const DEFAULT_NEGATIVES: usize = 96;

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// One `T × 40` matrix per sample.
    pub features: Vec<Tensor>,
    pub labels: Vec<u8>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_positive(&self) -> usize {
        self.labels.iter().filter(|y| **y == 1).count()
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent per-sample seed derived from a batch seed, so augmentation
/// results do not depend on processing order.
pub fn sample_seed(batch_seed: u64, index: usize) -> u64 {
    splitmix64(batch_seed ^ splitmix64((index as u64).wrapping_add(1)))
}

/// Un-augmented features of every clip, computed once.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    features: Vec<Tensor>,
}

impl FeatureStore {
    pub fn build(clips: &[Clip], extractor: &FeatureExtractor) -> Result<Self> {
        let features = clips
            .par_iter()
            .map(|c| extractor.extract_segment(&c.wave).map(|f| f.values().clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureStore { features })
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.features[i]
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Draws class-balanced batches without replacement; a class whose pool
/// runs out is reshuffled and reused.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    positives: Vec<usize>,
    negatives: Vec<usize>,
    pos_cursor: usize,
    neg_cursor: usize,
    per_batch: (usize, usize),
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(labels: &[u8], positives: usize, negatives: usize, seed: u64) -> Result<Self> {
        let pos: Vec<usize> = (0..labels.len()).filter(|i| labels[*i] == 1).collect();
        let neg: Vec<usize> = (0..labels.len()).filter(|i| labels[*i] == 0).collect();
        if (positives > 0 && pos.is_empty()) || (negatives > 0 && neg.is_empty()) {
            return Err(KwsError::InvalidArgument("a class needed by the batch ratio has no samples".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = BatchSampler {
            positives: pos,
            negatives: neg,
            pos_cursor: 0,
            neg_cursor: 0,
            per_batch: (positives, negatives),
            rng: ChaCha8Rng::seed_from_u64(0),
        };
        s.positives.shuffle(&mut rng);
        s.negatives.shuffle(&mut rng);
        s.rng = rng;
        Ok(s)
    }

    pub fn positives_available(&self) -> usize {
        self.positives.len()
    }

    /// Batches needed for one pass over the positives.
    pub fn batches_per_epoch(&self) -> usize {
        if self.per_batch.0 == 0 {
            return 1;
        }
        self.positives.len().div_ceil(self.per_batch.0)
    }

    fn draw(pool: &mut [usize], cursor: &mut usize, count: usize, rng: &mut ChaCha8Rng, out: &mut Vec<usize>) {
        for _ in 0..count {
            if *cursor == pool.len() {
                pool.shuffle(rng);
                *cursor = 0;
            }
            out.push(pool[*cursor]);
            *cursor += 1;
        }
    }

    /// Clip indices of the next batch, in shuffled order.
    pub fn next_indices(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.per_batch.0 + self.per_batch.1);
        Self::draw(&mut self.positives, &mut self.pos_cursor, self.per_batch.0, &mut self.rng, &mut out);
        Self::draw(&mut self.negatives, &mut self.neg_cursor, self.per_batch.1, &mut self.rng, &mut out);
        out.shuffle(&mut self.rng);
        out
    }
}

/// Featurizes the selected clips, augmenting each independently.
pub fn assemble_batch(
    clips: &[Clip],
    store: &FeatureStore,
    bank: &AugmentationBank,
    extractor: &FeatureExtractor,
    indices: &[usize],
    batch_seed: u64,
) -> Result<Batch> {
    let features = indices
        .par_iter()
        .enumerate()
        .map(|(i, &idx)| {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(batch_seed, i));
            match bank.maybe_augment(&clips[idx].wave, &mut rng)? {
                Some(w) => extractor.extract_segment(&w).map(|f| f.values().clone()),
                None => Ok(store.get(idx).clone()),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch {
        features,
        labels: indices.iter().map(|i| clips[*i].label).collect(),
    })
}

/// One 32 + 96 batch drawn from `clips` with the given seed.
pub fn make_batch(clips: &[Clip], bank: &AugmentationBank, extractor: &FeatureExtractor, rng_seed: u64) -> Result<Batch> {
    let labels: Vec<u8> = clips.iter().map(|c| c.label).collect();
    let mut sampler = BatchSampler::new(&labels, DEFAULT_POSITIVES, DEFAULT_NEGATIVES, rng_seed)?;
    let indices = sampler.next_indices();
    let store = FeatureStore::build(clips, extractor)?;
    assemble_batch(clips, &store, bank, extractor, &indices, sample_seed(rng_seed, usize::MAX))
}
