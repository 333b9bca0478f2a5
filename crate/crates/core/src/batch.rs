//! Deterministic shuffled batching with online augmentation.
//!
//! Per-sample randomness is keyed by (run seed, epoch, record index), never
//! by worker scheduling, so batches replay exactly however sample
//! preparation is parallelized.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::{augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::network::INPUT_SIZE;
use crate::preprocess::{preprocess, Raster};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// splitmix64, used to derive independent rng streams from (seed, ...) keys.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E3779B97F4A7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Decoded, preprocessed images for every manifest record, loaded once and
/// shared across epochs (and across subset manifests drawn from the same
/// pool, via the record's image_ref).
pub struct ImageStore<T: Scalar> {
    channels: usize,
    by_ref: std::collections::HashMap<String, Vec<T>>,
}

impl<T: Scalar> ImageStore<T> {
    /// Decode and preprocess every image referenced by the manifest.
    pub fn load(manifest: &Manifest, channels: usize) -> Result<Self> {
        let refs: Vec<&str> = {
            let mut seen = std::collections::HashSet::new();
            manifest
                .records
                .iter()
                .filter(|r| seen.insert(r.image_ref.as_str()))
                .map(|r| r.image_ref.as_str())
                .collect()
        };
        let decoded: Result<Vec<(String, Vec<T>)>> = refs
            .par_iter()
            .map(|image_ref| {
                let raster = Raster::from_file(manifest.base_dir.join(image_ref))?;
                let tensor = preprocess::<T>(&raster, channels)?;
                Ok((image_ref.to_string(), tensor.to_vec()))
            })
            .collect();
        Ok(ImageStore { channels, by_ref: decoded?.into_iter().collect() })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn get(&self, image_ref: &str) -> Result<&[T]> {
        self.by_ref
            .get(image_ref)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::contract(format!("image {image_ref} not in store")))
    }
}

/// One training/eval batch plus the record indices it came from.
pub struct Batch<T: Scalar> {
    pub images: Tensor<T>,
    pub labels: Tensor<T>,
    pub indices: Vec<usize>,
}

/// Deterministic epoch permutation: a pure function of (seed, epoch).
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch]));
    order.shuffle(&mut rng);
    order
}

/// Settings for one pass over a manifest.
#[derive(Clone)]
pub struct BatchSettings {
    pub batch_size: usize,
    pub seed: u64,
    pub training: bool,
    pub augment: Option<AugmentConfig>,
}

/// Iterator over the batches of one epoch. Every record appears exactly
/// once per epoch; the final batch may be short.
pub struct EpochBatches<'a, T: Scalar> {
    manifest: &'a Manifest,
    store: &'a ImageStore<T>,
    settings: BatchSettings,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

pub fn iterate_batches<'a, T: Scalar>(
    manifest: &'a Manifest,
    store: &'a ImageStore<T>,
    settings: &BatchSettings,
    epoch: u64,
) -> Result<EpochBatches<'a, T>> {
    if manifest.is_empty() {
        return Err(Error::config("cannot iterate batches over an empty manifest"));
    }
    if settings.batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1"));
    }
    if let Some(cfg) = &settings.augment {
        cfg.validate()?;
    }
    let order = if settings.training {
        epoch_permutation(manifest.len(), settings.seed, epoch)
    } else {
        (0..manifest.len()).collect()
    };
    Ok(EpochBatches {
        manifest,
        store,
        settings: settings.clone(),
        epoch,
        order,
        cursor: 0,
    })
}

impl<T: Scalar> EpochBatches<'_, T> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.settings.batch_size)
    }
}

impl<T: Scalar> Iterator for EpochBatches<'_, T> {
    type Item = Result<Batch<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let hi = (self.cursor + self.settings.batch_size).min(self.order.len());
        let indices: Vec<usize> = self.order[self.cursor..hi].to_vec();
        self.cursor = hi;
        Some(assemble_batch(
            self.manifest,
            self.store,
            &indices,
            &self.settings,
            self.epoch,
        ))
    }
}

fn assemble_batch<T: Scalar>(
    manifest: &Manifest,
    store: &ImageStore<T>,
    indices: &[usize],
    settings: &BatchSettings,
    epoch: u64,
) -> Result<Batch<T>> {
    let b = indices.len();
    let c = store.channels();
    let sample_len = c * INPUT_SIZE * INPUT_SIZE;
    let width = manifest.label_width();

    let mut images = vec![T::zero(); b * sample_len];
    let mut labels = vec![T::zero(); b * width];

    let results: Result<Vec<()>> = images
        .par_chunks_mut(sample_len)
        .zip(labels.par_chunks_mut(width))
        .zip(indices.par_iter())
        .map(|((img_slot, lab_slot), &record_idx)| {
            let record = &manifest.records[record_idx];
            let raw = store.get(&record.image_ref)?;
            let binary = manifest.binary_labels(record)?;

            if settings.training {
                if let Some(cfg) = &settings.augment {
                    let tensor = Tensor::new(vec![c, INPUT_SIZE, INPUT_SIZE], raw.to_vec())?;
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(mix_seed(&[settings.seed, epoch, record_idx as u64]));
                    let (warped, labs) = augment(&tensor, binary, cfg, &mut rng)?;
                    warped.with_data(|d| img_slot.copy_from_slice(d));
                    for (dst, &l) in lab_slot.iter_mut().zip(labs.iter()) {
                        *dst = T::from_f64_lossy(l as f64);
                    }
                    return Ok(());
                }
            }
            img_slot.copy_from_slice(raw);
            for (dst, &l) in lab_slot.iter_mut().zip(binary.iter()) {
                *dst = T::from_f64_lossy(l as f64);
            }
            Ok(())
        })
        .collect();
    results?;

    Ok(Batch {
        images: Tensor::new(vec![b, c, INPUT_SIZE, INPUT_SIZE], images)?,
        labels: Tensor::new(vec![b, width], labels)?,
        indices: indices.to_vec(),
    })
}
