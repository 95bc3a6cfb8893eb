use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image_io;
use crate::tensor::{Shape, Tensor};

/// Mix integers into a seed (splitmix64 finaliser).
pub(crate) fn mix(parts: &[u64]) -> u64 {
    let mut h = 0x243f_6a88_85a3_08d3u64;
    for p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

/// In-memory training images with seeded shuffling and cropping.
///
/// Samples are a single stream: sample `p` belongs to epoch `p / len`, and its
/// image and crop depend only on `(seed, p)`, so any step can be replayed.
pub struct DataPipeline {
    files: Vec<PathBuf>,
    images: Vec<Tensor<f32>>,
    crop: usize,
    seed: u64,
    cached: Option<(u64, Vec<usize>)>,
}

impl DataPipeline {
    /// Load every PNG/PPM in `dir`; images smaller than the crop are skipped with a warning.
    pub fn open(dir: &Path, crop: usize, seed: u64) -> Result<Self> {
        let mut files = Vec::new();
        let mut images = Vec::new();
        for path in image_io::list_images(dir)? {
            match image_io::load::<f32>(&path) {
                Ok(img) if img.shape().h >= crop && img.shape().w >= crop => {
                    files.push(path);
                    images.push(img);
                }
                Ok(img) => log::warn!("skipping {}: {} is smaller than crop {crop}", path.display(), img.shape()),
                Err(e) => log::warn!("skipping {}: {e}", path.display()),
            }
        }
        if images.is_empty() {
            return Err(Error::EmptyCorpus(dir.to_path_buf()));
        }
        Ok(DataPipeline {
            files,
            images,
            crop,
            seed,
            cached: None,
        })
    }

    pub fn from_images(images: Vec<Tensor<f32>>, crop: usize, seed: u64) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyCorpus(PathBuf::new()));
        }
        if let Some(img) = images.iter().find(|i| i.shape().h < crop || i.shape().w < crop) {
            return Err(Error::InvalidArgument(format!("image {} is smaller than crop {crop}", img.shape())));
        }
        Ok(DataPipeline {
            files: Vec::new(),
            images,
            crop,
            seed,
            cached: None,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn files(&self) -> &[PathBuf] {
        &self.files
    }

    /// Image order for one epoch.
    pub fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.images.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[self.seed, 1, epoch])));
        order
    }

    /// `(image index, top, left)` of sample `p`.
    pub fn sample(&mut self, p: u64) -> (usize, usize, usize) {
        let n = self.images.len() as u64;
        let epoch = p / n;
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            self.cached = Some((epoch, self.permutation(epoch)));
        }
        let idx = self.cached.as_ref().expect("just filled").1[(p % n) as usize];
        let s = self.images[idx].shape();
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[self.seed, 2, p]));
        let top = rng.gen_range(0..=s.h - self.crop);
        let left = rng.gen_range(0..=s.w - self.crop);
        (idx, top, left)
    }

    /// Batch for training step `step`: samples `step*batch .. (step+1)*batch`.
    pub fn batch(&mut self, step: u64, batch: usize) -> Tensor<f32> {
        let c = self.crop;
        let mut out = Tensor::zeros(Shape::new(batch, 3, c, c));
        for b in 0..batch {
            let (idx, top, left) = self.sample(step * batch as u64 + b as u64);
            let img = &self.images[idx];
            for ch in 0..3 {
                for y in 0..c {
                    for x in 0..c {
                        out.set(b, ch, y, x, img.at(0, ch, top + y, left + x));
                    }
                }
            }
        }
        out
    }
}
