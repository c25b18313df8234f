//! Procedural four-class toy dataset for desk-scale training runs.
//!
//! Each class is a deterministic 32x32 binary pattern (horizontal
//! stripes, vertical stripes, a centered disk, a checkerboard) repeated
//! across all three channels, plus seeded Gaussian pixel noise. The
//! classes are trivially separable by spatial structure alone, which is
//! exactly what makes the dataset a useful smoke test for the token
//! mixer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const TOY_CLASSES: usize = 4;
pub const TOY_EXTENT: usize = 32;
pub const TOY_CHANNELS: usize = 3;

/// Generation parameters. The defaults match the training smoke test:
/// 128 samples per class, noise sigma 0.1, seed 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDatasetSpec {
    pub per_class: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        ToyDatasetSpec { per_class: 128, noise_std: 0.1, seed: 0 }
    }
}

/// Images as one `[N, 3, 32, 32]` tensor plus per-sample labels.
/// Sample `i` has label `i % 4`, so any contiguous run whose length is a
/// multiple of four is class-balanced.
#[derive(Clone, Debug)]
pub struct ToyDataset<E: Element> {
    pub images: Tensor<E>,
    pub labels: Vec<usize>,
}

impl<E: Element> ToyDataset<E> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copies samples `[start, start + count)` into a standalone batch.
    pub fn batch(&self, start: usize, count: usize) -> Result<(Tensor<E>, Vec<usize>)> {
        if start + count > self.len() || count == 0 {
            return Err(Error::invalid(
                "batch",
                format!("range {start}..{} out of bounds for {} samples", start + count, self.len()),
            ));
        }
        let sample = TOY_CHANNELS * TOY_EXTENT * TOY_EXTENT;
        let data = self.images.data()[start * sample..(start + count) * sample].to_vec();
        let images = Tensor::new(&[count, TOY_CHANNELS, TOY_EXTENT, TOY_EXTENT], data)?;
        Ok((images, self.labels[start..start + count].to_vec()))
    }
}

/// Noiseless pattern value for one class at pixel `(y, x)`, either 0 or 1.
pub fn class_pattern(class: usize, y: usize, x: usize) -> f64 {
    let on = match class {
        0 => (y / 4) % 2 == 0,
        1 => (x / 4) % 2 == 0,
        2 => {
            let dy = y as f64 - 15.5;
            let dx = x as f64 - 15.5;
            dy * dy + dx * dx <= 100.0
        }
        3 => (y / 4 + x / 4) % 2 == 0,
        _ => panic!("class {class} out of range, toy data has {TOY_CLASSES} classes"),
    };
    if on {
        1.0
    } else {
        0.0
    }
}

/// Generates the dataset. The same spec always produces bit-identical
/// images and labels.
pub fn generate<E: Element>(spec: &ToyDatasetSpec) -> Result<ToyDataset<E>> {
    if spec.per_class == 0 {
        return Err(Error::invalid("generate", "per_class must be at least 1"));
    }
    if !spec.noise_std.is_finite() || spec.noise_std < 0.0 {
        return Err(Error::invalid(
            "generate",
            format!("noise_std must be finite and non-negative, got {}", spec.noise_std),
        ));
    }
    let n = spec.per_class * TOY_CLASSES;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0f64, spec.noise_std)
        .map_err(|e| Error::invalid("generate", format!("bad noise distribution: {e}")))?;
    let mut data = Vec::with_capacity(n * TOY_CHANNELS * TOY_EXTENT * TOY_EXTENT);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % TOY_CLASSES;
        labels.push(class);
        for _channel in 0..TOY_CHANNELS {
            for y in 0..TOY_EXTENT {
                for x in 0..TOY_EXTENT {
                    let value = class_pattern(class, y, x) + noise.sample(&mut rng);
                    data.push(E::from_f64(value));
                }
            }
        }
    }
    let images = Tensor::new(&[n, TOY_CHANNELS, TOY_EXTENT, TOY_EXTENT], data)?;
    Ok(ToyDataset { images, labels })
}
