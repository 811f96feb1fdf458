//! In-memory labelled image sets and the synthetic generators.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::nn::Preprocessing;
use crate::seed;
use crate::tensor::Tensor;

/// Images `N x H x W x C` in `[0, 1]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub preprocessing: Preprocessing,
}

impl Dataset {
    pub fn new(name: &str, images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Dataset> {
        if images.shape().len() < 2 {
            return Err(Error::Data(format!("images need a batch axis, got shape {:?}", images.shape())));
        }
        if images.batch() != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Data(format!("label {bad} out of range for {num_classes} classes")));
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Dataset {
            name: name.into(),
            images,
            labels,
            num_classes,
            preprocessing: Preprocessing::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn item_shape(&self) -> &[usize] {
        self.images.item_shape()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            images: self.images.select_batch(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            preprocessing: self.preprocessing,
        }
    }

    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// One Gaussian blob per class at a class-specific position.
    Blobs,
    /// A centred ring whose radius and thickness depend on the class.
    Rings,
}

const SYNTH_NOISE: f64 = 0.05;

/// Deterministic class-conditional single-channel images of `size x size`.
/// Labels cycle through the classes before shuffling, so counts are balanced
/// to within one.
pub fn synth_dataset(kind: SynthKind, n: usize, size: usize, num_classes: usize, seed: u64) -> Result<Dataset> {
    if num_classes < 2 || size < 4 || n < num_classes {
        return Err(Error::Parameter(format!(
            "need n >= classes >= 2 and size >= 4, got n={n}, size={size}, classes={num_classes}"
        )));
    }
    let mut rng = seed::rng(seed);
    let noise = Normal::new(0.0, SYNTH_NOISE).expect("valid sigma");
    let mut labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    labels.shuffle(&mut rng);
    let s = size as f64;
    let mut data = Vec::with_capacity(n * size * size);
    for &c in &labels {
        let jitter = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        for r in 0..size {
            for col in 0..size {
                let (y, x) = (r as f64 + 0.5, col as f64 + 0.5);
                let v = match kind {
                    SynthKind::Blobs => {
                        let angle = 2.0 * core::f64::consts::PI * c as f64 / num_classes as f64;
                        let cy = s / 2.0 + 0.3 * s * libm::sin(angle) + jitter.0;
                        let cx = s / 2.0 + 0.3 * s * libm::cos(angle) + jitter.1;
                        let sigma = 0.12 * s;
                        let d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                        math::exp(-d2 / (2.0 * sigma * sigma))
                    }
                    SynthKind::Rings => {
                        let radius = 0.45 * s * (c + 1) as f64 / (num_classes + 1) as f64;
                        let width = 0.5 + 0.5 * (c % 3) as f64;
                        let cy = s / 2.0 + 0.3 * jitter.0;
                        let cx = s / 2.0 + 0.3 * jitter.1;
                        let d = math::sqrt((y - cy) * (y - cy) + (x - cx) * (x - cx));
                        let off = (d - radius) / width;
                        math::exp(-0.5 * off * off)
                    }
                };
                data.push((v + noise.sample(&mut rng)).clamp(0.0, 1.0));
            }
        }
    }
    let images = Tensor::new(vec![n, size, size, 1], data)?;
    let name = match kind {
        SynthKind::Blobs => "synth-blobs",
        SynthKind::Rings => "synth-rings",
    };
    Dataset::new(name, images, labels, num_classes)
}
