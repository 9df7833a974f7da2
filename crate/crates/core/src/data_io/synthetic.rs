//! Procedurally rendered texture dataset.
//!
//! Each class is a sinusoidal grating with its own orientation, frequency
//! band and colour mix, laid over a class tint. The phase is drawn uniformly
//! per image. At the default spread neighbouring tints differ by more than
//! twice the usual attack radius, so the tint is a coarse cue that survives
//! perturbation, much like the colour statistics of natural image classes.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{ImageDataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    #[serde(default = "default_size")]
    pub image_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Standard deviation of additive per-pixel Gaussian noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Spread of the per-class tint around mid-grey.
    #[serde(default = "default_tint")]
    pub tint: f64,
}

fn default_size() -> usize {
    32
}
fn default_channels() -> usize {
    3
}
fn default_noise() -> f64 {
    0.08
}

fn default_tint() -> f64 {
    0.2
}

impl SyntheticSpec {
    pub fn new(num_classes: usize, train_per_class: usize, test_per_class: usize) -> Self {
        Self {
            num_classes,
            train_per_class,
            test_per_class,
            image_size: default_size(),
            channels: default_channels(),
            noise: default_noise(),
            tint: default_tint(),
        }
    }
}

struct ClassStyle {
    angle: f64,
    /// Cycles across the image.
    frequency: f64,
    colour: Vec<f64>,
    tint: Vec<f64>,
}

fn styles(spec: &SyntheticSpec) -> Vec<ClassStyle> {
    let orientations = spec.num_classes.div_ceil(2);
    (0..spec.num_classes)
        .map(|c| {
            let band = c / orientations;
            let angle = PI * (c % orientations) as f64 / orientations as f64;
            let frequency = if band == 0 { 2.5 } else { 5.0 };
            let colour = (0..spec.channels)
                .map(|k| 0.55 + 0.45 * (2.0 * PI * (c as f64 / spec.num_classes as f64 + k as f64 / 3.0)).cos().abs())
                .collect();
            let tint = (0..spec.channels)
                .map(|k| 0.5 + spec.tint * (2.0 * PI * (c as f64 / spec.num_classes as f64 + k as f64 / 3.0)).cos())
                .collect();
            ClassStyle {
                angle,
                frequency,
                colour,
                tint,
            }
        })
        .collect()
}

fn render(spec: &SyntheticSpec, per_class: usize, split: Split, seed: u64) -> Result<ImageDataset> {
    let styles = styles(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::config(e.to_string()))?;
    let s = spec.image_size;
    let n = per_class * spec.num_classes;
    let mut data = Vec::with_capacity(n * spec.channels * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        // interleave classes so every prefix is balanced
        let c = i % spec.num_classes;
        let style = &styles[c];
        let angle = style.angle + rng.gen_range(-0.08..0.08);
        let freq = style.frequency * rng.gen_range(0.9..1.1);
        let phase = rng.gen_range(0.0..2.0 * PI);
        let amplitude = rng.gen_range(0.15..0.28);
        let offset = rng.gen_range(-0.04..0.04);
        let (sin_a, cos_a) = angle.sin_cos();
        for k in 0..spec.channels {
            for y in 0..s {
                for x in 0..s {
                    let (u, v) = (x as f64 / s as f64, y as f64 / s as f64);
                    let wave = (2.0 * PI * freq * (u * cos_a + v * sin_a) + phase).sin();
                    let value = style.tint[k] + offset + amplitude * style.colour[k] * wave + noise.sample(&mut rng);
                    data.push(value.clamp(0.0, 1.0) as f32);
                }
            }
        }
        labels.push(c);
    }
    let images = Tensor::new(vec![n, spec.channels, s, s], data)?;
    ImageDataset::new(
        images,
        labels,
        spec.num_classes,
        split,
        format!("synthetic(classes={},size={},seed={seed})", spec.num_classes, s),
    )
}

/// Train and test splits drawn from independent random streams.
pub fn make_synthetic_dataset(spec: &SyntheticSpec, seed: u64) -> Result<(ImageDataset, ImageDataset)> {
    if spec.num_classes < 2 || spec.num_classes > 256 || spec.image_size == 0 || spec.channels == 0 {
        return Err(Error::config(format!("unsupported synthetic dataset spec {spec:?}")));
    }
    if spec.train_per_class == 0 || spec.test_per_class == 0 {
        return Err(Error::config("synthetic splits need at least one image per class"));
    }
    let train = render(spec, spec.train_per_class, Split::Train, seed.wrapping_mul(2).wrapping_add(1))?;
    let test = render(spec, spec.test_per_class, Split::Test, seed.wrapping_mul(2).wrapping_add(2))?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_a_seed() {
        let spec = SyntheticSpec::new(4, 3, 2);
        let a = make_synthetic_dataset(&spec, 7).unwrap();
        let b = make_synthetic_dataset(&spec, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0.images, a.1.images.slice_batch(0, a.1.len()));
    }

    #[test]
    fn shape_contract() {
        let spec = SyntheticSpec::new(10, 5, 2);
        let (train, test) = make_synthetic_dataset(&spec, 1).unwrap();
        assert_eq!(train.images.shape(), &[50, 3, 32, 32]);
        assert_eq!(test.images.shape(), &[20, 3, 32, 32]);
        assert_eq!(train.labels.len(), 50);
        assert!(train.images.min() >= 0.0 && train.images.max() <= 1.0);
    }
}
