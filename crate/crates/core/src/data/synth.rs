//! Class-conditional grating images.
//!
//! Each class owns one spatial frequency `(kx, ky)`; an image is a cosine
//! grating at that frequency with random phase, amplitude, per-channel tint
//! and brightness, plus Gaussian pixel noise, clamped to `[0, 1]`.

use std::f32::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Split};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub image_size: usize,
    pub channels: usize,
    pub n_classes: usize,
    pub noise: f32,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(n: usize, image_size: usize, n_classes: usize, seed: u64) -> Self {
        SynthConfig {
            n,
            image_size,
            channels: 3,
            n_classes,
            noise: 0.08,
            seed,
        }
    }
}

/// Distinct frequencies ordered by magnitude, one sign per orientation.
fn class_frequencies(n: usize) -> Vec<(i32, i32)> {
    let mut out = Vec::with_capacity(n);
    let mut radius: i32 = 1;
    while out.len() < n {
        let mut ring = Vec::new();
        for kx in 0..=radius {
            for ky in -radius..=radius {
                let m = kx.max(ky.abs());
                if m != radius || (kx == 0 && ky <= 0) {
                    continue;
                }
                ring.push((kx, ky));
            }
        }
        ring.sort_by_key(|&(kx, ky)| (kx * kx + ky * ky, -kx, -ky));
        out.extend(ring);
        radius += 1;
    }
    out.truncate(n);
    out
}

pub fn synth_dataset(n: usize, image_size: usize, n_classes: usize, seed: u64) -> Dataset {
    synth_split(&SynthConfig::new(n, image_size, n_classes, seed), Split::Train)
}

pub fn synth_split(cfg: &SynthConfig, split: Split) -> Dataset {
    assert!(cfg.n > 0 && cfg.image_size > 0 && cfg.channels > 0 && cfg.n_classes > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let freqs = class_frequencies(cfg.n_classes);
    let mut labels: Vec<usize> = (0..cfg.n).map(|i| i % cfg.n_classes).collect();
    labels.shuffle(&mut rng);
    let noise = Normal::new(0.0f32, cfg.noise.max(0.0)).expect("finite noise level");
    let (s, c) = (cfg.image_size, cfg.channels);
    let mut data = Vec::with_capacity(cfg.n * s * s * c);
    for &label in &labels {
        let (kx, ky) = freqs[label];
        let phase = rng.random_range(0.0..TAU);
        let amp = rng.random_range(0.25f32..0.4);
        let base = rng.random_range(0.4f32..0.6);
        let tint: Vec<f32> = (0..c).map(|_| rng.random_range(0.6f32..1.0)).collect();
        for y in 0..s {
            for x in 0..s {
                let arg = TAU * (kx as f32 * x as f32 + ky as f32 * y as f32) / s as f32 + phase;
                let wave = arg.cos();
                for t in &tint {
                    let v = base + amp * t * wave + noise.sample(&mut rng);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
    }
    let images = Tensor::from_parts(vec![cfg.n, s, s, c], data);
    Dataset::new(images, labels, cfg.n_classes, split).expect("generated data is in range")
}
