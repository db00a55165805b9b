//! Structural and natural perturbations of `[h, w, c]` images in `[0, 1]`.
//!
//! Drops assign zero. Every transform is a pure function of its inputs and
//! seed.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;

use crate::attacks::{attack_dataset, AttackConfig, AttackKind, Victim};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn dims(image: &Tensor) -> Result<[usize; 3]> {
    match *image.shape() {
        [h, w, c] => Ok([h, w, c]),
        _ => Err(Error::InvalidArgument(format!(
            "expected an [h, w, c] image, got {:?}",
            image.shape()
        ))),
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Zeroes `k` distinct `patch x patch` tiles chosen uniformly by `seed`.
pub fn patch_drop(image: &Tensor, k: usize, patch: usize, seed: u64) -> Result<Tensor> {
    let [h, w, c] = dims(image)?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::InvalidArgument(format!("patch size {patch} does not tile {h}x{w}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    if k > gh * gw {
        return Err(Error::InvalidArgument(format!("cannot drop {k} of {} patches", gh * gw)));
    }
    let mut out = image.clone();
    let data = out.data_mut();
    for p in index::sample(&mut rng(seed), gh * gw, k) {
        let (py, px) = (p / gw, p % gw);
        for y in py * patch..(py + 1) * patch {
            let row = (y * w + px * patch) * c;
            data[row..row + patch * c].fill(0.0);
        }
    }
    Ok(out)
}

/// Zeroes `n` distinct pixel sites (all channels) chosen uniformly by `seed`.
pub fn pixel_drop(image: &Tensor, n: usize, seed: u64) -> Result<Tensor> {
    let [h, w, c] = dims(image)?;
    if n > h * w {
        return Err(Error::InvalidArgument(format!("cannot drop {n} of {} pixels", h * w)));
    }
    let mut out = image.clone();
    let data = out.data_mut();
    for site in index::sample(&mut rng(seed), h * w, n) {
        data[site * c..(site + 1) * c].fill(0.0);
    }
    Ok(out)
}

/// Cuts the image into `g x g` cells and rearranges them by a seeded uniform
/// permutation.
pub fn grid_shuffle(image: &Tensor, g: usize, seed: u64) -> Result<Tensor> {
    let [h, w, c] = dims(image)?;
    if g == 0 || h % g != 0 || w % g != 0 {
        return Err(Error::InvalidArgument(format!("grid {g} does not divide {h}x{w}")));
    }
    let (ch, cw) = (h / g, w / g);
    let mut perm: Vec<usize> = (0..g * g).collect();
    perm.shuffle(&mut rng(seed));
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for (dst_cell, &src_cell) in perm.iter().enumerate() {
        let (dy, dx) = (dst_cell / g * ch, dst_cell % g * cw);
        let (sy, sx) = (src_cell / g * ch, src_cell % g * cw);
        for r in 0..ch {
            let d = ((dy + r) * w + dx) * c;
            let s = ((sy + r) * w + sx) * c;
            out[d..d + cw * c].copy_from_slice(&src[s..s + cw * c]);
        }
    }
    Ok(Tensor::from_parts(image.shape().to_vec(), out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corruption {
    GaussNoise,
    ShotNoise,
    BoxBlur,
    Contrast,
}

impl Corruption {
    pub const ALL: [Corruption; 4] = [
        Corruption::GaussNoise,
        Corruption::ShotNoise,
        Corruption::BoxBlur,
        Corruption::Contrast,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Corruption::GaussNoise => "gauss_noise",
            Corruption::ShotNoise => "shot_noise",
            Corruption::BoxBlur => "box_blur",
            Corruption::Contrast => "contrast",
        }
    }
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Corruption::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown corruption {s:?}")))
    }
}

const GAUSS_SIGMA: [f32; 5] = [0.04, 0.06, 0.08, 0.09, 0.10];
const SHOT_PHOTONS: [f64; 5] = [60.0, 25.0, 12.0, 5.0, 3.0];
const BLUR_RADIUS: [usize; 5] = [1, 1, 2, 2, 3];
const CONTRAST: [f32; 5] = [0.75, 0.5, 0.4, 0.3, 0.15];

/// Applies a corruption at severity 1 to 5 and clamps to `[0, 1]`.
///
/// | kind | severities 1..5 |
/// |------|-----------------|
/// | `gauss_noise` | sigma 0.04, 0.06, 0.08, 0.09, 0.10 |
/// | `shot_noise` | Poisson photon scale 60, 25, 12, 5, 3 |
/// | `box_blur` | radius 1, 1, 2, 2, 3 |
/// | `contrast` | factor 0.75, 0.5, 0.4, 0.3, 0.15 about each channel's mean |
pub fn corrupt(image: &Tensor, kind: Corruption, severity: usize, seed: u64) -> Result<Tensor> {
    let [h, w, c] = dims(image)?;
    if !(1..=5).contains(&severity) {
        return Err(Error::InvalidArgument(format!("severity must be 1..=5, got {severity}")));
    }
    let s = severity - 1;
    let src = image.data();
    let mut r = rng(seed);
    let out: Vec<f32> = match kind {
        Corruption::GaussNoise => {
            let n = Normal::new(0.0f32, GAUSS_SIGMA[s]).expect("positive sigma");
            src.iter().map(|&v| v + n.sample(&mut r)).collect()
        }
        Corruption::ShotNoise => {
            let lambda = SHOT_PHOTONS[s];
            src.iter()
                .map(|&v| {
                    let rate = f64::from(v) * lambda;
                    if rate > 0.0 {
                        let d = Poisson::new(rate).expect("positive rate");
                        (d.sample(&mut r) / lambda) as f32
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        Corruption::BoxBlur => {
            let rad = BLUR_RADIUS[s] as isize;
            let mut out = vec![0.0; src.len()];
            for y in 0..h as isize {
                for x in 0..w as isize {
                    for ch in 0..c {
                        let (mut sum, mut count) = (0.0f32, 0.0f32);
                        for yy in (y - rad).max(0)..=(y + rad).min(h as isize - 1) {
                            for xx in (x - rad).max(0)..=(x + rad).min(w as isize - 1) {
                                sum += src[(yy as usize * w + xx as usize) * c + ch];
                                count += 1.0;
                            }
                        }
                        out[(y as usize * w + x as usize) * c + ch] = sum / count;
                    }
                }
            }
            out
        }
        Corruption::Contrast => {
            let f = CONTRAST[s];
            let mut means = vec![0.0f32; c];
            for px in src.chunks(c) {
                means.iter_mut().zip(px).for_each(|(m, &v)| *m += v);
            }
            means.iter_mut().for_each(|m| *m /= (h * w) as f32);
            src.iter()
                .enumerate()
                .map(|(i, &v)| {
                    let m = means[i % c];
                    (v - m) * f + m
                })
                .collect()
        }
    };
    let out = out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(Tensor::from_parts(image.shape().to_vec(), out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerturbKind {
    PatchDrop,
    PixelDrop,
    GridShuffle,
    Corruption(Corruption),
}

/// A structural or natural perturbation, applied by [`PerturbationSpec::apply`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PerturbationSpec {
    pub kind: PerturbKind,
    /// Patches for `PatchDrop`, pixel sites for `PixelDrop`.
    pub budget: usize,
    /// Cells per side for `GridShuffle`.
    pub grid: usize,
    pub severity: usize,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn new(kind: PerturbKind) -> Self {
        PerturbationSpec {
            kind,
            budget: 0,
            grid: 1,
            severity: 1,
            seed: 0,
        }
    }

    pub fn condition(&self) -> String {
        match self.kind {
            PerturbKind::PatchDrop => format!("patch_drop k={}", self.budget),
            PerturbKind::PixelDrop => format!("pixel_drop n={}", self.budget),
            PerturbKind::GridShuffle => format!("shuffle g={}", self.grid),
            PerturbKind::Corruption(c) => format!("{c} s={}", self.severity),
        }
    }

    pub fn apply(&self, image: &Tensor, patch: usize, seed: u64) -> Result<Tensor> {
        match self.kind {
            PerturbKind::PatchDrop => patch_drop(image, self.budget, patch, seed),
            PerturbKind::PixelDrop => pixel_drop(image, self.budget, seed),
            PerturbKind::GridShuffle => grid_shuffle(image, self.grid, seed),
            PerturbKind::Corruption(c) => corrupt(image, c, self.severity, seed),
        }
    }
}

/// Derives an independent per-image seed.
pub fn image_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (index as u64).wrapping_add(0x632B_E59B_D9B4_E019)
}

/// Accuracy after perturbing each image with its own derived seed.
pub fn perturbed_accuracy<V: Victim + ?Sized>(model: &V, data: &Dataset, spec: &PerturbationSpec) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let patch = model.patch_size();
    let correct = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let x = spec.apply(&data.image(i), patch, image_seed(spec.seed, i))?;
            Ok(usize::from(model.predict(&x)? == data.labels()[i]))
        })
        .collect::<Result<Vec<usize>>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub grid: usize,
    /// Row-major robust accuracy per patch position.
    pub values: Vec<f64>,
}

impl Heatmap {
    fn mean_where(&self, keep: impl Fn(usize, usize) -> bool) -> f64 {
        let g = self.grid;
        let picked: Vec<f64> = (0..g * g)
            .filter(|&i| keep(i / g, i % g))
            .map(|i| self.values[i])
            .collect();
        picked.iter().sum::<f64>() / picked.len().max(1) as f64
    }

    /// Mean over the central `g/2 x g/2` block.
    pub fn center_mean(&self) -> f64 {
        let g = self.grid;
        let (lo, hi) = (g / 4, g - g / 4);
        self.mean_where(|r, c| (lo..hi).contains(&r) && (lo..hi).contains(&c))
    }

    /// Mean over the outermost ring of positions.
    pub fn border_mean(&self) -> f64 {
        let g = self.grid;
        self.mean_where(|r, c| r == 0 || c == 0 || r + 1 == g || c + 1 == g)
    }
}

/// Robust accuracy under Patch-Fool pinned to each patch position in turn.
pub fn positional_sweep<V: Victim + ?Sized>(model: &V, data: &Dataset, cfg: &AttackConfig) -> Result<Heatmap> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("positional sweep over an empty dataset".into()));
    }
    if cfg.kind != AttackKind::PatchFool {
        return Err(Error::Config("positional sweep needs a patch_fool config".into()));
    }
    let g = model.grid();
    let mut values = Vec::with_capacity(g * g);
    for p in 0..g * g {
        let mut pinned = cfg.clone();
        pinned.patch_indices = Some(vec![p]);
        let results = attack_dataset(model, data, &pinned)?;
        values.push(results.iter().filter(|r| !r.success).count() as f64 / data.len() as f64);
    }
    Ok(Heatmap { grid: g, values })
}
