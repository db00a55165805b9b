//! White-box and transfer attacks: FGSM, PGD, Patch-Fool and stream-masked PGD.
//!
//! All attacks are untargeted, operate on raw `[0, 1]` pixels and treat
//! `epsilon` as an l-infinity radius in pixel units (use [`per255`] to
//! convert). PGD starts at the clean point.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{StreamMask, StreamTag, Tape};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{argmax, Model};
use crate::report::Row;
use crate::tensor::Tensor;

/// `v / 255`, the conversion for budgets quoted in 8-bit pixel steps.
pub fn per255(v: f32) -> f32 {
    v / 255.0
}

/// What an attack needs from a classifier.
pub trait Victim: Sync {
    /// `[h, w, c]`
    fn image_shape(&self) -> [usize; 3];
    fn n_classes(&self) -> usize;
    /// Side of the square patches Patch-Fool perturbs.
    fn patch_size(&self) -> usize;
    /// Stream tags that a mask may name for this model.
    fn stream_tags(&self) -> StreamMask;
    fn has_attention(&self) -> bool;
    fn logits(&self, x: &Tensor) -> Result<Vec<f32>>;
    /// Attack objective at `x` and its input gradient.
    fn objective(&self, x: &Tensor, label: usize, req: &ObjectiveRequest<'_>) -> Result<Objective>;

    /// Patches per side of a square image.
    fn grid(&self) -> usize {
        self.image_shape()[0] / self.patch_size()
    }

    fn n_patches(&self) -> usize {
        let [h, w, _] = self.image_shape();
        (h / self.patch_size()) * (w / self.patch_size())
    }

    fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ObjectiveRequest<'a> {
    /// Streams whose gradient is blocked.
    pub mask: StreamMask,
    /// Adds `alpha` times the attention paid to these patches, when the model
    /// has attention.
    pub attention: Option<(&'a [usize], f32)>,
}

#[derive(Clone, Debug)]
pub struct Objective {
    pub loss: f32,
    pub grad: Tensor,
    pub logits: Vec<f32>,
}

impl Victim for Model {
    fn image_shape(&self) -> [usize; 3] {
        Model::image_shape(self)
    }

    fn n_classes(&self) -> usize {
        self.config().n_classes
    }

    fn patch_size(&self) -> usize {
        self.config().patch_size
    }

    fn stream_tags(&self) -> StreamMask {
        Model::stream_tags(self)
    }

    fn has_attention(&self) -> bool {
        !self.arch().is_ssm()
    }

    fn logits(&self, x: &Tensor) -> Result<Vec<f32>> {
        Model::logits(self, x)
    }

    fn objective(&self, x: &Tensor, label: usize, req: &ObjectiveRequest<'_>) -> Result<Objective> {
        self.check_image(x)?;
        let mut tape = Tape::<f32>::new();
        tape.set_mask(req.mask);
        let xv = tape.leaf(x.clone());
        tape.tag(xv, StreamTag::Input)?;
        let fwd = self.forward_tape(&mut tape, xv, false)?;
        let logits = tape.value(fwd.logits).data().to_vec();
        let mut loss = tape.cross_entropy(fwd.logits, label)?;
        if let Some((patches, alpha)) = req.attention {
            if alpha != 0.0 && !fwd.attention.is_empty() {
                let mut total = None;
                for layer in &fwd.attention {
                    for &p in patches {
                        let (window, slot) = self.attention_slot(layer.stage, p);
                        let column = tape.slice(layer.maps[window], 1, slot, 1)?;
                        let s = tape.sum(column)?;
                        total = Some(match total {
                            None => s,
                            Some(t) => tape.add(t, s)?,
                        });
                    }
                }
                if let Some(t) = total {
                    let weighted = tape.scale(t, alpha)?;
                    loss = tape.add(loss, weighted)?;
                }
            }
        }
        let value = tape.value(loss).item()?;
        let mut grads = tape.backward(loss, &[xv])?;
        let grad = grads.take(xv).expect("requested leaf");
        Ok(Objective {
            loss: value,
            grad,
            logits,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackKind {
    Fgsm,
    Pgd,
    PatchFool,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::PatchFool => "patch_fool",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            "patch_fool" | "patchfool" => Ok(AttackKind::PatchFool),
            other => Err(Error::Config(format!("unknown attack kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// l-infinity radius in pixel units.
    pub epsilon: f32,
    /// PGD step, or Patch-Fool's initial learning rate.
    pub step_size: f32,
    pub iterations: usize,
    pub decay: f32,
    pub decay_every: usize,
    /// Weight of the attention term, used only by models with attention.
    pub alpha: f32,
    pub n_patches: usize,
    pub patch_indices: Option<Vec<usize>>,
    pub mask: StreamMask,
    pub seed: u64,
    /// Patch-Fool stops at the first iterate that flips the label.
    pub early_stop: bool,
}

impl AttackConfig {
    pub fn fgsm(epsilon: f32) -> Self {
        AttackConfig {
            kind: AttackKind::Fgsm,
            epsilon,
            step_size: epsilon,
            iterations: 1,
            ..Self::pgd_default()
        }
    }

    /// `epsilon = 1/255`, 5 steps of `0.5/255`.
    pub fn pgd_default() -> Self {
        AttackConfig {
            kind: AttackKind::Pgd,
            epsilon: per255(1.0),
            step_size: per255(0.5),
            iterations: 5,
            decay: 1.0,
            decay_every: 1,
            alpha: 0.0,
            n_patches: 0,
            patch_indices: None,
            mask: StreamMask::EMPTY,
            seed: 0,
            early_stop: false,
        }
    }

    pub fn pgd(epsilon: f32, step_size: f32, iterations: usize) -> Self {
        AttackConfig {
            epsilon,
            step_size,
            iterations,
            ..Self::pgd_default()
        }
    }

    /// 250 iterations from step 0.2, decayed by 0.95 every 10, alpha 0.002.
    pub fn patch_fool(n_patches: usize) -> Self {
        AttackConfig {
            kind: AttackKind::PatchFool,
            epsilon: 1.0,
            step_size: 0.2,
            iterations: 250,
            decay: 0.95,
            decay_every: 10,
            alpha: 0.002,
            n_patches,
            early_stop: true,
            ..Self::pgd_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return fail(format!("epsilon must be finite and >= 0, got {}", self.epsilon));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return fail(format!("step_size must be finite and >= 0, got {}", self.step_size));
        }
        if self.iterations == 0 {
            return fail("iterations must be at least 1".into());
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return fail(format!("decay must lie in (0, 1], got {}", self.decay));
        }
        if self.decay_every == 0 {
            return fail("decay_every must be at least 1".into());
        }
        if self.kind == AttackKind::PatchFool {
            match &self.patch_indices {
                Some(p) if p.is_empty() => return fail("patch_fool needs at least one patch index".into()),
                None if self.n_patches == 0 => return fail("patch_fool needs n_patches >= 1".into()),
                _ => {}
            }
        }
        if let Some(bad) = self.mask.tags().find(|t| !StreamTag::SSM.contains(t)) {
            return fail(format!("mask may only name A, B, C, Delta; got {bad}"));
        }
        Ok(())
    }

    /// Per-sample copy with a derived seed, so random patch choices differ
    /// across images but stay reproducible.
    pub fn for_sample(&self, index: usize) -> AttackConfig {
        let mut c = self.clone();
        c.seed = self.seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        c
    }

    /// A short human-readable statement of the constants, for report headers.
    pub fn describe(&self) -> String {
        match self.kind {
            AttackKind::Fgsm => format!("fgsm eps={:.6}", self.epsilon),
            AttackKind::Pgd => format!(
                "pgd eps={:.6} step={:.6} iterations={} mask={}",
                self.epsilon, self.step_size, self.iterations, self.mask
            ),
            AttackKind::PatchFool => format!(
                "patch_fool lr={} decay={} every {} iterations={} alpha={} patches={} early_stop={}",
                self.step_size,
                self.decay,
                self.decay_every,
                self.iterations,
                self.alpha,
                match &self.patch_indices {
                    Some(p) => format!("{p:?}"),
                    None => format!("{} random", self.n_patches),
                },
                self.early_stop
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvResult {
    pub x_adv: Tensor,
    /// The prediction on `x_adv` differs from the label.
    pub success: bool,
    /// Objective values at the iterates, ending with the returned point.
    pub loss_trace: Vec<f32>,
    /// Patches perturbed by Patch-Fool; empty for other attacks.
    pub patches: Vec<usize>,
    /// Prediction on the clean image, from the attack's first forward pass.
    pub clean_prediction: usize,
}

fn check_inputs<V: Victim + ?Sized>(model: &V, x: &Tensor, label: usize, cfg: &AttackConfig) -> Result<()> {
    cfg.validate()?;
    let shape = model.image_shape();
    if x.len() != shape.iter().product::<usize>() {
        return Err(Error::shape("attack", &shape, x.shape()));
    }
    if let Some(&bad) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::PixelRange(bad));
    }
    if label >= model.n_classes() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            model.n_classes()
        )));
    }
    let exposed = model.stream_tags();
    if let Some(missing) = cfg.mask.tags().find(|&t| !exposed.contains(t)) {
        return Err(Error::InvalidArgument(format!("model does not expose stream {missing}")));
    }
    Ok(())
}

fn gradient<V: Victim + ?Sized>(model: &V, x: &Tensor, label: usize, req: &ObjectiveRequest<'_>) -> Result<Objective> {
    let obj = model.objective(x, label, req)?;
    if !obj.grad.all_finite() || !obj.loss.is_finite() {
        return Err(Error::NonFinite("attack gradient".into()));
    }
    Ok(obj)
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn cross_entropy(logits: &[f32], label: usize) -> f32 {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f32>().ln();
    lse - logits[label]
}

fn finish<V: Victim + ?Sized>(
    model: &V,
    x_adv: Tensor,
    label: usize,
    mut trace: Vec<f32>,
    clean_prediction: usize,
) -> Result<AdvResult> {
    let logits = model.logits(&x_adv)?;
    trace.push(cross_entropy(&logits, label));
    Ok(AdvResult {
        success: argmax(&logits) != label,
        x_adv,
        loss_trace: trace,
        patches: Vec::new(),
        clean_prediction,
    })
}

/// Projects `v` onto the epsilon ball around `x0` intersected with `[0, 1]`,
/// stepping back by one ulp where rounding leaves `|v - x0|` just above `eps`.
fn into_ball(v: f32, x0: f32, eps: f32) -> f32 {
    let mut v = v.clamp(x0 - eps, x0 + eps).clamp(0.0, 1.0);
    while (v - x0).abs() > eps {
        v = if v > x0 { v.next_down() } else { v.next_up() };
    }
    v
}

/// `clamp(x + epsilon * sign(grad), 0, 1)` from a single gradient evaluation.
pub fn fgsm<V: Victim + ?Sized>(model: &V, x: &Tensor, label: usize, cfg: &AttackConfig) -> Result<AdvResult> {
    check_inputs(model, x, label, cfg)?;
    let req = ObjectiveRequest {
        mask: cfg.mask,
        attention: None,
    };
    let obj = gradient(model, x, label, &req)?;
    let eps = cfg.epsilon;
    let adv = x
        .data()
        .iter()
        .zip(obj.grad.data())
        .map(|(&xi, &g)| into_ball(xi + eps * sign(g), xi, eps))
        .collect();
    let clean = argmax(&obj.logits);
    finish(model, Tensor::from_parts(x.shape().to_vec(), adv), label, vec![obj.loss], clean)
}

/// Signed-gradient ascent projected onto the epsilon ball around `x`
/// intersected with `[0, 1]`, starting from `x`.
pub fn pgd<V: Victim + ?Sized>(model: &V, x: &Tensor, label: usize, cfg: &AttackConfig) -> Result<AdvResult> {
    check_inputs(model, x, label, cfg)?;
    let req = ObjectiveRequest {
        mask: cfg.mask,
        attention: None,
    };
    let (eps, step) = (cfg.epsilon, cfg.step_size);
    let mut cur = x.clone();
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let mut clean = None;
    for _ in 0..cfg.iterations {
        let obj = gradient(model, &cur, label, &req)?;
        clean.get_or_insert_with(|| argmax(&obj.logits));
        trace.push(obj.loss);
        for ((c, &x0), &g) in cur.data_mut().iter_mut().zip(x.data()).zip(obj.grad.data()) {
            let moved = *c + step * sign(g);
            *c = into_ball(moved, x0, eps);
        }
    }
    let clean = clean.expect("iterations >= 1");
    finish(model, cur, label, trace, clean)
}

/// PGD with gradient flow blocked through the streams in `cfg.mask`.
pub fn masked_attack<V: Victim + ?Sized>(model: &V, x: &Tensor, label: usize, cfg: &AttackConfig) -> Result<AdvResult> {
    pgd(model, x, label, cfg)
}

/// The patches Patch-Fool perturbs: the explicit list, or the first
/// `n_patches` of a seeded shuffle (so smaller counts are nested in larger).
pub fn select_patches(n_tokens: usize, cfg: &AttackConfig) -> Result<Vec<usize>> {
    match &cfg.patch_indices {
        Some(p) => {
            if p.is_empty() {
                return Err(Error::InvalidArgument("explicit patch list is empty".into()));
            }
            if let Some(&bad) = p.iter().find(|&&i| i >= n_tokens) {
                return Err(Error::InvalidArgument(format!(
                    "patch index {bad} out of range for {n_tokens} patches"
                )));
            }
            let mut seen = p.clone();
            seen.sort_unstable();
            seen.dedup();
            if seen.len() != p.len() {
                return Err(Error::InvalidArgument(format!("patch list {p:?} repeats an index")));
            }
            Ok(p.clone())
        }
        None => {
            if cfg.n_patches == 0 || cfg.n_patches > n_tokens {
                return Err(Error::InvalidArgument(format!(
                    "n_patches must lie in 1..={n_tokens}, got {}",
                    cfg.n_patches
                )));
            }
            let mut all: Vec<usize> = (0..n_tokens).collect();
            all.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
            all.truncate(cfg.n_patches);
            Ok(all)
        }
    }
}

/// 1 on the pixels (all channels) of the given patches, 0 elsewhere.
pub fn patch_mask(shape: [usize; 3], patch: usize, patches: &[usize]) -> Vec<bool> {
    let [h, w, c] = shape;
    let gw = w / patch;
    let mut m = vec![false; h * w * c];
    for &p in patches {
        let (py, px) = (p / gw, p % gw);
        for y in py * patch..(py + 1) * patch {
            for x in px * patch..(px + 1) * patch {
                m[(y * w + x) * c..(y * w + x + 1) * c].fill(true);
            }
        }
    }
    m
}

/// Unbounded perturbation confined to selected patches, found by Adam ascent
/// on the objective (plus the attention term for attention models).
///
/// The loop ends early at a fixed point: when a step moves no pixel and every
/// perturbed pixel is held at a pixel bound by momentum and gradient of the
/// same sign, the remaining iterations would return the same image.
pub fn patch_fool<V: Victim + ?Sized>(model: &V, x: &Tensor, label: usize, cfg: &AttackConfig) -> Result<AdvResult> {
    check_inputs(model, x, label, cfg)?;
    if cfg.kind != AttackKind::PatchFool {
        return Err(Error::Config(format!("patch_fool called with kind {}", cfg.kind)));
    }
    let patches = select_patches(model.n_patches(), cfg)?;
    let support = patch_mask(model.image_shape(), model.patch_size(), &patches);
    let alpha = if model.has_attention() { cfg.alpha } else { 0.0 };
    let req = ObjectiveRequest {
        mask: cfg.mask,
        attention: Some((&patches, alpha)),
    };
    let (b1, b2, eps) = (0.9f32, 0.999f32, 1e-8f32);
    let n = x.len();
    let mut e = vec![0.0f32; n];
    let (mut m, mut v) = (vec![0.0f32; n], vec![0.0f32; n]);
    let mut cur = x.clone();
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let mut clean = label;
    for t in 0..=cfg.iterations {
        let obj = gradient(model, &cur, label, &req)?;
        if t == 0 {
            clean = argmax(&obj.logits);
        }
        trace.push(obj.loss);
        if t == cfg.iterations || (cfg.early_stop && argmax(&obj.logits) != label) {
            return Ok(AdvResult {
                success: argmax(&obj.logits) != label,
                x_adv: cur,
                loss_trace: trace,
                patches,
                clean_prediction: clean,
            });
        }
        let lr = cfg.step_size * cfg.decay.powi((t / cfg.decay_every) as i32);
        let step = (t + 1) as i32;
        let (c1, c2) = (1.0 - b1.powi(step), 1.0 - b2.powi(step));
        let (mut moved, mut pinned) = (false, true);
        for i in 0..n {
            if !support[i] {
                continue;
            }
            let gi = obj.grad.data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            let x0 = x.data()[i];
            let next = (e[i] + update).clamp(-x0, 1.0 - x0);
            moved |= next != e[i];
            pinned &= (m[i] > 0.0 && gi >= 0.0 && next == 1.0 - x0)
                || (m[i] < 0.0 && gi <= 0.0 && next == -x0)
                || (m[i] == 0.0 && gi == 0.0);
            e[i] = next;
            cur.data_mut()[i] = (x0 + e[i]).clamp(0.0, 1.0);
        }
        // Every pixel sits on a bound that its momentum and gradient both push
        // against, so no later iterate can differ from this one.
        if !moved && pinned {
            return Ok(AdvResult {
                success: argmax(&obj.logits) != label,
                x_adv: cur,
                loss_trace: trace,
                patches,
                clean_prediction: clean,
            });
        }
    }
    unreachable!("the loop returns at t == iterations")
}

pub fn attack<V: Victim + ?Sized>(model: &V, x: &Tensor, label: usize, cfg: &AttackConfig) -> Result<AdvResult> {
    match cfg.kind {
        AttackKind::Fgsm => fgsm(model, x, label, cfg),
        AttackKind::Pgd => pgd(model, x, label, cfg),
        AttackKind::PatchFool => patch_fool(model, x, label, cfg),
    }
}

/// Attacks every image (in parallel), with per-image seeds from
/// [`AttackConfig::for_sample`].
pub fn attack_dataset<V: Victim + ?Sized>(model: &V, data: &Dataset, cfg: &AttackConfig) -> Result<Vec<AdvResult>> {
    cfg.validate()?;
    (0..data.len())
        .into_par_iter()
        .map(|i| attack(model, &data.image(i), data.labels()[i], &cfg.for_sample(i)))
        .collect()
}

/// Fraction of images classified correctly.
pub fn accuracy<V: Victim + ?Sized>(model: &V, images: &[Tensor], labels: &[usize]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("accuracy over an empty set".into()));
    }
    let correct: usize = images
        .par_iter()
        .zip(labels)
        .map(|(x, &y)| model.predict(x).map(|p| usize::from(p == y)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum();
    Ok(correct as f64 / images.len() as f64)
}

pub fn dataset_images(data: &Dataset) -> Vec<Tensor> {
    (0..data.len()).map(|i| data.image(i)).collect()
}

/// Accuracy on the clean images and on adversarial results.
pub fn robust_accuracy<V: Victim + ?Sized>(model: &V, data: &Dataset, cfg: &AttackConfig) -> Result<(f64, f64)> {
    let clean = accuracy(model, &dataset_images(data), data.labels())?;
    let adv = attack_dataset(model, data, cfg)?;
    let robust = adv.iter().filter(|r| !r.success).count() as f64 / data.len() as f64;
    Ok((clean, robust))
}

/// Transfer rows in both directions: each model's clean accuracy and the
/// accuracy of each model on examples crafted against the other.
pub fn transfer_eval<A: Victim + ?Sized, B: Victim + ?Sized>(
    (src_name, src): (&str, &A),
    (dst_name, dst): (&str, &B),
    data: &Dataset,
    cfg: &AttackConfig,
) -> Result<Vec<Row>> {
    if src.image_shape() != dst.image_shape() {
        return Err(Error::shape("transfer_eval", &src.image_shape(), &dst.image_shape()));
    }
    let images = dataset_images(data);
    let labels = data.labels();
    let from_src: Vec<Tensor> = attack_dataset(src, data, cfg)?.into_iter().map(|r| r.x_adv).collect();
    let from_dst: Vec<Tensor> = attack_dataset(dst, data, cfg)?.into_iter().map(|r| r.x_adv).collect();
    Ok(vec![
        Row::new(src_name, "clean", "accuracy", accuracy(src, &images, labels)?),
        Row::new(dst_name, "clean", "accuracy", accuracy(dst, &images, labels)?),
        Row::new(
            dst_name,
            format!("{src_name} -> {dst_name}"),
            "accuracy",
            accuracy(dst, &from_src, labels)?,
        ),
        Row::new(
            src_name,
            format!("{dst_name} -> {src_name}"),
            "accuracy",
            accuracy(src, &from_dst, labels)?,
        ),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ball_projection_is_exact_in_single_precision() {
        let eps = per255(8.0);
        for i in 0..=1000 {
            let x0 = i as f32 / 1000.0;
            for v in [x0 + eps, x0 - eps, x0 + 2.0 * eps, -1.0, 2.0] {
                let p = into_ball(v, x0, eps);
                assert!((p - x0).abs() <= eps && (0.0..=1.0).contains(&p), "{x0} {v} {p}");
            }
        }
    }

    /// Two-class linear scorer on a `[1, 2, 1]` image: logits `[w.x, -w.x]`.
    struct Linear {
        w: Vec<f32>,
    }

    impl Victim for Linear {
        fn image_shape(&self) -> [usize; 3] {
            [1, self.w.len(), 1]
        }
        fn n_classes(&self) -> usize {
            2
        }
        fn patch_size(&self) -> usize {
            1
        }
        fn stream_tags(&self) -> StreamMask {
            StreamMask::EMPTY
        }
        fn has_attention(&self) -> bool {
            false
        }
        fn logits(&self, x: &Tensor) -> Result<Vec<f32>> {
            let s: f32 = self.w.iter().zip(x.data()).map(|(a, b)| a * b).sum();
            Ok(vec![-s, s])
        }
        fn objective(&self, x: &Tensor, _: usize, _: &ObjectiveRequest<'_>) -> Result<Objective> {
            let logits = self.logits(x)?;
            Ok(Objective {
                loss: logits[1],
                grad: Tensor::new(vec![1, self.w.len(), 1], self.w.clone())?,
                logits,
            })
        }
    }

    fn img(v: &[f32]) -> Tensor {
        Tensor::new(vec![1, v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn fgsm_follows_gradient_sign() {
        let m = Linear { w: vec![1.0, -2.0] };
        let x = img(&[0.5, 0.5]);
        let r = fgsm(&m, &x, 0, &AttackConfig::fgsm(0.1)).unwrap();
        // 0.6 - 0.5 rounds above 0.1 in f32, so the projection backs off one ulp
        assert_eq!(r.x_adv.data(), &[0.6f32.next_down(), 0.4]);
    }

    #[test]
    fn zero_budget_is_identity() {
        let m = Linear { w: vec![1.0, -2.0] };
        let x = img(&[0.5, 0.2]);
        let r = fgsm(&m, &x, 0, &AttackConfig::fgsm(0.0)).unwrap();
        assert_eq!(r.x_adv, x);
        // w.x = 0.1 > 0 predicts class 1: already wrong for label 0.
        assert!(r.success);
    }

    #[test]
    fn one_step_pgd_is_fgsm() {
        let m = Linear { w: vec![3.0, -0.5, 0.0] };
        let x = img(&[0.99, 0.01, 0.3]);
        let eps = per255(8.0);
        let a = fgsm(&m, &x, 1, &AttackConfig::fgsm(eps)).unwrap();
        let b = pgd(&m, &x, 1, &AttackConfig::pgd(eps, eps, 1)).unwrap();
        assert_eq!(a.x_adv, b.x_adv);
    }

    #[test]
    fn pgd_stays_in_the_ball() {
        let m = Linear { w: vec![1.0, -1.0] };
        let x = img(&[0.5, 0.5]);
        let r = pgd(&m, &x, 0, &AttackConfig::pgd(0.05, 0.02, 10)).unwrap();
        assert!(r.x_adv.max_abs_diff(&x).unwrap() <= 0.05 + 1e-7);
    }

    #[test]
    fn patch_fool_loss_is_monotone_on_a_linear_scorer() {
        let m = Linear { w: vec![0.5, -1.0, 2.0, 0.25] };
        let x = img(&[0.2, 0.4, 0.6, 0.8]);
        let mut cfg = AttackConfig::patch_fool(0);
        cfg.patch_indices = Some(vec![1, 2]);
        cfg.iterations = 40;
        cfg.early_stop = false;
        let r = patch_fool(&m, &x, 0, &cfg).unwrap();
        assert!(r.loss_trace.windows(2).all(|w| w[1] >= w[0]), "{:?}", r.loss_trace);
        assert_eq!(r.x_adv.data()[0], 0.2);
        assert_eq!(r.x_adv.data()[3], 0.8);
        assert_eq!(r.x_adv.data()[1], 0.0);
        assert_eq!(r.x_adv.data()[2], 1.0);
    }

    #[test]
    fn patch_fool_preconditions() {
        let m = Linear { w: vec![1.0, 1.0] };
        let x = img(&[0.1, 0.2]);
        let mut cfg = AttackConfig::patch_fool(1);
        cfg.patch_indices = Some(vec![]);
        assert!(patch_fool(&m, &x, 0, &cfg).is_err());
        cfg.patch_indices = Some(vec![2]);
        assert!(patch_fool(&m, &x, 0, &cfg).is_err());
    }

    #[test]
    fn random_patch_sets_are_nested() {
        let mut cfg = AttackConfig::patch_fool(1);
        cfg.seed = 42;
        let mut prev = Vec::new();
        for n in 1..=4 {
            cfg.n_patches = n;
            let p = select_patches(64, &cfg).unwrap();
            assert_eq!(&p[..prev.len()], &prev[..]);
            prev = p;
        }
    }

    #[test]
    fn masks_must_be_exposed() {
        let m = Linear { w: vec![1.0] };
        let mut cfg = AttackConfig::pgd_default();
        cfg.mask = StreamMask::of(&[StreamTag::B]);
        let err = pgd(&m, &img(&[0.5]), 0, &cfg).unwrap_err();
        assert!(err.to_string().contains("does not expose stream B"));
        cfg.mask = StreamMask::of(&[StreamTag::Input]);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_invariants() {
        let mut c = AttackConfig::pgd_default();
        c.decay = 0.0;
        assert!(c.validate().is_err());
        let mut c = AttackConfig::pgd_default();
        c.iterations = 0;
        assert!(c.validate().is_err());
        assert!(AttackConfig::patch_fool(0).validate().is_err());
        assert!(AttackConfig::patch_fool(1).validate().is_ok());
    }

    #[test]
    fn patch_mask_covers_all_channels() {
        let m = patch_mask([4, 4, 2], 2, &[3]);
        let on: Vec<usize> = m.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
        // patch 3 = rows 2..4, cols 2..4
        let expected: Vec<usize> = [(2, 2), (2, 3), (3, 2), (3, 3)]
            .iter()
            .flat_map(|&(y, x)| [(y * 4 + x) * 2, (y * 4 + x) * 2 + 1])
            .collect();
        assert_eq!(on, expected);
    }
}
