//! Self-checks of the numerical core: recurrence against convolution, the
//! zero-order hold against direct integration, and reverse-mode gradients
//! against central differences.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    grad_check, masked_grad_check, GradCheckReport, Op, ScalarFn, StreamMask, StreamTag, Tape, Var,
};
use crate::error::Result;
use crate::model::{Arch, Model, ModelConfig};
use crate::ssm::{
    discretize_zoh, inverse_softplus, plan_scans, scan_convolutional, scan_recurrent, scan_states, ss2d_block,
    GateVars, ScanMode, Ss2dVars, SsmBlockParams,
};
use crate::tensor::{Real, Tensor};

/// Outcome of one oracle family.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleCheck {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl OracleCheck {
    fn new(name: impl Into<String>, cases: usize, max_error: f64, tol: f64) -> Self {
        OracleCheck {
            name: name.into(),
            cases,
            max_error,
            tol,
            passed: max_error < tol,
        }
    }

    fn from_grad(name: impl Into<String>, r: &GradCheckReport) -> Self {
        OracleCheck::new(name, r.coords_checked, r.max_rel_error, r.tol)
    }
}

/// `max |a - b| / max |b|`, with the denominator floored at `1e-12`.
pub fn norm_relative_error(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

fn widen(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Runs `cases` random time-invariant systems (`n <= 8` states, `l <= 64`
/// steps) through both the recurrence and the convolution kernel.
pub fn recurrence_vs_convolution(cases: usize, seed: u64, tol: f64) -> Result<OracleCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let n = rng.random_range(1..=8);
        let l = rng.random_range(1..=64);
        let a: Vec<f32> = (0..n).map(|_| -rng.random_range(0.05f32..2.0)).collect();
        let b: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let c: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let delta = rng.random_range(0.01f32..0.5);
        let x: Vec<f32> = (0..l).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let (a_bar, b_bar) = discretize_zoh(&Tensor::vector(a), &Tensor::vector(b), delta)?;
        let c = Tensor::vector(c);
        let x = Tensor::vector(x);
        let tile = |t: &Tensor| Tensor::from_parts(vec![l, n], t.data().repeat(l));
        let rec = scan_recurrent(&tile(&a_bar), &tile(&b_bar), &tile(&c), &x, None)?;
        let conv = scan_convolutional(&a_bar, &b_bar, &c, &x)?;
        worst = worst.max(norm_relative_error(&widen(&rec), &widen(&conv)));
    }
    Ok(OracleCheck::new("recurrence_vs_convolution", cases, worst, tol))
}

/// Integrates `h' = a h + b u` over `[0, t]` with constant `u` by classical
/// Runge-Kutta with steps no longer than `step`.
pub fn integrate_linear(a: f64, b: f64, u: f64, h0: f64, t: f64, step: f64) -> f64 {
    let steps = (t / step).ceil().max(1.0) as usize;
    let dt = t / steps as f64;
    let f = |h: f64| a * h + b * u;
    let mut h = h0;
    for _ in 0..steps {
        let k1 = f(h);
        let k2 = f(h + 0.5 * dt * k1);
        let k3 = f(h + 0.5 * dt * k2);
        let k4 = f(h + dt * k3);
        h += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    h
}

/// Compares the discretized state trajectory against integrating the
/// continuous system under piecewise-constant input. Every fourth draw has
/// `|delta a| < 1e-4` so the series branch is exercised.
pub fn zoh_vs_integration(draws: usize, seed: u64, step: f64, tol: f64) -> Result<OracleCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for draw in 0..draws {
        let n = rng.random_range(1..=4);
        let l = rng.random_range(1..=4);
        let small = draw % 4 == 0;
        let delta: f32 = if small {
            rng.random_range(1e-4..1e-3)
        } else {
            rng.random_range(1e-3..0.05)
        };
        let a: Vec<f32> = (0..n)
            .map(|_| {
                if small {
                    -rng.random_range(0.01..0.09)
                } else {
                    -rng.random_range(0.1..20.0)
                }
            })
            .collect();
        let b: Vec<f32> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let u: Vec<f32> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (a_bar, b_bar) = discretize_zoh(&Tensor::vector(a.clone()), &Tensor::vector(b.clone()), delta)?;
        let tile = |t: &Tensor| Tensor::from_parts(vec![l, n], t.data().repeat(l));
        let states = scan_states(&tile(&a_bar), &tile(&b_bar), &Tensor::vector(u.clone()), None)?;
        let mut exact = Vec::with_capacity(l * n);
        let mut h = vec![0.0f64; n];
        for &ut in &u {
            for s in 0..n {
                h[s] = integrate_linear(a[s] as f64, b[s] as f64, ut as f64, h[s], delta as f64, step);
            }
            exact.extend_from_slice(&h);
        }
        worst = worst.max(norm_relative_error(&widen(&states), &exact));
    }
    Ok(OracleCheck::new("zoh_vs_integration", draws, worst, tol))
}

/// One op applied to slices of a flat input, reduced by a fixed weighted sum.
struct OpCase {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    /// Draw the point from `[0.5, 1.5]` instead of `[-1, 1]`.
    positive: bool,
}

fn split_inputs<T: Real>(tape: &mut Tape<T>, x: Var, shapes: &[Vec<usize>]) -> Result<Vec<Var>> {
    let mut start = 0;
    let mut out = Vec::with_capacity(shapes.len());
    for shape in shapes {
        let len: usize = shape.iter().product();
        let part = tape.slice(x, 0, start, len)?;
        out.push(tape.reshape(part, shape)?);
        start += len;
    }
    Ok(out)
}

fn weighted_sum<T: Real>(tape: &mut Tape<T>, y: Var) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let n: usize = shape.iter().product();
    let w = (0..n).map(|i| T::from_f64((1.7 * i as f64 + 0.3).cos())).collect();
    let w = tape.constant(Tensor::from_parts(shape, w));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// Records the op named by a case on `v`.
fn record<T: Real>(name: &str, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
    let gather_index: Arc<[usize]> = Arc::from(vec![5usize, 0, 3, 3, 11, 7, 1, 0]);
    match name {
        "add" => t.add(v[0], v[1]),
        "sub" => t.sub(v[0], v[1]),
        "mul" => t.mul(v[0], v[1]),
        "matmul" => t.matmul(v[0], v[1]),
        "exp" => t.exp(v[0]),
        "log" => t.log(v[0]),
        "softplus" => t.softplus(v[0]),
        "sigmoid" => t.sigmoid(v[0]),
        "silu" => t.silu(v[0]),
        "mean" => t.mean(v[0]),
        "sum" => t.sum(v[0]),
        "reshape" => t.reshape(v[0], &[4, 3]),
        "transpose2d" => t.transpose(v[0]),
        "slice" => t.slice(v[0], 1, 1, 2),
        "concat" => t.concat(&[v[0], v[1]], 1),
        "softmax" => t.softmax(v[0]),
        "cross_entropy" => t.cross_entropy(v[0], 2),
        "neg" => t.neg(v[0]),
        "scale" => t.scale(v[0], -1.5),
        "mean_rows" => t.mean_rows(v[0]),
        "add_row" => t.add_row(v[0], v[1]),
        "mul_row" => t.mul_row(v[0], v[1]),
        "mul_col" => t.mul_col(v[0], v[1]),
        "outer" => t.outer(v[0], v[1]),
        "layer_norm" => t.layer_norm(v[0], v[1], v[2]),
        "gather" => t.gather(v[0], gather_index, &[2, 4]),
        "zoh_phi" => t.apply(Op::ZohPhi, &[v[0]]),
        "selective_scan" => {
            // Keep the decay in (0, 1) as in the models.
            let a = t.sigmoid(v[0])?;
            t.apply(Op::SelectiveScan, &[a, v[1], v[2], v[3]])
        }
        other => unreachable!("no op case {other}"),
    }
}

impl ScalarFn for OpCase {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let inputs = split_inputs(tape, x, &self.shapes)?;
        let y = record(self.name, tape, &inputs)?;
        weighted_sum(tape, y)
    }
}

fn op_cases() -> Vec<OpCase> {
    let case = |name: &'static str, shapes: &[&[usize]], positive: bool| OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        positive,
    };
    vec![
        case("add", &[&[3, 4], &[3, 4]], false),
        case("sub", &[&[3, 4], &[3, 4]], false),
        case("mul", &[&[3, 4], &[3, 4]], false),
        case("matmul", &[&[3, 4], &[4, 2]], false),
        case("exp", &[&[5]], false),
        case("log", &[&[5]], true),
        case("softplus", &[&[6]], false),
        case("sigmoid", &[&[6]], false),
        case("silu", &[&[6]], false),
        case("mean", &[&[2, 3]], false),
        case("sum", &[&[2, 3]], false),
        case("reshape", &[&[2, 6]], false),
        case("transpose2d", &[&[3, 4]], false),
        case("slice", &[&[3, 4]], false),
        case("concat", &[&[3, 2], &[3, 3]], false),
        case("softmax", &[&[3, 4]], false),
        case("cross_entropy", &[&[1, 5]], false),
        case("neg", &[&[4]], false),
        case("scale", &[&[4]], false),
        case("mean_rows", &[&[4, 3]], false),
        case("add_row", &[&[3, 4], &[4]], false),
        case("mul_row", &[&[3, 4], &[4]], false),
        case("mul_col", &[&[3, 4], &[3]], false),
        case("outer", &[&[3], &[4]], false),
        case("layer_norm", &[&[3, 5], &[5], &[5]], false),
        case("gather", &[&[3, 4]], false),
        case("zoh_phi", &[&[8]], false),
        case("selective_scan", &[&[6, 3], &[6, 3], &[6, 3], &[6, 2]], false),
    ]
}

/// Names of the op kinds covered by [`gradient_suite`].
pub fn checked_ops() -> Vec<&'static str> {
    op_cases().iter().map(|c| c.name).collect()
}

/// A gated four-direction block on a `4 x 4` token map; the input is the map.
struct Ss2dFn {
    plans: Vec<crate::ssm::ScanPlan>,
    norm: (Arc<Tensor>, Arc<Tensor>),
    gate: [Arc<Tensor>; 3],
    directions: Vec<SsmBlockParams>,
}

impl Ss2dFn {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let (d, e, n) = (5, 6, 3);
        let mut mat = |r: usize, c: usize| {
            let bound = 1.0 / (r as f32).sqrt();
            Arc::new(Tensor::from_parts(
                vec![r, c],
                (0..r * c).map(|_| rng.random_range(-bound..bound)).collect(),
            ))
        };
        let gate = [mat(d, e), mat(d, e), mat(e, d)];
        let gamma = Arc::new(Tensor::vector((0..d).map(|i| 1.0 + 0.1 * i as f32).collect()));
        let beta = Arc::new(Tensor::vector((0..d).map(|i| 0.05 * i as f32).collect()));
        let directions = (0..4)
            .map(|_| {
                let mut p = SsmBlockParams::init(e, n, rng);
                // A timestep near 0.5 so the recurrence carries real memory.
                p.delta_bias = Arc::new(Tensor::scalar(inverse_softplus(0.5) as f32));
                p
            })
            .collect();
        Ss2dFn {
            plans: plan_scans(4, 4, ScanMode::Cross2d),
            norm: (gamma, beta),
            gate,
            directions,
        }
    }
}

impl ScalarFn for Ss2dFn {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let vars = Ss2dVars {
            norm_gamma: tape.param(&self.norm.0, false),
            norm_beta: tape.param(&self.norm.1, false),
            gate: Some(GateVars {
                w_in: tape.param(&self.gate[0], false),
                w_gate: tape.param(&self.gate[1], false),
                w_out: tape.param(&self.gate[2], false),
            }),
            directions: self.directions.iter().map(|p| p.bind(tape, false)).collect(),
        };
        let y = ss2d_block(tape, x, &self.plans, &vars)?;
        weighted_sum(tape, y)
    }
}

/// Cross-entropy of a classifier as a function of its input image.
pub struct ClassifierLoss<'a> {
    pub model: &'a Model,
    pub label: usize,
}

impl ScalarFn for ClassifierLoss<'_> {
    fn eval<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let fwd = self.model.forward_tape(tape, x, false)?;
        tape.cross_entropy(fwd.logits, self.label)
    }
}

/// An `8 x 8` RGB classifier small enough for exhaustive gradient checks.
pub fn toy_classifier(arch: Arch, seed: u64) -> Result<Model> {
    let flat = arch == Arch::VssmFlatBidir;
    let mut model = Model::build(ModelConfig {
        arch,
        image_size: 8,
        patch_size: 2,
        in_channels: 3,
        depths: if flat { vec![2] } else { vec![1, 1] },
        dims: if flat { vec![8] } else { vec![8, 12] },
        n_state: 4,
        n_classes: 4,
        window: 2,
        seed,
    })?;
    // Raise every timestep so the scans are far from the identity.
    for p in model.params().to_vec() {
        if p.name.ends_with("delta_bias") {
            model.set_param(&p.name, Tensor::scalar(inverse_softplus(0.3) as f32))?;
        }
    }
    Ok(model)
}

fn random_point(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Reverse mode against central differences with step `h` for every op
/// kind, a full four-direction block and the loss of each architecture.
pub fn gradient_suite(seed: u64, h: f64, tol: f64) -> Result<Vec<OracleCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for case in op_cases() {
        let len = case.shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        let (lo, hi) = if case.positive { (0.5, 1.5) } else { (-1.0, 1.0) };
        let point = random_point(&mut rng, vec![len], lo, hi);
        let r = grad_check(&case, &point, h, tol)?;
        out.push(OracleCheck::from_grad(format!("op {}", case.name), &r));
    }
    let block = Ss2dFn::new(&mut rng);
    let point = random_point(&mut rng, vec![16, 5], -1.0, 1.0);
    out.push(OracleCheck::from_grad("ss2d_block", &grad_check(&block, &point, h, tol)?));
    for arch in [Arch::VssmHier, Arch::VssmFlatBidir, Arch::AttnWindow] {
        let model = toy_classifier(arch, seed)?;
        let f = ClassifierLoss { model: &model, label: 1 };
        let point = random_point(&mut rng, vec![8, 8, 3], 0.05, 0.95);
        let r = grad_check(&f, &point, h, tol)?;
        out.push(OracleCheck::from_grad(format!("classifier loss {}", arch.as_str()), &r));
    }
    Ok(out)
}

/// For each stream, the masked input gradient of the toy SSM classifier
/// against central differences of the forward with that stream detached.
pub fn mask_suite(seed: u64, h: f64, tol: f64) -> Result<Vec<OracleCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = toy_classifier(Arch::VssmHier, seed)?;
    let f = ClassifierLoss { model: &model, label: 2 };
    let point = random_point(&mut rng, vec![8, 8, 3], 0.05, 0.95);
    let coords: Vec<usize> = (0..point.len()).collect();
    [StreamTag::A, StreamTag::B, StreamTag::C, StreamTag::Delta]
        .into_iter()
        .map(|tag| {
            let r = masked_grad_check(&f, &point, StreamMask::of(&[tag]), h, tol, &coords)?;
            Ok(OracleCheck::from_grad(format!("masked {}", tag.as_str()), &r))
        })
        .collect()
}
