//! Selective state-space mathematics.
//!
//! The state matrix is diagonal and strictly negative, `A = -exp(a_log)`, so
//! zero-order-hold discretization is closed form per state channel:
//!
//! ```text
//! a_bar = exp(delta * a)
//! b_bar = (exp(delta * a) - 1) / a * b = phi(delta * a) * delta * b
//! ```
//!
//! with `phi(z) = (exp(z) - 1) / z` and the series `1 + z/2` below
//! `|z| < 1e-4`. On the tape `b_bar` is built in the `phi * delta * b` form so
//! the `A` stream (the `delta * a` product) and the `Delta` stream can be
//! masked independently.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{ops::zoh_phi, StreamTag, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Parameters of one selective-scan direction over `d` channels and `n` states.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmBlockParams {
    /// `[n]`, `A = -exp(a_log)`.
    pub a_log: Arc<Tensor>,
    /// `[d, n]`
    pub b_proj: Arc<Tensor>,
    /// `[d, n]`
    pub c_proj: Arc<Tensor>,
    /// `[d, 1]`
    pub delta_proj: Arc<Tensor>,
    /// `[1]`
    pub delta_bias: Arc<Tensor>,
    /// `[d]`
    pub d_skip: Arc<Tensor>,
}

/// Tape handles for [`SsmBlockParams`].
#[derive(Clone, Copy, Debug)]
pub struct SsmBlockVars {
    pub a_log: Var,
    pub b_proj: Var,
    pub c_proj: Var,
    pub delta_proj: Var,
    pub delta_bias: Var,
    pub d_skip: Var,
}

/// Inverse of softplus, for initializing the timestep bias.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl SsmBlockParams {
    /// Standard selective-SSM initialization: `a_log[i] = ln(i + 1)`,
    /// fan-in uniform projections, and a timestep bias with
    /// `softplus(bias)` log-uniform in `[1e-3, 0.1]`.
    pub fn init(d: usize, n: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d as f32).sqrt();
        let mut uniform = |len: usize| -> Vec<f32> {
            (0..len).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let b = uniform(d * n);
        let c = uniform(d * n);
        let dp: Vec<f32> = uniform(d).into_iter().map(|v| v * 0.1).collect();
        let dt = (rng.random_range((1e-3f64).ln()..(0.1f64).ln())).exp();
        SsmBlockParams {
            a_log: Arc::new(Tensor::vector((1..=n).map(|i| (i as f32).ln()).collect())),
            b_proj: Arc::new(Tensor::from_parts(vec![d, n], b)),
            c_proj: Arc::new(Tensor::from_parts(vec![d, n], c)),
            delta_proj: Arc::new(Tensor::from_parts(vec![d, 1], dp)),
            delta_bias: Arc::new(Tensor::scalar(inverse_softplus(dt) as f32)),
            d_skip: Arc::new(Tensor::full(vec![d], 1.0)),
        }
    }

    /// All-zero projections and skip, `a_log = 0` (so `A = -1`).
    pub fn zeros(d: usize, n: usize) -> Self {
        SsmBlockParams {
            a_log: Arc::new(Tensor::zeros(vec![n])),
            b_proj: Arc::new(Tensor::zeros(vec![d, n])),
            c_proj: Arc::new(Tensor::zeros(vec![d, n])),
            delta_proj: Arc::new(Tensor::zeros(vec![d, 1])),
            delta_bias: Arc::new(Tensor::zeros(vec![1])),
            d_skip: Arc::new(Tensor::zeros(vec![d])),
        }
    }

    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, requires_grad: bool) -> SsmBlockVars {
        SsmBlockVars {
            a_log: tape.param(&self.a_log, requires_grad),
            b_proj: tape.param(&self.b_proj, requires_grad),
            c_proj: tape.param(&self.c_proj, requires_grad),
            delta_proj: tape.param(&self.delta_proj, requires_grad),
            delta_bias: tape.param(&self.delta_bias, requires_grad),
            d_skip: tape.param(&self.d_skip, requires_grad),
        }
    }

    /// Named tensors in a fixed order with the stream each one feeds.
    pub fn named(&self) -> [(&'static str, &Arc<Tensor>, Option<StreamTag>); 6] {
        [
            ("a_log", &self.a_log, Some(StreamTag::A)),
            ("b_proj", &self.b_proj, Some(StreamTag::B)),
            ("c_proj", &self.c_proj, Some(StreamTag::C)),
            ("delta_proj", &self.delta_proj, Some(StreamTag::Delta)),
            ("delta_bias", &self.delta_bias, Some(StreamTag::Delta)),
            ("d_skip", &self.d_skip, None),
        ]
    }
}

/// Zero-order-hold discretization of a diagonal system for one step.
pub fn discretize_zoh(a: &Tensor, b: &Tensor, delta: f32) -> Result<(Tensor, Tensor)> {
    if !(delta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "timestep must be positive, got {delta}"
        )));
    }
    if a.shape() != b.shape() {
        return Err(Error::shape("discretize_zoh", a.shape(), b.shape()));
    }
    let dt = delta as f64;
    let mut a_bar = Vec::with_capacity(a.len());
    let mut b_bar = Vec::with_capacity(a.len());
    for (&ai, &bi) in a.data().iter().zip(b.data()) {
        let z = dt * ai as f64;
        a_bar.push(z.exp() as f32);
        b_bar.push((zoh_phi(z) * dt * bi as f64) as f32);
    }
    Ok((
        Tensor::from_parts(a.shape().to_vec(), a_bar),
        Tensor::from_parts(a.shape().to_vec(), b_bar),
    ))
}

/// Hidden-state trajectory `[l, n]` of the single-channel recurrence.
pub fn scan_states(
    a_bar: &Tensor,
    b_bar: &Tensor,
    x: &Tensor,
    h0: Option<&Tensor>,
) -> Result<Tensor> {
    let (l, n) = a_bar.dims2("scan_recurrent")?;
    if b_bar.shape() != a_bar.shape() {
        return Err(Error::shape("scan_recurrent", a_bar.shape(), b_bar.shape()));
    }
    if x.len() != l {
        return Err(Error::shape("scan_recurrent", a_bar.shape(), x.shape()));
    }
    let mut h = match h0 {
        Some(h0) if h0.len() != n => {
            return Err(Error::shape("scan_recurrent", a_bar.shape(), h0.shape()))
        }
        Some(h0) => h0.data().to_vec(),
        None => vec![0.0; n],
    };
    let (a, b) = (a_bar.data(), b_bar.data());
    let mut out = Vec::with_capacity(l * n);
    for t in 0..l {
        for s in 0..n {
            h[s] = a[t * n + s] * h[s] + b[t * n + s] * x.data()[t];
        }
        out.extend_from_slice(&h);
    }
    Ok(Tensor::from_parts(vec![l, n], out))
}

/// `h[t] = a_bar[t] * h[t-1] + b_bar[t] x[t]`, `y[t] = <c[t], h[t]>`.
pub fn scan_recurrent(
    a_bar: &Tensor,
    b_bar: &Tensor,
    c: &Tensor,
    x: &Tensor,
    h0: Option<&Tensor>,
) -> Result<Tensor> {
    if c.shape() != a_bar.shape() {
        return Err(Error::shape("scan_recurrent", a_bar.shape(), c.shape()));
    }
    let states = scan_states(a_bar, b_bar, x, h0)?;
    let n = a_bar.shape()[1];
    let y = states
        .data()
        .chunks(n)
        .zip(c.data().chunks(n))
        .map(|(h, c)| h.iter().zip(c).map(|(a, b)| a * b).sum())
        .collect();
    Ok(Tensor::vector(y))
}

/// Kernel `(C B, C A B, ..., C A^{L-1} B)` of a time-invariant diagonal system.
pub fn conv_kernel(a_bar: &Tensor, b_bar: &Tensor, c: &Tensor, len: usize) -> Result<Tensor> {
    for t in [a_bar, b_bar, c] {
        if t.rank() != 1 {
            return Err(Error::op(
                "scan_convolutional",
                format!(
                    "kernel form needs time-invariant [n] parameters, got shape {:?}",
                    t.shape()
                ),
            ));
        }
    }
    if a_bar.shape() != b_bar.shape() || a_bar.shape() != c.shape() {
        return Err(Error::shape("scan_convolutional", a_bar.shape(), c.shape()));
    }
    let mut power: Vec<f64> = vec![1.0; a_bar.len()];
    let mut k = Vec::with_capacity(len);
    for _ in 0..len {
        let v: f64 = (0..a_bar.len())
            .map(|s| c.data()[s] as f64 * power[s] * b_bar.data()[s] as f64)
            .sum();
        k.push(v as f32);
        for (p, &a) in power.iter_mut().zip(a_bar.data()) {
            *p *= a as f64;
        }
    }
    Ok(Tensor::vector(k))
}

/// Global causal convolution `y = x (*) K` of a time-invariant system.
pub fn scan_convolutional(a_bar: &Tensor, b_bar: &Tensor, c: &Tensor, x: &Tensor) -> Result<Tensor> {
    if x.rank() != 1 {
        return Err(Error::op("scan_convolutional", "input must be a [l] sequence"));
    }
    let l = x.len();
    let k = conv_kernel(a_bar, b_bar, c, l)?;
    let y = (0..l)
        .map(|t| {
            (0..=t)
                .map(|j| k.data()[j] as f64 * x.data()[t - j] as f64)
                .sum::<f64>() as f32
        })
        .collect();
    Ok(Tensor::vector(y))
}

/// Input-dependent `B`, `C` and timestep sequences.
#[derive(Clone, Copy, Debug)]
pub struct SelectiveSeq {
    /// `[l, n]`, tagged `B`.
    pub b: Var,
    /// `[l, n]`, tagged `C`.
    pub c: Var,
    /// `[l, 1]`, strictly positive, tagged `Delta`.
    pub delta: Var,
}

pub fn selective_params<T: Real>(
    tape: &mut Tape<T>,
    tokens: Var,
    p: &SsmBlockVars,
) -> Result<SelectiveSeq> {
    let b = tape.matmul(tokens, p.b_proj)?;
    tape.tag(b, StreamTag::B)?;
    let c = tape.matmul(tokens, p.c_proj)?;
    tape.tag(c, StreamTag::C)?;
    let dl = tape.linear(tokens, p.delta_proj, Some(p.delta_bias))?;
    let delta = tape.softplus(dl)?;
    tape.tag(delta, StreamTag::Delta)?;
    Ok(SelectiveSeq { b, c, delta })
}

/// One selective scan over `u: [l, e]` in the given token order.
/// The output stays in scan order.
pub fn directional_scan<T: Real>(
    tape: &mut Tape<T>,
    u: Var,
    p: &SsmBlockVars,
) -> Result<Var> {
    let sel = selective_params(tape, u, p)?;
    let ea = tape.exp(p.a_log)?;
    let a = tape.neg(ea)?;
    let da = tape.outer(sel.delta, a)?;
    tape.tag(da, StreamTag::A)?;
    let a_bar = tape.exp(da)?;
    let phi = tape.apply(crate::autodiff::Op::ZohPhi, &[da])?;
    let phi_b = tape.mul(phi, sel.b)?;
    let b_bar = tape.mul_col(phi_b, sel.delta)?;
    let y = tape.apply(crate::autodiff::Op::SelectiveScan, &[a_bar, b_bar, sel.c, u])?;
    let skip = tape.mul_row(u, p.d_skip)?;
    tape.add(y, skip)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanKind {
    RowFwd,
    RowBwd,
    ColFwd,
    ColBwd,
    SeqFwd,
    SeqBwd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanMode {
    /// Rows and columns, each forwards and backwards.
    Cross2d,
    /// The flattened sequence forwards and backwards.
    Bidir1d,
}

/// A token traversal order. `perm[t]` is the token visited at step `t`.
#[derive(Clone, Debug)]
pub struct ScanPlan {
    pub kind: ScanKind,
    pub perm: Arc<[usize]>,
    pub inverse: Arc<[usize]>,
}

impl ScanPlan {
    fn new(kind: ScanKind, perm: Vec<usize>) -> Self {
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        ScanPlan {
            kind,
            perm: perm.into(),
            inverse: inverse.into(),
        }
    }

    /// Flat element indices that reorder the rows of a `[l, width]` matrix.
    pub fn row_gather(order: &[usize], width: usize) -> Arc<[usize]> {
        order
            .iter()
            .flat_map(|&r| (r * width)..(r + 1) * width)
            .collect()
    }
}

pub fn plan_scans(height: usize, width: usize, mode: ScanMode) -> Vec<ScanPlan> {
    let l = height * width;
    let row: Vec<usize> = (0..l).collect();
    let rev = |v: &[usize]| v.iter().rev().copied().collect::<Vec<_>>();
    match mode {
        ScanMode::Cross2d => {
            let col: Vec<usize> = (0..width)
                .flat_map(|c| (0..height).map(move |r| r * width + c))
                .collect();
            vec![
                ScanPlan::new(ScanKind::RowFwd, row.clone()),
                ScanPlan::new(ScanKind::RowBwd, rev(&row)),
                ScanPlan::new(ScanKind::ColFwd, col.clone()),
                ScanPlan::new(ScanKind::ColBwd, rev(&col)),
            ]
        }
        ScanMode::Bidir1d => vec![
            ScanPlan::new(ScanKind::SeqFwd, row.clone()),
            ScanPlan::new(ScanKind::SeqBwd, rev(&row)),
        ],
    }
}

/// Gated input/output projections around the scan.
#[derive(Clone, Copy, Debug)]
pub struct GateVars {
    pub w_in: Var,
    pub w_gate: Var,
    pub w_out: Var,
}

#[derive(Clone, Debug)]
pub struct Ss2dVars {
    pub norm_gamma: Var,
    pub norm_beta: Var,
    pub gate: Option<GateVars>,
    /// One parameter set per scan plan.
    pub directions: Vec<SsmBlockVars>,
}

/// Multi-directional selective scan over a `[l, d]` token map.
///
/// `LN(x)` is optionally projected (`u = silu(LN(x) W_in)`, `z = LN(x) W_gate`),
/// scanned along every plan, returned to token order and summed; with a gate
/// the sum is multiplied by `silu(z)` and projected by `W_out`.
pub fn ss2d_block<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    plans: &[ScanPlan],
    p: &Ss2dVars,
) -> Result<Var> {
    if plans.len() != p.directions.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scan plans but {} direction parameter sets",
            plans.len(),
            p.directions.len()
        )));
    }
    let (l, _) = tape.value(x).dims2("ss2d_block")?;
    if let Some(plan) = plans.iter().find(|pl| pl.perm.len() != l) {
        return Err(Error::InvalidArgument(format!(
            "scan plan covers {} tokens but the map has {l}",
            plan.perm.len()
        )));
    }
    let xn = tape.layer_norm(x, p.norm_gamma, p.norm_beta)?;
    let (u, z) = match &p.gate {
        Some(g) => {
            let pre = tape.matmul(xn, g.w_in)?;
            let u = tape.silu(pre)?;
            let z = tape.matmul(xn, g.w_gate)?;
            (u, Some(z))
        }
        None => (xn, None),
    };
    let e = tape.value(u).shape()[1];
    let mut merged: Option<Var> = None;
    for (plan, dir) in plans.iter().zip(&p.directions) {
        let ordered = tape.gather(u, ScanPlan::row_gather(&plan.perm, e), &[l, e])?;
        let y = directional_scan(tape, ordered, dir)?;
        let back = tape.gather(y, ScanPlan::row_gather(&plan.inverse, e), &[l, e])?;
        merged = Some(match merged {
            Some(m) => tape.add(m, back)?,
            None => back,
        });
    }
    let y = merged.ok_or_else(|| Error::InvalidArgument("no scan plans".into()))?;
    match (&p.gate, z) {
        (Some(g), Some(z)) => {
            let gz = tape.silu(z)?;
            let gated = tape.mul(y, gz)?;
            tape.matmul(gated, g.w_out)
        }
        _ => Ok(y),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(d: &[f32]) -> Tensor {
        Tensor::vector(d.to_vec())
    }

    #[test]
    fn zoh_half_life_step() {
        let (a_bar, b_bar) = discretize_zoh(&v(&[-1.0]), &v(&[1.0]), 2.0f32.ln()).unwrap();
        assert!((a_bar.data()[0] - 0.5).abs() < 1e-7);
        assert!((b_bar.data()[0] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn zoh_small_rate_tends_to_euler() {
        let (_, b_bar) = discretize_zoh(&v(&[-1e-7]), &v(&[2.0]), 0.1).unwrap();
        assert!((b_bar.data()[0] - 0.2).abs() < 1e-6);
    }

    #[test]
    fn zoh_rejects_non_positive_timestep() {
        assert!(discretize_zoh(&v(&[-1.0]), &v(&[1.0]), 0.0).is_err());
        assert!(discretize_zoh(&v(&[-1.0]), &v(&[1.0]), -0.5).is_err());
    }

    #[test]
    fn memoryless_recurrence() {
        let a = Tensor::zeros(vec![3, 2]);
        let b = Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let c = Tensor::matrix(3, 2, vec![1., 1., 0.5, 0.5, 2., 0.]).unwrap();
        let x = v(&[1.0, -1.0, 2.0]);
        let y = scan_recurrent(&a, &b, &c, &x, None).unwrap();
        assert_eq!(y.data(), &[3.0, -3.5, 20.0]);
    }

    #[test]
    fn single_step_uses_initial_state() {
        let a = Tensor::matrix(1, 2, vec![0.5, 0.25]).unwrap();
        let b = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let c = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        let h0 = v(&[2.0, 4.0]);
        let y = scan_recurrent(&a, &b, &c, &v(&[1.0]), Some(&h0)).unwrap();
        // <c, a*h0 + b*x> = 3*(1+1) + 4*(1+2)
        assert_eq!(y.data(), &[18.0]);
    }

    #[test]
    fn kernel_expands_powers() {
        let k = conv_kernel(&v(&[0.5]), &v(&[2.0]), &v(&[3.0]), 3).unwrap();
        assert_eq!(k.data(), &[6.0, 3.0, 1.5]);
        let impulse = v(&[1.0, 0.0, 0.0]);
        let y = scan_convolutional(&v(&[0.5]), &v(&[2.0]), &v(&[3.0]), &impulse).unwrap();
        assert_eq!(y, k);
    }

    #[test]
    fn kernel_form_rejects_selective_parameters() {
        let a = Tensor::zeros(vec![4, 2]);
        let err = scan_convolutional(&a, &a, &a, &v(&[1.0; 4])).unwrap_err();
        assert!(err.to_string().contains("time-invariant"));
    }

    #[test]
    fn scan_plans_on_a_square() {
        let plans = plan_scans(2, 2, ScanMode::Cross2d);
        assert_eq!(plans.len(), 4);
        assert_eq!(&*plans[0].perm, &[0, 1, 2, 3]);
        assert_eq!(&*plans[1].perm, &[3, 2, 1, 0]);
        assert_eq!(&*plans[2].perm, &[0, 2, 1, 3]);
        assert_eq!(&*plans[3].perm, &[3, 1, 2, 0]);
        let bidir = plan_scans(3, 5, ScanMode::Bidir1d);
        assert_eq!(bidir.len(), 2);
        assert_eq!(bidir[1].kind, ScanKind::SeqBwd);
        for p in plans.iter().chain(&bidir) {
            for (i, &t) in p.perm.iter().enumerate() {
                assert_eq!(p.inverse[t], i);
            }
        }
    }

    #[test]
    fn zero_tokens_give_bias_timestep() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = SsmBlockParams::init(4, 3, &mut rng);
        let bias = params.delta_bias.data()[0];
        let mut tape = Tape::<f32>::new();
        let vars = params.bind(&mut tape, false);
        let tokens = tape.constant(Tensor::zeros(vec![5, 4]));
        let sel = selective_params(&mut tape, tokens, &vars).unwrap();
        let expected = crate::autodiff::ops::softplus(bias);
        assert!(tape.value(sel.delta).data().iter().all(|&d| d == expected));
        assert_eq!(tape.tag_of(sel.b), Some(StreamTag::B));
        assert_eq!(tape.tag_of(sel.c), Some(StreamTag::C));
        assert_eq!(tape.tag_of(sel.delta), Some(StreamTag::Delta));
    }

    #[test]
    fn timestep_bias_initialization_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let p = SsmBlockParams::init(2, 2, &mut rng);
            let dt = crate::autodiff::ops::softplus(p.delta_bias.data()[0] as f64);
            assert!((0.99e-3..=0.101).contains(&dt), "{dt}");
            assert!(p.a_log.data().iter().all(|&a| -a.exp() < 0.0));
        }
    }

    #[test]
    fn projection_rows_select_token_features() {
        // b_proj = identity slice: token e_1 picks out row 1 of the projection.
        let mut b = vec![0.0; 3 * 2];
        b[2] = 0.7;
        b[3] = -0.2;
        let mut params = SsmBlockParams::zeros(3, 2);
        params.b_proj = Arc::new(Tensor::matrix(3, 2, b).unwrap());
        let mut tape = Tape::<f32>::new();
        let vars = params.bind(&mut tape, false);
        let tokens = tape.constant(Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]).unwrap());
        let sel = selective_params(&mut tape, tokens, &vars).unwrap();
        assert_eq!(tape.value(sel.b).data(), &[0.7, -0.2]);
    }
}
