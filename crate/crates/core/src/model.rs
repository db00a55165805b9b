//! Desk-scale image classifiers.
//!
//! * `vssm_hier`: patch embedding, stages of cross-scan selective-scan blocks,
//!   2x2 patch merging between stages (concat + linear), pooled linear head.
//! * `vssm_flat_bidir`: one stage of bidirectional 1D scan blocks over the
//!   flattened patch sequence, with learned positions.
//! * `attn_window`: the same hierarchy with non-overlapping (unshifted)
//!   window self-attention blocks and learned positions.
//!
//! Every model stores its parameters in one ordered registry. Selective-scan
//! parameters carry the stream tag they feed; everything else carries none.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{StreamMask, StreamTag, Tape, Var};
use crate::error::{Error, Result};
use crate::ssm::{self, GateVars, ScanMode, ScanPlan, Ss2dVars, SsmBlockParams, SsmBlockVars};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    VssmHier,
    VssmFlatBidir,
    AttnWindow,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::VssmHier => "vssm_hier",
            Arch::VssmFlatBidir => "vssm_flat_bidir",
            Arch::AttnWindow => "attn_window",
        }
    }

    pub fn is_ssm(self) -> bool {
        !matches!(self, Arch::AttnWindow)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "vssm_hier" => Ok(Arch::VssmHier),
            "vssm_flat_bidir" => Ok(Arch::VssmFlatBidir),
            "attn_window" => Ok(Arch::AttnWindow),
            other => Err(Error::Config(format!("unknown arch {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub depths: Vec<usize>,
    pub dims: Vec<usize>,
    pub n_state: usize,
    pub n_classes: usize,
    /// Attention window side, in tokens. Ignored by the SSM models.
    pub window: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            arch: Arch::VssmHier,
            image_size: 32,
            patch_size: 4,
            in_channels: 3,
            depths: vec![2, 2],
            dims: vec![32, 64],
            n_state: 8,
            n_classes: 10,
            window: 4,
            seed: 0,
        }
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub(crate) fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: {p:?} is not a non-negative integer")))
        })
        .collect()
}

impl ModelConfig {
    pub fn with_arch(arch: Arch) -> Self {
        ModelConfig {
            arch,
            ..Default::default()
        }
    }

    pub fn stages(&self) -> usize {
        self.depths.len()
    }

    /// Token grid side of the first stage.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn stage_grid(&self, stage: usize) -> usize {
        self.grid() >> stage
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.patch_size == 0 || self.in_channels == 0 {
            return fail("image_size, patch_size and in_channels must be positive".into());
        }
        if self.n_state == 0 || self.n_classes == 0 {
            return fail("n_state and n_classes must be positive".into());
        }
        if self.depths.is_empty() {
            return fail("depths must list at least one stage".into());
        }
        if self.dims.len() != self.depths.len() {
            return fail(format!(
                "dims has {} entries but depths has {}",
                self.dims.len(),
                self.depths.len()
            ));
        }
        if self.dims.iter().chain(&self.depths).any(|&d| d == 0) {
            return fail("depths and dims must be positive".into());
        }
        if self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        match self.arch {
            Arch::VssmFlatBidir if self.stages() != 1 => {
                fail("vssm_flat_bidir takes exactly one stage".into())
            }
            Arch::VssmFlatBidir => Ok(()),
            Arch::VssmHier | Arch::AttnWindow => {
                let unit = self.patch_size << (self.stages() - 1);
                if self.image_size % unit != 0 {
                    return fail(format!(
                        "image_size {} is not divisible by patch_size * 2^(stages-1) = {unit}",
                        self.image_size
                    ));
                }
                if self.arch == Arch::AttnWindow {
                    if self.window == 0 {
                        return fail("window must be positive".into());
                    }
                    for s in 0..self.stages() {
                        let g = self.stage_grid(s);
                        if g % self.window.min(g) != 0 {
                            return fail(format!(
                                "window {} does not tile the {g}x{g} grid of stage {s}",
                                self.window
                            ));
                        }
                    }
                }
                Ok(())
            }
        }
    }

    /// `key=value` lines in a fixed order.
    pub fn to_kv(&self) -> String {
        format!(
            "arch={}\nimage_size={}\npatch_size={}\nin_channels={}\ndepths={}\ndims={}\nn_state={}\nn_classes={}\nwindow={}\nseed={}\n",
            self.arch,
            self.image_size,
            self.patch_size,
            self.in_channels,
            join(&self.depths),
            join(&self.dims),
            self.n_state,
            self.n_classes,
            self.window,
            self.seed
        )
    }

    /// Overrides fields from `key=value` pairs; unknown keys are an error.
    pub fn apply_kv<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (k, v) in pairs {
            let num = |v: &str| -> Result<usize> {
                v.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{k}: {v:?} is not a non-negative integer")))
            };
            match k.trim() {
                "arch" => self.arch = v.parse()?,
                "image_size" => self.image_size = num(v)?,
                "patch_size" => self.patch_size = num(v)?,
                "in_channels" => self.in_channels = num(v)?,
                "depths" => self.depths = parse_list(k, v)?,
                "dims" => self.dims = parse_list(k, v)?,
                "n_state" => self.n_state = num(v)?,
                "n_classes" => self.n_classes = num(v)?,
                "window" => self.window = num(v)?,
                "seed" => self.seed = num(v)? as u64,
                other => return Err(Error::Config(format!("unknown model key {other:?}"))),
            }
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        let pairs = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.split_once('=')
                    .ok_or_else(|| Error::Config(format!("expected key=value, got {l:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        cfg.apply_kv(pairs)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub value: Arc<Tensor>,
    pub tag: Option<StreamTag>,
}

#[derive(Clone, Debug)]
struct DirIdx {
    a_log: usize,
    b_proj: usize,
    c_proj: usize,
    delta_proj: usize,
    delta_bias: usize,
    d_skip: usize,
}

#[derive(Clone, Debug)]
enum Block {
    Ssm {
        norm: (usize, usize),
        w_in: usize,
        w_gate: usize,
        w_out: usize,
        dirs: Vec<DirIdx>,
    },
    Attn {
        norm1: (usize, usize),
        qkv: (usize, usize),
        proj: (usize, usize),
        norm2: (usize, usize),
        fc1: (usize, usize),
        fc2: (usize, usize),
    },
}

#[derive(Clone, Debug)]
struct Stage {
    grid: usize,
    dim: usize,
    blocks: Vec<Block>,
    plans: Vec<ScanPlan>,
    /// Norm gamma, beta and projection applied to the 2x2-merged input.
    merge_in: Option<(usize, usize, usize)>,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: (usize, usize),
    embed_norm: (usize, usize),
    pos: Option<usize>,
    stages: Vec<Stage>,
    head_norm: (usize, usize),
    head: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: Vec<NamedParam>,
    layout: Layout,
    patch_index: Arc<[usize]>,
    merge_index: Vec<Option<Arc<[usize]>>>,
}

struct Registry<'r> {
    params: Vec<NamedParam>,
    rng: &'r mut ChaCha8Rng,
}

impl Registry<'_> {
    fn add(&mut self, name: String, value: Tensor, tag: Option<StreamTag>) -> usize {
        self.params.push(NamedParam {
            name,
            value: Arc::new(value),
            tag,
        });
        self.params.len() - 1
    }

    fn uniform(&mut self, shape: Vec<usize>, bound: f32) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        Tensor::from_parts(shape, data)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> (usize, usize) {
        let w = self.uniform(vec![fan_in, fan_out], 1.0 / (fan_in as f32).sqrt());
        let wi = self.add(format!("{name}.weight"), w, None);
        let bi = if bias {
            self.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out]), None)
        } else {
            usize::MAX
        };
        (wi, bi)
    }

    fn norm(&mut self, name: &str, dim: usize) -> (usize, usize) {
        let g = self.add(format!("{name}.gamma"), Tensor::full(vec![dim], 1.0), None);
        let b = self.add(format!("{name}.beta"), Tensor::zeros(vec![dim]), None);
        (g, b)
    }

    fn ssm_direction(&mut self, name: &str, dim: usize, n_state: usize) -> DirIdx {
        let p = SsmBlockParams::init(dim, n_state, self.rng);
        let mut idx = [0usize; 6];
        for (slot, (field, value, tag)) in idx.iter_mut().zip(p.named()) {
            *slot = self.add(format!("{name}.{field}"), (**value).clone(), tag);
        }
        DirIdx {
            a_log: idx[0],
            b_proj: idx[1],
            c_proj: idx[2],
            delta_proj: idx[3],
            delta_bias: idx[4],
            d_skip: idx[5],
        }
    }
}

/// Flat indices turning an `[h, w, c]` image into `[(h/p)(w/p), p*p*c]` patches.
pub fn patchify_index(image_size: usize, patch: usize, channels: usize) -> Arc<[usize]> {
    let g = image_size / patch;
    let mut idx = Vec::with_capacity(image_size * image_size * channels);
    for gy in 0..g {
        for gx in 0..g {
            for py in 0..patch {
                for px in 0..patch {
                    let (y, x) = (gy * patch + py, gx * patch + px);
                    for ch in 0..channels {
                        idx.push((y * image_size + x) * channels + ch);
                    }
                }
            }
        }
    }
    idx.into()
}

/// Flat indices gathering 2x2 token neighbourhoods of a `[g*g, d]` map into
/// `[(g/2)^2, 4d]`, ordered (even row, even col), (odd, even), (even, odd), (odd, odd).
fn merge_index(grid: usize, dim: usize) -> Arc<[usize]> {
    let half = grid / 2;
    let mut idx = Vec::with_capacity(grid * grid * dim);
    for y in 0..half {
        for x in 0..half {
            for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let t = (2 * y + dy) * grid + 2 * x + dx;
                idx.extend(t * dim..(t + 1) * dim);
            }
        }
    }
    idx.into()
}

/// Token order that lists each `w x w` window contiguously.
fn window_order(grid: usize, w: usize) -> Vec<usize> {
    let per = grid / w;
    let mut order = Vec::with_capacity(grid * grid);
    for wy in 0..per {
        for wx in 0..per {
            for y in 0..w {
                for x in 0..w {
                    order.push((wy * w + y) * grid + wx * w + x);
                }
            }
        }
    }
    order
}

/// Outputs of one recorded forward pass.
pub struct ForwardPass {
    /// `[1, n_classes]`
    pub logits: Var,
    /// Parameter handles, in registry order.
    pub params: Vec<Var>,
    /// Attention maps per attention layer, each `[windows * n, n]` with
    /// windows stacked along rows.
    pub attention: Vec<AttentionLayer>,
}

#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub stage: usize,
    pub window: usize,
    /// Per window, a `[n, n]` row-stochastic map.
    pub maps: Vec<Var>,
}

impl Model {
    pub fn build(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut reg = Registry {
            params: Vec::new(),
            rng: &mut rng,
        };
        let c = &config;
        let patch_dim = c.patch_size * c.patch_size * c.in_channels;
        let embed = reg.linear("embed", patch_dim, c.dims[0], true);
        let embed_norm = reg.norm("embed.norm", c.dims[0]);
        let pos = match c.arch {
            Arch::VssmHier => None,
            _ => {
                let l = c.grid() * c.grid();
                let t = reg.uniform(vec![l, c.dims[0]], 0.02);
                Some(reg.add("pos_embed".into(), t, None))
            }
        };
        let mut stages = Vec::new();
        for (s, (&depth, &dim)) in c.depths.iter().zip(&c.dims).enumerate() {
            let grid = c.stage_grid(s);
            let merge_in = (s > 0).then(|| {
                let prev = c.dims[s - 1];
                let (g, b) = reg.norm(&format!("stage{s}.merge.norm"), 4 * prev);
                let (w, _) = reg.linear(&format!("stage{s}.merge.proj"), 4 * prev, dim, false);
                (g, b, w)
            });
            let plans = match c.arch {
                Arch::VssmHier => ssm::plan_scans(grid, grid, ScanMode::Cross2d),
                Arch::VssmFlatBidir => ssm::plan_scans(grid, grid, ScanMode::Bidir1d),
                Arch::AttnWindow => Vec::new(),
            };
            let mut blocks = Vec::new();
            for b in 0..depth {
                let name = format!("stage{s}.block{b}");
                let block = if c.arch.is_ssm() {
                    let norm = reg.norm(&format!("{name}.norm"), dim);
                    let (w_in, _) = reg.linear(&format!("{name}.in_proj"), dim, dim, false);
                    let (w_gate, _) = reg.linear(&format!("{name}.gate_proj"), dim, dim, false);
                    let (w_out, _) = reg.linear(&format!("{name}.out_proj"), dim, dim, false);
                    let dirs = (0..plans.len())
                        .map(|k| reg.ssm_direction(&format!("{name}.dir{k}"), dim, c.n_state))
                        .collect();
                    Block::Ssm {
                        norm,
                        w_in,
                        w_gate,
                        w_out,
                        dirs,
                    }
                } else {
                    Block::Attn {
                        norm1: reg.norm(&format!("{name}.norm1"), dim),
                        qkv: reg.linear(&format!("{name}.qkv"), dim, 3 * dim, true),
                        proj: reg.linear(&format!("{name}.proj"), dim, dim, true),
                        norm2: reg.norm(&format!("{name}.norm2"), dim),
                        fc1: reg.linear(&format!("{name}.fc1"), dim, 2 * dim, true),
                        fc2: reg.linear(&format!("{name}.fc2"), 2 * dim, dim, true),
                    }
                };
                blocks.push(block);
            }
            stages.push(Stage {
                grid,
                dim,
                blocks,
                plans,
                merge_in,
            });
        }
        let last = *c.dims.last().unwrap();
        let head_norm = reg.norm("head.norm", last);
        let head = reg.linear("head", last, c.n_classes, true);
        let params = reg.params;
        let patch_index = patchify_index(c.image_size, c.patch_size, c.in_channels);
        let merge_index = (0..c.stages())
            .map(|s| (s > 0).then(|| merge_index(c.stage_grid(s - 1), c.dims[s - 1])))
            .collect();
        Ok(Model {
            config,
            params,
            layout: Layout {
                embed,
                embed_norm,
                pos,
                stages,
                head_norm,
                head,
            },
            patch_index,
            merge_index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn arch(&self) -> Arch {
        self.config.arch
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// `[h, w, c]` of accepted images.
    pub fn image_shape(&self) -> [usize; 3] {
        let c = &self.config;
        [c.image_size, c.image_size, c.in_channels]
    }

    pub fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    /// Stream tags carried by at least one parameter.
    pub fn stream_tags(&self) -> StreamMask {
        self.params
            .iter()
            .filter_map(|p| p.tag)
            .fold(StreamMask::EMPTY, StreamMask::with)
    }

    /// Replaces parameter values, keeping names and shapes.
    pub fn set_params(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, v) in self.params.iter().zip(&values) {
            if p.value.shape() != v.shape() {
                return Err(Error::shape("set_params", p.value.shape(), v.shape()));
            }
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = Arc::new(v);
        }
        Ok(())
    }

    /// Replaces the value of one parameter by name.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {name:?}")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_param", p.value.shape(), value.shape()));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        if image.len() != self.image_len() {
            return Err(Error::shape("forward", &self.image_shape(), image.shape()));
        }
        if let Some(&bad) = image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::PixelRange(bad));
        }
        Ok(())
    }

    /// Records the forward pass of one `[h, w, c]` image.
    pub fn forward_tape<T: Real>(
        &self,
        tape: &mut Tape<T>,
        image: Var,
        params_require_grad: bool,
    ) -> Result<ForwardPass> {
        let pv: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.param(&p.value, params_require_grad))
            .collect();
        let c = &self.config;
        let l0 = c.grid() * c.grid();
        let patch_dim = c.patch_size * c.patch_size * c.in_channels;
        let patches = tape.gather(image, Arc::clone(&self.patch_index), &[l0, patch_dim])?;
        let lay = &self.layout;
        let mut x = tape.linear(patches, pv[lay.embed.0], Some(pv[lay.embed.1]))?;
        x = tape.layer_norm(x, pv[lay.embed_norm.0], pv[lay.embed_norm.1])?;
        if let Some(pos) = lay.pos {
            x = tape.add(x, pv[pos])?;
        }
        let mut attention = Vec::new();
        for (s, stage) in lay.stages.iter().enumerate() {
            if let Some((g, b, w)) = stage.merge_in {
                let prev = &lay.stages[s - 1];
                let l = stage.grid * stage.grid;
                let idx = self.merge_index[s].clone().expect("merge index for stage > 0");
                let merged = tape.gather(x, idx, &[l, 4 * prev.dim])?;
                let normed = tape.layer_norm(merged, pv[g], pv[b])?;
                x = tape.matmul(normed, pv[w])?;
            }
            for block in &stage.blocks {
                x = match block {
                    Block::Ssm {
                        norm,
                        w_in,
                        w_gate,
                        w_out,
                        dirs,
                    } => {
                        let vars = Ss2dVars {
                            norm_gamma: pv[norm.0],
                            norm_beta: pv[norm.1],
                            gate: Some(GateVars {
                                w_in: pv[*w_in],
                                w_gate: pv[*w_gate],
                                w_out: pv[*w_out],
                            }),
                            directions: dirs
                                .iter()
                                .map(|d| SsmBlockVars {
                                    a_log: pv[d.a_log],
                                    b_proj: pv[d.b_proj],
                                    c_proj: pv[d.c_proj],
                                    delta_proj: pv[d.delta_proj],
                                    delta_bias: pv[d.delta_bias],
                                    d_skip: pv[d.d_skip],
                                })
                                .collect(),
                        };
                        let y = ssm::ss2d_block(tape, x, &stage.plans, &vars)?;
                        tape.add(x, y)?
                    }
                    Block::Attn {
                        norm1,
                        qkv,
                        proj,
                        norm2,
                        fc1,
                        fc2,
                    } => {
                        let (y, layer) = self.window_attention(
                            tape,
                            x,
                            s,
                            stage,
                            (pv[norm1.0], pv[norm1.1]),
                            (pv[qkv.0], pv[qkv.1]),
                            (pv[proj.0], pv[proj.1]),
                        )?;
                        attention.push(layer);
                        let x1 = tape.add(x, y)?;
                        let h = tape.layer_norm(x1, pv[norm2.0], pv[norm2.1])?;
                        let h = tape.linear(h, pv[fc1.0], Some(pv[fc1.1]))?;
                        let h = tape.silu(h)?;
                        let h = tape.linear(h, pv[fc2.0], Some(pv[fc2.1]))?;
                        tape.add(x1, h)?
                    }
                };
            }
        }
        let xn = tape.layer_norm(x, pv[lay.head_norm.0], pv[lay.head_norm.1])?;
        let pooled = tape.mean_rows(xn)?;
        let logits = tape.linear(pooled, pv[lay.head.0], Some(pv[lay.head.1]))?;
        Ok(ForwardPass {
            logits,
            params: pv,
            attention,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn window_attention<T: Real>(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        stage_idx: usize,
        stage: &Stage,
        norm: (Var, Var),
        qkv: (Var, Var),
        proj: (Var, Var),
    ) -> Result<(Var, AttentionLayer)> {
        let (g, d) = (stage.grid, stage.dim);
        let l = g * g;
        let w = self.config.window.min(g);
        let n = w * w;
        let order = window_order(g, w);
        let mut inverse = vec![0; l];
        for (i, &t) in order.iter().enumerate() {
            inverse[t] = i;
        }
        let xn = tape.layer_norm(x, norm.0, norm.1)?;
        let packed = tape.linear(xn, qkv.0, Some(qkv.1))?;
        let packed = tape.gather(packed, ScanPlan::row_gather(&order, 3 * d), &[l, 3 * d])?;
        let scale = 1.0 / (d as f32).sqrt();
        let mut outs = Vec::with_capacity(l / n);
        let mut maps = Vec::with_capacity(l / n);
        for win in 0..l / n {
            let rows = tape.slice(packed, 0, win * n, n)?;
            let q = tape.slice(rows, 1, 0, d)?;
            let k = tape.slice(rows, 1, d, d)?;
            let v = tape.slice(rows, 1, 2 * d, d)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, scale)?;
            let att = tape.softmax(scores)?;
            maps.push(att);
            outs.push(tape.matmul(att, v)?);
        }
        let y = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs, 0)?
        };
        let y = tape.gather(y, ScanPlan::row_gather(&inverse, d), &[l, d])?;
        let y = tape.linear(y, proj.0, Some(proj.1))?;
        Ok((
            y,
            AttentionLayer {
                stage: stage_idx,
                window: w,
                maps,
            },
        ))
    }

    /// For a first-stage patch index, the (window, row-in-window) it occupies
    /// in an attention layer of `stage`.
    pub fn attention_slot(&self, stage: usize, patch: usize) -> (usize, usize) {
        let g0 = self.config.grid();
        let (py, px) = (patch / g0, patch % g0);
        let g = self.config.stage_grid(stage);
        let w = self.config.window.min(g);
        let (ty, tx) = (py >> stage, px >> stage);
        let per = g / w;
        ((ty / w) * per + tx / w, (ty % w) * w + tx % w)
    }

    /// Logits of one image, no gradients.
    pub fn logits(&self, image: &Tensor) -> Result<Vec<f32>> {
        self.check_image(image)?;
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(image.clone());
        let fwd = self.forward_tape(&mut tape, x, false)?;
        let out = tape.value(fwd.logits);
        if !out.all_finite() {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(out.data().to_vec())
    }

    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        Ok(argmax(&self.logits(image)?))
    }

    /// Batched forward over `[b, h, w, c]` images, returning `[b, n_classes]`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let per = self.image_len();
        if images.len() % per != 0 || images.shape().last() != Some(&self.config.in_channels) {
            return Err(Error::shape("forward", &self.image_shape(), images.shape()));
        }
        let b = images.len() / per;
        let rows: Vec<Vec<f32>> = images
            .data()
            .par_chunks(per)
            .map(|img| {
                let t = Tensor::from_parts(self.image_shape().to_vec(), img.to_vec());
                self.logits(&t)
            })
            .collect::<Result<_>>()?;
        Ok(Tensor::from_parts(
            vec![b, self.config.n_classes],
            rows.concat(),
        ))
    }

    /// Per-layer attention maps of the attention baseline, each
    /// `[windows, n, n]`.
    pub fn attention_rollout(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        if self.config.arch != Arch::AttnWindow {
            return Err(Error::InvalidArgument(format!(
                "{} has no attention maps",
                self.config.arch
            )));
        }
        self.check_image(image)?;
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(image.clone());
        let fwd = self.forward_tape(&mut tape, x, false)?;
        Ok(fwd
            .attention
            .iter()
            .map(|layer| {
                let n = layer.window * layer.window;
                let mut data = Vec::with_capacity(layer.maps.len() * n * n);
                for &m in &layer.maps {
                    data.extend_from_slice(tape.value(m).data());
                }
                Tensor::from_parts(vec![layer.maps.len(), n, n], data)
            })
            .collect())
    }

    /// Cross-entropy loss and parameter gradients for one labelled image.
    pub fn loss_and_grads(&self, image: &Tensor, label: usize) -> Result<(f32, Vec<f32>, Vec<Tensor>)> {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(image.clone());
        let fwd = self.forward_tape(&mut tape, x, true)?;
        let logits = tape.value(fwd.logits).data().to_vec();
        let loss = tape.cross_entropy(fwd.logits, label)?;
        let mut grads = tape.backward(loss, &fwd.params)?;
        let g = fwd
            .params
            .iter()
            .map(|&v| grads.take(v).expect("requested leaf"))
            .collect();
        Ok((tape.value(loss).item()?, logits, g))
    }

    /// Parameter names grouped by stream tag.
    pub fn tag_layout(&self) -> BTreeMap<StreamTag, Vec<&str>> {
        let mut out: BTreeMap<StreamTag, Vec<&str>> = BTreeMap::new();
        for p in &self.params {
            if let Some(t) = p.tag {
                out.entry(t).or_default().push(&p.name);
            }
        }
        out
    }
}

pub fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &x)| {
            if x > bv {
                (i, x)
            } else {
                (bi, bv)
            }
        })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(arch: Arch) -> ModelConfig {
        ModelConfig {
            arch,
            image_size: 8,
            patch_size: 2,
            in_channels: 1,
            depths: if arch == Arch::VssmFlatBidir { vec![1] } else { vec![1, 1] },
            dims: if arch == Arch::VssmFlatBidir { vec![6] } else { vec![6, 8] },
            n_state: 3,
            n_classes: 3,
            window: 2,
            seed: 5,
        }
    }

    #[test]
    fn default_geometry() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.stage_grid(0), 8);
        assert_eq!(cfg.stage_grid(1), 4);
    }

    #[test]
    fn invalid_configs_name_the_violation() {
        let mut cfg = ModelConfig::default();
        cfg.dims = vec![32];
        assert!(Model::build(cfg).unwrap_err().to_string().contains("dims"));
        let mut cfg = ModelConfig::default();
        cfg.image_size = 30;
        assert!(Model::build(cfg).unwrap_err().to_string().contains("divisible"));
        let mut cfg = ModelConfig::default();
        cfg.depths = vec![1; 5];
        cfg.dims = vec![4; 5];
        assert!(Model::build(cfg).unwrap_err().to_string().contains("2^(stages-1)"));
    }

    #[test]
    fn builds_are_deterministic() {
        let a = Model::build(ModelConfig::default()).unwrap();
        let b = Model::build(ModelConfig::default()).unwrap();
        assert_eq!(a.params(), b.params());
        assert!(a.param_count() > 0);
    }

    #[test]
    fn config_kv_round_trip() {
        let cfg = tiny(Arch::AttnWindow);
        assert_eq!(ModelConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn window_tiling() {
        let order = window_order(8, 4);
        assert_eq!(order.len(), 64);
        assert_eq!(&order[..4], &[0, 1, 2, 3]);
        assert_eq!(order[4], 8);
        assert_eq!(order[16], 4);
        let m = Model::build(ModelConfig::with_arch(Arch::AttnWindow)).unwrap();
        let maps = m.attention_rollout(&Tensor::zeros(vec![32, 32, 3])).unwrap();
        assert_eq!(maps.len(), 4);
        assert_eq!(maps[0].shape(), &[4, 16, 16]);
        assert_eq!(maps[2].shape(), &[1, 16, 16]);
    }

    #[test]
    fn stream_tags_are_exhaustive_and_exclusive() {
        for arch in [Arch::VssmHier, Arch::VssmFlatBidir, Arch::AttnWindow] {
            let m = Model::build(tiny(arch)).unwrap();
            for p in m.params() {
                let field = p.name.rsplit('.').next().unwrap();
                let expected = match field {
                    "a_log" => Some(StreamTag::A),
                    "b_proj" => Some(StreamTag::B),
                    "c_proj" => Some(StreamTag::C),
                    "delta_proj" | "delta_bias" => Some(StreamTag::Delta),
                    _ => None,
                };
                assert_eq!(p.tag, expected, "{}", p.name);
            }
            if arch.is_ssm() {
                assert!(StreamMask::of(&StreamTag::SSM).is_subset(m.stream_tags()));
            } else {
                assert!(m.stream_tags().is_empty());
            }
        }
    }

    #[test]
    fn forward_on_zero_batch_is_finite_and_row_constant() {
        for arch in [Arch::VssmHier, Arch::VssmFlatBidir, Arch::AttnWindow] {
            let m = Model::build(tiny(arch)).unwrap();
            let out = m.forward(&Tensor::zeros(vec![3, 8, 8, 1])).unwrap();
            assert!(out.all_finite());
            let rows: Vec<_> = out.data().chunks(3).collect();
            assert_eq!(rows[0], rows[1]);
            assert_eq!(rows[1], rows[2]);
        }
    }

    #[test]
    fn out_of_range_pixels_are_rejected() {
        let m = Model::build(tiny(Arch::VssmHier)).unwrap();
        let mut img = Tensor::zeros(vec![8, 8, 1]);
        img.data_mut()[3] = 1.5;
        assert!(matches!(m.logits(&img), Err(Error::PixelRange(_))));
    }

    #[test]
    fn attention_needs_the_attention_model() {
        let m = Model::build(tiny(Arch::VssmHier)).unwrap();
        assert!(m.attention_rollout(&Tensor::zeros(vec![8, 8, 1])).is_err());
    }

    #[test]
    fn single_token_attention_is_one() {
        let cfg = ModelConfig {
            arch: Arch::AttnWindow,
            image_size: 4,
            patch_size: 4,
            in_channels: 1,
            depths: vec![1],
            dims: vec![4],
            n_state: 1,
            n_classes: 2,
            window: 1,
            seed: 1,
        };
        let m = Model::build(cfg).unwrap();
        let maps = m.attention_rollout(&Tensor::full(vec![4, 4, 1], 0.3)).unwrap();
        assert_eq!(maps[0].data(), &[1.0]);
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let m = Model::build(tiny(Arch::AttnWindow)).unwrap();
        let img = Tensor::new(vec![8, 8, 1], (0..64).map(|i| (i as f32 * 0.37).sin().abs()).collect()).unwrap();
        for map in m.attention_rollout(&img).unwrap() {
            let n = map.shape()[2];
            for row in map.data().chunks(n) {
                assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn attention_slot_maps_patches_through_merges() {
        let m = Model::build(ModelConfig::with_arch(Arch::AttnWindow)).unwrap();
        // patch (row 5, col 6) on the 8x8 grid, window 4
        let p = 5 * 8 + 6;
        assert_eq!(m.attention_slot(0, p), (3, 1 * 4 + 2));
        // stage 1: token (2, 3) on the 4x4 grid, one window
        assert_eq!(m.attention_slot(1, p), (0, 2 * 4 + 3));
    }
}
