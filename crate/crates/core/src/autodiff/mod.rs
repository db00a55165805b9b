//! Reverse-mode differentiation over a linear tape, with maskable gradient streams.
//!
//! Every node may carry one [`StreamTag`]. When a tag is in the tape's active
//! mask, the backward sweep zeroes the adjoint arriving at nodes with that tag
//! and does not propagate it further. The forward values are never touched, so
//! one forward pass serves every mask configuration.
//!
//! Gradients are accumulated in tape order, which keeps backward results
//! bit-reproducible.

mod gradcheck;
pub mod ops;

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

pub use gradcheck::{
    grad_check, grad_check_coords, masked_grad_check, relative_error, GradCheckReport, ScalarFn,
};
pub use ops::{apply, Op};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Named gradient stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StreamTag {
    A,
    B,
    C,
    Delta,
    Input,
}

impl StreamTag {
    pub const ALL: [StreamTag; 5] = [
        StreamTag::A,
        StreamTag::B,
        StreamTag::C,
        StreamTag::Delta,
        StreamTag::Input,
    ];
    /// The four selective-scan parameter streams.
    pub const SSM: [StreamTag; 4] = [StreamTag::A, StreamTag::B, StreamTag::C, StreamTag::Delta];

    fn bit(self) -> u8 {
        1 << self as u8
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StreamTag::A => "A",
            StreamTag::B => "B",
            StreamTag::C => "C",
            StreamTag::Delta => "Delta",
            StreamTag::Input => "Input",
        }
    }
}

impl fmt::Display for StreamTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StreamTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(StreamTag::A),
            "B" | "b" => Ok(StreamTag::B),
            "C" | "c" => Ok(StreamTag::C),
            "Delta" | "delta" | "D" | "Δ" => Ok(StreamTag::Delta),
            "Input" | "input" => Ok(StreamTag::Input),
            other => Err(Error::InvalidArgument(format!("unknown stream tag {other:?}"))),
        }
    }
}

/// Set of stream tags.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct StreamMask(u8);

impl StreamMask {
    pub const EMPTY: StreamMask = StreamMask(0);

    pub fn of(tags: &[StreamTag]) -> Self {
        tags.iter().fold(Self::EMPTY, |m, &t| m.with(t))
    }

    pub fn with(self, tag: StreamTag) -> Self {
        StreamMask(self.0 | tag.bit())
    }

    pub fn contains(self, tag: StreamTag) -> bool {
        self.0 & tag.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset(self, other: StreamMask) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn union(self, other: StreamMask) -> Self {
        StreamMask(self.0 | other.0)
    }

    pub fn tags(self) -> impl Iterator<Item = StreamTag> {
        StreamTag::ALL.into_iter().filter(move |t| self.contains(*t))
    }
}

impl fmt::Display for StreamMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<_> = self.tags().map(StreamTag::as_str).collect();
        write!(f, "{{{}}}", names.join(","))
    }
}

impl FromStr for StreamMask {
    type Err = Error;

    /// Parses `"A,B"`, `"{A, Delta}"` or an empty string.
    fn from_str(s: &str) -> Result<Self> {
        let inner = s.trim().trim_start_matches('{').trim_end_matches('}');
        inner
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .try_fold(Self::EMPTY, |m, p| Ok(m.with(p.parse()?)))
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Option<Op>,
    inputs: Vec<Var>,
    saved: Vec<T>,
    tag: Option<StreamTag>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// A tape is single-threaded. Use one tape per independent computation (one
/// per image under attack); tapes on different threads share nothing.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    mask: StreamMask,
    detached: Option<(StreamMask, VecDeque<Tensor<T>>)>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to requested leaves.
#[derive(Clone, Debug, Default)]
pub struct GradMap<T: Real = f32> {
    entries: BTreeMap<usize, Tensor<T>>,
}

impl<T: Real> GradMap<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.entries.get(&var.0)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.entries.remove(&var.0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            mask: StreamMask::EMPTY,
            detached: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_leaf(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            inputs: Vec::new(),
            saved: Vec::new(),
            tag: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(Arc::new(value), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(Arc::new(value), false)
    }

    /// Leaf backed by a shared `f32` parameter; shares storage when `T = f32`.
    pub fn param(&mut self, value: &Arc<Tensor<f32>>, requires_grad: bool) -> Var {
        self.push_leaf(T::lift(value), requires_grad)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn tag_of(&self, var: Var) -> Option<StreamTag> {
        self.nodes[var.0].tag
    }

    /// Attaches a stream tag. A node carries at most one tag; re-tagging with
    /// the same tag is a no-op.
    pub fn tag(&mut self, var: Var, tag: StreamTag) -> Result<()> {
        let node = &mut self.nodes[var.0];
        match node.tag {
            Some(existing) if existing != tag => Err(Error::InvalidArgument(format!(
                "node {} already carries stream tag {existing}, cannot add {tag}",
                var.0
            ))),
            _ => {
                node.tag = Some(tag);
                self.detach_if_frozen(var, tag)
            }
        }
    }

    /// Replays recorded values for tagged nodes: the next nodes tagged with a
    /// tag in `mask` take the given values, in order, and become constants.
    ///
    /// Together with [`Tape::tagged_values`] this evaluates a forward pass in
    /// which the masked streams are held fixed at a reference point.
    pub fn detach_tagged(&mut self, mask: StreamMask, values: Vec<Tensor<T>>) {
        self.detached = Some((mask, values.into()));
    }

    /// Values of all nodes carrying a tag in `mask`, in recording order.
    pub fn tagged_values(&self, mask: StreamMask) -> Vec<Tensor<T>> {
        self.nodes
            .iter()
            .filter(|n| n.tag.is_some_and(|t| mask.contains(t)))
            .map(|n| (*n.value).clone())
            .collect()
    }

    fn detach_if_frozen(&mut self, var: Var, tag: StreamTag) -> Result<()> {
        let Some((mask, queue)) = &mut self.detached else {
            return Ok(());
        };
        if !mask.contains(tag) {
            return Ok(());
        }
        let value = queue.pop_front().ok_or_else(|| {
            Error::InvalidArgument(format!("no recorded value left for stream {tag}"))
        })?;
        let node = &mut self.nodes[var.0];
        if value.shape() != node.value.shape() {
            return Err(Error::shape("detach_tagged", node.value.shape(), value.shape()));
        }
        node.value = Arc::new(value);
        node.op = None;
        node.inputs.clear();
        node.saved.clear();
        node.requires_grad = false;
        Ok(())
    }

    /// Sets the tags whose gradients are blocked on subsequent `backward` calls.
    pub fn set_mask(&mut self, mask: StreamMask) {
        self.mask = mask;
    }

    pub fn mask(&self) -> StreamMask {
        self.mask
    }

    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|v| &*self.nodes[v.0].value).collect();
        let (value, saved) = ops::forward(&op, &values)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op: Some(op),
            inputs: inputs.to_vec(),
            saved,
            tag: None,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse sweep from a scalar `loss` to the requested `leaves`.
    ///
    /// Leaves the loss does not depend on get a zero gradient.
    pub fn backward(&self, loss: Var, leaves: &[Var]) -> Result<GradMap<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        let mut keep = vec![false; self.nodes.len()];
        for v in leaves {
            keep[v.0] = true;
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        if root.requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if grads[id].is_none() {
                continue;
            }
            if node.tag.is_some_and(|t| self.mask.contains(t)) {
                grads[id] = None;
                continue;
            }
            let Some(op) = &node.op else { continue };
            let g = if keep[id] {
                grads[id].clone().unwrap()
            } else {
                grads[id].take().unwrap()
            };
            let inputs: Vec<&Tensor<T>> =
                node.inputs.iter().map(|v| &*self.nodes[v.0].value).collect();
            let need: Vec<bool> = node
                .inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = ops::backward(op, &inputs, &node.value, &node.saved, &g, &need);
            for (input, grad) in node.inputs.iter().zip(input_grads) {
                let Some(grad) = grad else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, &b)| *a = *a + b),
                    slot => *slot = Some(grad),
                }
            }
        }
        let mut entries = BTreeMap::new();
        for &leaf in leaves {
            let shape = self.nodes[leaf.0].value.shape().to_vec();
            let grad = grads
                .get_mut(leaf.0)
                .and_then(Option::take)
                .map(|g| Tensor::from_parts(shape.clone(), g))
                .unwrap_or_else(|| Tensor::zeros(shape));
            entries.insert(leaf.0, grad);
        }
        Ok(GradMap { entries })
    }

    // Shorthands for the op kinds.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Matmul, &[a, b])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Log, &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Softplus, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Silu, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Neg, &[a])
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        self.apply(Op::Scale(s), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Mean, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Op::Reshape(shape.to_vec()), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Transpose2d, &[a])
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Op::Slice { axis, start, len }, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, parts)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Softmax, &[a])
    }

    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        self.apply(Op::CrossEntropy { label }, &[logits])
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::MeanRows, &[a])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.apply(Op::AddRow, &[a, row])
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.apply(Op::MulRow, &[a, row])
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.apply(Op::MulCol, &[a, col])
    }

    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Outer, &[a, b])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.apply(Op::LayerNorm { eps: 1e-5 }, &[x, gamma, beta])
    }

    pub fn gather(&mut self, a: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        self.apply(
            Op::Gather {
                index,
                shape: shape.to_vec(),
            },
            &[a],
        )
    }

    /// `x W + b` for `x: [l, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(tape: &mut Tape, d: &[f32]) -> Var {
        tape.leaf(Tensor::vector(d.to_vec()))
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0, 3.0]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss, &[x]).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn masked_input_stream_is_a_barrier() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0, 3.0]);
        tape.tag(x, StreamTag::Input).unwrap();
        let loss = tape.sum(x).unwrap();
        tape.set_mask(StreamMask::of(&[StreamTag::Input]));
        let g = tape.backward(loss, &[x]).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_mask_matches_unmasked() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[0.3, -0.7]);
        tape.tag(x, StreamTag::B).unwrap();
        let e = tape.exp(x).unwrap();
        let loss = tape.sum(e).unwrap();
        let before = tape.backward(loss, &[x]).unwrap();
        tape.set_mask(StreamMask::EMPTY);
        let after = tape.backward(loss, &[x]).unwrap();
        assert_eq!(before.get(x), after.get(x));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0]);
        assert!(matches!(tape.backward(x, &[x]), Err(Error::NotScalar(_))));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0, 2.0]);
        let y = vec_leaf(&mut tape, &[5.0]);
        let loss = tape.sum(x).unwrap();
        let g = tape.backward(loss, &[y]).unwrap();
        assert_eq!(g.get(y).unwrap().data(), &[0.0]);
    }

    #[test]
    fn a_node_carries_one_tag() {
        let mut tape = Tape::new();
        let x = vec_leaf(&mut tape, &[1.0]);
        tape.tag(x, StreamTag::A).unwrap();
        tape.tag(x, StreamTag::A).unwrap();
        assert!(tape.tag(x, StreamTag::C).is_err());
    }

    #[test]
    fn mask_parsing_round_trips() {
        let m: StreamMask = "{A, Delta}".parse().unwrap();
        assert!(m.contains(StreamTag::A) && m.contains(StreamTag::Delta));
        assert!(!m.contains(StreamTag::B));
        assert_eq!(m.to_string(), "{A,Delta}");
        assert_eq!("".parse::<StreamMask>().unwrap(), StreamMask::EMPTY);
        assert!("Q".parse::<StreamMask>().is_err());
    }
}
