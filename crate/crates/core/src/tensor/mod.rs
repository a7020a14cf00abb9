//! Reverse-mode autodiff on a flat tape.
//!
//! Every operation appends one node to a [`Tape`]; node ids are handed out in
//! topological order, so the backward pass is a single reverse sweep with no
//! sorting. Tensors are immutable once recorded and the tape is single-writer.
//! All values are checked for finiteness as they are produced: a NaN or Inf
//! anywhere is an error state, not a silent poison.
//!
//! The op set is deliberately coarse (whole linear layers, fused deformable
//! sampling) so that a desk-scale model spends its time in tight kernels
//! rather than in graph bookkeeping.

mod elementwise;
mod linalg;
mod optim;
mod params;
mod sample;

pub use optim::{Optimizer, OptimizerKind};
pub use params::{ParamStore, Staged};
pub use sample::{SampleGrid, SampleMode, SampleSpec};

use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({lhs:?} vs {rhs:?})")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorRef(pub(crate) usize);

impl TensorRef {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One recorded tensor: shape, values and the op that produced it.
pub struct Tensor<S> {
    pub shape: Vec<usize>,
    pub values: Vec<S>,
    pub requires_grad: bool,
    pub(crate) op: Op<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

pub(crate) enum Op<S> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `[R, C] + [C]`, bias-style broadcast over rows.
    AddRow(usize, usize),
    /// `[R, C] * [C]`, gain-style broadcast over rows.
    MulRow(usize, usize),
    Neg(usize),
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Abs(usize),
    Scale(usize, S),
    AddConst(usize),
    ClampMin(usize, S),
    Reshape(usize),
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    /// 2-D transpose.
    Transpose(usize),
    /// `[R, C] -> [R * times, C]`, row `i * times + j` copies row `i`.
    RepeatRows { x: usize, times: usize },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    SumAll(usize),
    MeanAll(usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    /// Softmax over the trailing axis.
    Softmax(usize),
    /// Normalization over the trailing axis, no affine part.
    LayerNorm { x: usize, eps: S },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    Bilinear {
        vol: usize,
        x: usize,
        y: usize,
    },
    StSample {
        positions: usize,
        offsets: usize,
        alpha: usize,
        values: Vec<usize>,
        spec: Box<SampleSpec>,
    },
}

impl<S> Op<S> {
    fn parents(&self, out: &mut Vec<usize>) {
        out.clear();
        match self {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MulRow(a, b) => {
                out.extend([*a, *b]);
            }
            Op::Neg(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Abs(a)
            | Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::ClampMin(a, _)
            | Op::Reshape(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::Softmax(a) => out.push(*a),
            Op::Narrow { x, .. } | Op::LayerNorm { x, .. } | Op::RepeatRows { x, .. } => {
                out.push(*x)
            }
            Op::Transpose(a) => out.push(*a),
            Op::Concat { parts, .. } => out.extend_from_slice(parts),
            Op::Linear { x, w, b } | Op::Conv2d { x, w, b, .. } => {
                out.extend([*x, *w]);
                if let Some(b) = b {
                    out.push(*b);
                }
            }
            Op::Bilinear { vol, x, y } => out.extend([*vol, *x, *y]),
            Op::StSample {
                positions,
                offsets,
                alpha,
                values,
                ..
            } => {
                out.extend([*positions, *offsets, *alpha]);
                out.extend_from_slice(values);
            }
        }
    }
}

/// Recording graph. Owns all tensors of one forward (and backward) pass.
pub struct Tape<S> {
    pub(crate) nodes: Vec<Tensor<S>>,
    pub(crate) grads: Vec<Option<Vec<S>>>,
    scratch_parents: Vec<usize>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            scratch_parents: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tracked input: participates in backward.
    pub fn leaf(&mut self, shape: &[usize], values: Vec<S>) -> Result<TensorRef> {
        self.insert("leaf", shape.to_vec(), values, Op::Leaf, true)
    }

    /// Untracked input: constants, targets, masks.
    pub fn constant(&mut self, shape: &[usize], values: Vec<S>) -> Result<TensorRef> {
        self.insert("constant", shape.to_vec(), values, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: S) -> TensorRef {
        self.insert("scalar", vec![], vec![v], Op::Leaf, false)
            .expect("scalar constant")
    }

    pub fn zeros(&mut self, shape: &[usize]) -> TensorRef {
        self.constant(shape, vec![S::zero(); numel(shape)])
            .expect("zeros")
    }

    pub fn tensor(&self, t: TensorRef) -> &Tensor<S> {
        &self.nodes[t.0]
    }

    pub fn shape(&self, t: TensorRef) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn values(&self, t: TensorRef) -> &[S] {
        &self.nodes[t.0].values
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn value(&self, t: TensorRef) -> S {
        debug_assert_eq!(self.nodes[t.0].values.len(), 1);
        self.nodes[t.0].values[0]
    }

    /// Accumulated gradient of `t`, if backward reached it.
    pub fn grad(&self, t: TensorRef) -> Option<&[S]> {
        self.grads.get(t.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub(crate) fn insert(
        &mut self,
        opname: &'static str,
        shape: Vec<usize>,
        values: Vec<S>,
        op: Op<S>,
        leaf_requires_grad: bool,
    ) -> Result<TensorRef> {
        debug_assert_eq!(numel(&shape), values.len(), "{opname}: shape/value length");
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: opname });
        }
        let requires_grad = match op {
            Op::Leaf => leaf_requires_grad,
            ref op => {
                op.parents(&mut self.scratch_parents);
                let ps = std::mem::take(&mut self.scratch_parents);
                let any = ps.iter().any(|&p| self.nodes[p].requires_grad);
                self.scratch_parents = ps;
                any
            }
        };
        let id = self.nodes.len();
        self.nodes.push(Tensor {
            shape,
            values,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Ok(TensorRef(id))
    }

    /// Reverse sweep from a scalar output. Gradients accumulate into the tape
    /// (call [`Tape::zero_grad`] between passes to reset).
    pub fn backward(&mut self, out: TensorRef) -> Result<()> {
        if self.nodes[out.0].values.len() != 1 {
            return Err(TensorError::NonScalarOutput(self.nodes[out.0].shape.clone()));
        }
        if !self.nodes[out.0].requires_grad {
            return Ok(());
        }
        self.grads.resize_with(self.nodes.len(), || None);
        // Interior grads are scratch for this sweep; only leaves accumulate
        // across calls, so summing several losses into the same leaves works.
        for id in 0..self.nodes.len() {
            if !matches!(self.nodes[id].op, Op::Leaf) {
                self.grads[id] = None;
            }
        }
        match &mut self.grads[out.0] {
            Some(g) => g[0] += S::one(),
            slot => *slot = Some(vec![S::one()]),
        }
        for id in (0..=out.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = std::mem::take(&mut self.grads[id]) else {
                continue;
            };
            self.propagate(id, &g)?;
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    /// Mutable gradient buffer of `id` if it takes part in backward.
    pub(crate) fn gbuf<'g>(
        nodes: &[Tensor<S>],
        grads: &'g mut [Option<Vec<S>>],
        id: usize,
    ) -> Option<&'g mut [S]> {
        if !nodes[id].requires_grad {
            return None;
        }
        let n = nodes[id].values.len();
        Some(grads[id].get_or_insert_with(|| vec![S::zero(); n]))
    }

    fn propagate(&mut self, id: usize, g: &[S]) -> Result<()> {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = Self::gbuf(nodes, grads, *a) {
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += *s;
                    }
                }
                if let Some(gb) = Self::gbuf(nodes, grads, *b) {
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d += *s;
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = Self::gbuf(nodes, grads, *a) {
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += *s;
                    }
                }
                if let Some(gb) = Self::gbuf(nodes, grads, *b) {
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d -= *s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if let Some(ga) = Self::gbuf(nodes, grads, a) {
                    let bv = &nodes[b].values;
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = Self::gbuf(nodes, grads, b) {
                    let av = &nodes[a].values;
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRow(a, b) => {
                let (a, b) = (*a, *b);
                let c = nodes[b].values.len();
                if let Some(ga) = Self::gbuf(nodes, grads, a) {
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += *s;
                    }
                }
                if let Some(gb) = Self::gbuf(nodes, grads, b) {
                    for (i, s) in g.iter().enumerate() {
                        gb[i % c] += *s;
                    }
                }
            }
            Op::MulRow(a, b) => {
                let (a, b) = (*a, *b);
                let c = nodes[b].values.len();
                if let Some(ga) = Self::gbuf(nodes, grads, a) {
                    let bv = &nodes[b].values;
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i % c];
                    }
                }
                if let Some(gb) = Self::gbuf(nodes, grads, b) {
                    let av = &nodes[a].values;
                    for i in 0..g.len() {
                        gb[i % c] += g[i] * av[i];
                    }
                }
            }
            Op::Neg(a) => {
                if let Some(ga) = Self::gbuf(nodes, grads, *a) {
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d -= *s;
                    }
                }
            }
            Op::Relu(a) => {
                let a = *a;
                if let Some(ga) = Self::gbuf(nodes, grads, a) {
                    let xv = &nodes[a].values;
                    for i in 0..g.len() {
                        if xv[i] > S::zero() {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let a = *a;
                if let Some(ga) = Self::gbuf(nodes, grads, a) {
                    let yv = &nodes[id].values;
                    for i in 0..g.len() {
                        ga[i] += g[i] * yv[i] * (S::one() - yv[i]);
                    }
                }
            }
            Op::Exp(a) => {
                let a = *a;
                if let Some(ga) = Self::gbuf(nodes, grads, a) {
                    let yv = &nodes[id].values;
                    for i in 0..g.len() {
                        ga[i] += g[i] * yv[i];
                    }
                }
            }
            Op::Ln(a) => {
                let a = *a;
                if let Some(ga) = Self::gbuf(nodes, grads, a) {
                    let xv = &nodes[a].values;
                    for i in 0..g.len() {
                        ga[i] += g[i] / xv[i];
                    }
                }
            }
            Op::Abs(a) => {
                let a = *a;
                if let Some(ga) = Self::gbuf(nodes, grads, a) {
                    let xv = &nodes[a].values;
                    for i in 0..g.len() {
                        // Subgradient 0 at exactly 0.
                        if xv[i] > S::zero() {
                            ga[i] += g[i];
                        } else if xv[i] < S::zero() {
                            ga[i] -= g[i];
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                if let Some(ga) = Self::gbuf(nodes, grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * c;
                    }
                }
            }
            Op::AddConst(a) => {
                if let Some(ga) = Self::gbuf(nodes, grads, *a) {
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += *s;
                    }
                }
            }
            Op::ClampMin(a, min) => {
                let (a, min) = (*a, *min);
                if let Some(ga) = Self::gbuf(nodes, grads, a) {
                    let xv = &nodes[a].values;
                    for i in 0..g.len() {
                        if xv[i] > min {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = Self::gbuf(nodes, grads, *a) {
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += *s;
                    }
                }
            }
            Op::Narrow { x, axis, start } => {
                elementwise::narrow_backward(nodes, grads, id, *x, *axis, *start, g);
            }
            Op::Transpose(a) => {
                let a = *a;
                let (r, c) = (nodes[a].shape[0], nodes[a].shape[1]);
                if let Some(ga) = Self::gbuf(nodes, grads, a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::RepeatRows { x, times } => {
                let (x, times) = (*x, *times);
                let c = nodes[x].shape[1];
                if let Some(ga) = Self::gbuf(nodes, grads, x) {
                    for (rep, chunk) in g.chunks_exact(c).enumerate() {
                        let i = rep / times;
                        for (d, s) in ga[i * c..(i + 1) * c].iter_mut().zip(chunk) {
                            *d += *s;
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                elementwise::concat_backward(nodes, grads, id, parts, *axis, g);
            }
            Op::SumAll(a) => {
                if let Some(ga) = Self::gbuf(nodes, grads, *a) {
                    for d in ga.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::MeanAll(a) => {
                let a = *a;
                if let Some(ga) = Self::gbuf(nodes, grads, a) {
                    let s = g[0] / S::c(nodes[a].values.len() as f64);
                    for d in ga.iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                linalg::linear_backward(nodes, grads, *x, *w, *b, g);
            }
            Op::Softmax(a) => {
                linalg::softmax_backward(nodes, grads, id, *a, g);
            }
            Op::LayerNorm { x, eps } => {
                let (x, eps) = (*x, *eps);
                linalg::layer_norm_backward(nodes, grads, x, eps, g);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                linalg::conv2d_backward(nodes, grads, id, x, w, b, stride, pad, g);
            }
            Op::Bilinear { vol, x, y } => {
                sample::bilinear_backward(nodes, grads, *vol, *x, *y, g);
            }
            Op::StSample {
                positions,
                offsets,
                alpha,
                values,
                spec,
            } => {
                sample::st_sample_backward(nodes, grads, *positions, *offsets, *alpha, values, spec, g);
            }
        }
        Ok(())
    }
}
