//! Pointwise ops, broadcasts, shape surgery and full reductions.

use super::{numel, Op, Result, Tape, Tensor, TensorError, TensorRef};
use crate::scalar::Scalar;

/// Split a shape at `axis` into (outer, len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<S: Scalar> Tape<S> {
    fn same_shape(&self, op: &'static str, a: TensorRef, b: TensorRef) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    fn zip(
        &mut self,
        op: &'static str,
        a: TensorRef,
        b: TensorRef,
        f: impl Fn(S, S) -> S,
        node: Op<S>,
    ) -> Result<TensorRef> {
        self.same_shape(op, a, b)?;
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.insert(op, self.nodes[a.0].shape.clone(), values, node, false)
    }

    fn map(
        &mut self,
        op: &'static str,
        a: TensorRef,
        f: impl Fn(S) -> S,
        node: Op<S>,
    ) -> Result<TensorRef> {
        let values = self.nodes[a.0].values.iter().map(|&x| f(x)).collect();
        self.insert(op, self.nodes[a.0].shape.clone(), values, node, false)
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    fn row_broadcast(
        &self,
        op: &'static str,
        a: TensorRef,
        b: TensorRef,
    ) -> Result<()> {
        let ashape = &self.nodes[a.0].shape;
        let bshape = &self.nodes[b.0].shape;
        let ok = bshape.len() == 1 && ashape.last() == Some(&bshape[0]);
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: ashape.clone(),
                rhs: bshape.clone(),
            });
        }
        Ok(())
    }

    /// `a[.., c] + b[c]`.
    pub fn add_row(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.row_broadcast("add_row", a, b)?;
        let c = self.nodes[b.0].values.len();
        let bv = &self.nodes[b.0].values;
        let values = self.nodes[a.0]
            .values
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % c])
            .collect();
        self.insert(
            "add_row",
            self.nodes[a.0].shape.clone(),
            values,
            Op::AddRow(a.0, b.0),
            false,
        )
    }

    /// `a[.., c] * b[c]`.
    pub fn mul_row(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.row_broadcast("mul_row", a, b)?;
        let c = self.nodes[b.0].values.len();
        let bv = &self.nodes[b.0].values;
        let values = self.nodes[a.0]
            .values
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bv[i % c])
            .collect();
        self.insert(
            "mul_row",
            self.nodes[a.0].shape.clone(),
            values,
            Op::MulRow(a.0, b.0),
            false,
        )
    }

    pub fn neg(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.map("neg", a, |x| -x, Op::Neg(a.0))
    }

    pub fn relu(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.map("relu", a, |x| x.max(S::zero()), Op::Relu(a.0))
    }

    pub fn sigmoid(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.map(
            "sigmoid",
            a,
            |x| {
                if x >= S::zero() {
                    S::one() / (S::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (S::one() + e)
                }
            },
            Op::Sigmoid(a.0),
        )
    }

    pub fn exp(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.map("exp", a, |x| x.exp(), Op::Exp(a.0))
    }

    /// Natural log. Non-positive inputs surface as a non-finite error.
    pub fn ln(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.map("ln", a, |x| x.ln(), Op::Ln(a.0))
    }

    pub fn abs(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.map("abs", a, |x| x.abs(), Op::Abs(a.0))
    }

    pub fn scale(&mut self, a: TensorRef, c: S) -> Result<TensorRef> {
        self.map("scale", a, |x| x * c, Op::Scale(a.0, c))
    }

    pub fn add_const(&mut self, a: TensorRef, c: S) -> Result<TensorRef> {
        self.map("add_const", a, |x| x + c, Op::AddConst(a.0))
    }

    /// max(a, min) with zero gradient in the clamped region.
    pub fn clamp_min(&mut self, a: TensorRef, min: S) -> Result<TensorRef> {
        self.map("clamp_min", a, |x| x.max(min), Op::ClampMin(a.0, min))
    }

    pub fn reshape(&mut self, a: TensorRef, shape: &[usize]) -> Result<TensorRef> {
        if numel(shape) != self.nodes[a.0].values.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let values = self.nodes[a.0].values.clone();
        self.insert("reshape", shape.to_vec(), values, Op::Reshape(a.0), false)
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: TensorRef, axis: usize, start: usize, len: usize) -> Result<TensorRef> {
        let shape = &self.nodes[a.0].shape;
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!("axis {axis} range {start}..{} of {shape:?}", start + len),
            });
        }
        let (outer, alen, inner) = axis_split(shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let src = &self.nodes[a.0].values;
        let mut values = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            values.extend_from_slice(&src[base..base + len * inner]);
        }
        self.insert(
            "narrow",
            out_shape,
            values,
            Op::Narrow {
                x: a.0,
                axis,
                start,
            },
            false,
        )
    }

    pub fn transpose(&mut self, a: TensorRef) -> Result<TensorRef> {
        let shape = &self.nodes[a.0].shape;
        if shape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("need a matrix, got {shape:?}"),
            });
        }
        let (r, c) = (shape[0], shape[1]);
        let src = &self.nodes[a.0].values;
        let mut values = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                values[j * r + i] = src[i * c + j];
            }
        }
        self.insert("transpose", vec![c, r], values, Op::Transpose(a.0), false)
    }

    /// Tile each row `times` times in place: `[R, C] -> [R * times, C]` with
    /// output row `i * times + j` equal to input row `i`.
    pub fn repeat_rows(&mut self, a: TensorRef, times: usize) -> Result<TensorRef> {
        let shape = &self.nodes[a.0].shape;
        if shape.len() != 2 || times == 0 {
            return Err(TensorError::Invalid {
                op: "repeat_rows",
                msg: format!("matrix x positive count, got {shape:?} x {times}"),
            });
        }
        let (r, c) = (shape[0], shape[1]);
        let src = &self.nodes[a.0].values;
        let mut values = Vec::with_capacity(r * times * c);
        for i in 0..r {
            for _ in 0..times {
                values.extend_from_slice(&src[i * c..(i + 1) * c]);
            }
        }
        self.insert(
            "repeat_rows",
            vec![r * times, c],
            values,
            Op::RepeatRows { x: a.0, times },
            false,
        )
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, axis: usize, parts: &[TensorRef]) -> Result<TensorRef> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: "no parts".into(),
            });
        }
        let first = self.nodes[parts[0].0].shape.clone();
        if axis >= first.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} of {first:?}"),
            });
        }
        let mut total = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut values = vec![S::zero(); outer * total * inner];
        let mut at = 0;
        for p in parts {
            let len = self.nodes[p.0].shape[axis];
            let src = &self.nodes[p.0].values;
            for o in 0..outer {
                let dst = (o * total + at) * inner;
                let sbase = o * len * inner;
                values[dst..dst + len * inner].copy_from_slice(&src[sbase..sbase + len * inner]);
            }
            at += len;
        }
        self.insert(
            "concat",
            out_shape,
            values,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
            false,
        )
    }

    pub fn sum_all(&mut self, a: TensorRef) -> Result<TensorRef> {
        let mut acc = S::zero();
        for &v in &self.nodes[a.0].values {
            acc += v;
        }
        self.insert("sum_all", vec![], vec![acc], Op::SumAll(a.0), false)
    }

    pub fn mean_all(&mut self, a: TensorRef) -> Result<TensorRef> {
        let n = self.nodes[a.0].values.len();
        if n == 0 {
            return Err(TensorError::Invalid {
                op: "mean_all",
                msg: "empty tensor".into(),
            });
        }
        let mut acc = S::zero();
        for &v in &self.nodes[a.0].values {
            acc += v;
        }
        self.insert(
            "mean_all",
            vec![],
            vec![acc / S::c(n as f64)],
            Op::MeanAll(a.0),
            false,
        )
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let d = self.sub(a, b)?;
        let d = self.abs(d)?;
        self.mean_all(d)
    }

    /// Mean squared difference.
    pub fn l2_loss(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let d = self.sub(a, b)?;
        let d = self.mul(d, d)?;
        self.mean_all(d)
    }
}

pub(super) fn narrow_backward<S: Scalar>(
    nodes: &[Tensor<S>],
    grads: &mut [Option<Vec<S>>],
    id: usize,
    x: usize,
    axis: usize,
    start: usize,
    g: &[S],
) {
    let Some(gx) = Tape::gbuf(nodes, grads, x) else {
        return;
    };
    let (outer, alen, inner) = axis_split(&nodes[x].shape, axis);
    let len = nodes[id].shape[axis];
    for o in 0..outer {
        let dst = (o * alen + start) * inner;
        let src = o * len * inner;
        for i in 0..len * inner {
            gx[dst + i] += g[src + i];
        }
    }
}

pub(super) fn concat_backward<S: Scalar>(
    nodes: &[Tensor<S>],
    grads: &mut [Option<Vec<S>>],
    id: usize,
    parts: &[usize],
    axis: usize,
    g: &[S],
) {
    let (outer, total, inner) = axis_split(&nodes[id].shape, axis);
    let mut at = 0;
    for &p in parts {
        let len = nodes[p].shape[axis];
        if let Some(gp) = Tape::gbuf(nodes, grads, p) {
            for o in 0..outer {
                let src = (o * total + at) * inner;
                let dst = o * len * inner;
                for i in 0..len * inner {
                    gp[dst + i] += g[src + i];
                }
            }
        }
        at += len;
    }
}
