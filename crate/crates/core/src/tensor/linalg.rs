//! Dense layers: linear maps, softmax, layer normalization, 2D convolution.

use super::{Op, Result, Tape, Tensor, TensorError, TensorRef};
use crate::scalar::Scalar;

fn rows_of<S: Scalar>(t: &Tensor<S>, width: usize) -> usize {
    debug_assert_eq!(t.values.len() % width, 0);
    t.values.len() / width
}

impl<S: Scalar> Tape<S> {
    /// `x[.., c_in] * w[c_out, c_in]^T + b[c_out]`. Leading dims pass through.
    pub fn linear(&mut self, x: TensorRef, w: TensorRef, b: Option<TensorRef>) -> Result<TensorRef> {
        let wshape = &self.nodes[w.0].shape;
        let xshape = &self.nodes[x.0].shape;
        if wshape.len() != 2 || xshape.is_empty() || *xshape.last().unwrap() != wshape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: xshape.clone(),
                rhs: wshape.clone(),
            });
        }
        let (c_out, c_in) = (wshape[0], wshape[1]);
        if let Some(b) = b {
            if self.nodes[b.0].shape != [c_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear",
                    lhs: vec![c_out],
                    rhs: self.nodes[b.0].shape.clone(),
                });
            }
        }
        let rows = rows_of(&self.nodes[x.0], c_in);
        let xv = &self.nodes[x.0].values;
        let wv = &self.nodes[w.0].values;
        let bv = b.map(|b| self.nodes[b.0].values.as_slice());
        let mut values = vec![S::zero(); rows * c_out];
        for r in 0..rows {
            let xr = &xv[r * c_in..(r + 1) * c_in];
            let out = &mut values[r * c_out..(r + 1) * c_out];
            for (o, slot) in out.iter_mut().enumerate() {
                let wr = &wv[o * c_in..(o + 1) * c_in];
                let mut acc = S::zero();
                for i in 0..c_in {
                    acc += xr[i] * wr[i];
                }
                *slot = acc;
            }
            if let Some(bv) = bv {
                for (slot, &bias) in out.iter_mut().zip(bv) {
                    *slot += bias;
                }
            }
        }
        let mut out_shape = self.nodes[x.0].shape.clone();
        *out_shape.last_mut().unwrap() = c_out;
        self.insert(
            "linear",
            out_shape,
            values,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
            false,
        )
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: TensorRef) -> Result<TensorRef> {
        let shape = self.nodes[x.0].shape.clone();
        let width = *shape.last().ok_or_else(|| TensorError::Invalid {
            op: "softmax",
            msg: "rank-0 input".into(),
        })?;
        let rows = rows_of(&self.nodes[x.0], width);
        let xv = &self.nodes[x.0].values;
        let mut values = vec![S::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * width..(r + 1) * width];
            let out = &mut values[r * width..(r + 1) * width];
            let mut max = row[0];
            for &v in row.iter() {
                max = max.max(v);
            }
            let mut sum = S::zero();
            for i in 0..width {
                let e = (row[i] - max).exp();
                out[i] = e;
                sum += e;
            }
            for v in out.iter_mut() {
                *v = *v / sum;
            }
        }
        self.insert("softmax", shape, values, Op::Softmax(x.0), false)
    }

    /// Zero-mean unit-variance normalization over the trailing axis. Affine
    /// gain/bias, when wanted, are separate `mul_row`/`add_row` ops.
    pub fn layer_norm(&mut self, x: TensorRef, eps: S) -> Result<TensorRef> {
        let shape = self.nodes[x.0].shape.clone();
        let width = *shape.last().ok_or_else(|| TensorError::Invalid {
            op: "layer_norm",
            msg: "rank-0 input".into(),
        })?;
        let rows = rows_of(&self.nodes[x.0], width);
        let xv = &self.nodes[x.0].values;
        let inv_w = S::one() / S::c(width as f64);
        let mut values = vec![S::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * width..(r + 1) * width];
            let mut mean = S::zero();
            for &v in row {
                mean += v;
            }
            mean *= inv_w;
            let mut var = S::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_w;
            let rstd = S::one() / (var + eps).sqrt();
            let out = &mut values[r * width..(r + 1) * width];
            for i in 0..width {
                out[i] = (row[i] - mean) * rstd;
            }
        }
        self.insert("layer_norm", shape, values, Op::LayerNorm { x: x.0, eps }, false)
    }

    /// 2D convolution applied per leading frame. `x[t, h, w, c_in]`,
    /// `w[kh, kw, c_in, c_out]`, zero padding.
    pub fn conv2d(
        &mut self,
        x: TensorRef,
        w: TensorRef,
        b: Option<TensorRef>,
        stride: usize,
        pad: usize,
    ) -> Result<TensorRef> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 4 || ws.len() != 4 || xs[3] != ws[2] || stride == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        let (t, h, wd, c_in) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw, _, c_out) = (ws[0], ws[1], ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("kernel {kh}x{kw} larger than padded input {h}x{wd}"),
            });
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let xv = &self.nodes[x.0].values;
        let wv = &self.nodes[w.0].values;
        let bv = b.map(|b| self.nodes[b.0].values.as_slice());
        let mut values = vec![S::zero(); t * ho * wo * c_out];
        for ft in 0..t {
            for oy in 0..ho {
                for ox in 0..wo {
                    let out = &mut values[((ft * ho + oy) * wo + ox) * c_out..][..c_out];
                    if let Some(bv) = bv {
                        out.copy_from_slice(bv);
                    }
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let xrow = &xv[((ft * h + iy as usize) * wd + ix as usize) * c_in..][..c_in];
                            let wmat = &wv[(ky * kw + kx) * c_in * c_out..][..c_in * c_out];
                            for ci in 0..c_in {
                                let xc = xrow[ci];
                                let wrow = &wmat[ci * c_out..(ci + 1) * c_out];
                                for co in 0..c_out {
                                    out[co] += xc * wrow[co];
                                }
                            }
                        }
                    }
                }
            }
        }
        self.insert(
            "conv2d",
            vec![t, ho, wo, c_out],
            values,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                stride,
                pad,
            },
            false,
        )
    }
}

pub(super) fn linear_backward<S: Scalar>(
    nodes: &[Tensor<S>],
    grads: &mut [Option<Vec<S>>],
    x: usize,
    w: usize,
    b: Option<usize>,
    g: &[S],
) {
    let (c_out, c_in) = (nodes[w].shape[0], nodes[w].shape[1]);
    let rows = nodes[x].values.len() / c_in;
    let wv = &nodes[w].values;
    let xv = &nodes[x].values;
    if let Some(gx) = Tape::gbuf(nodes, grads, x) {
        for r in 0..rows {
            let grow = &g[r * c_out..(r + 1) * c_out];
            let gxr = &mut gx[r * c_in..(r + 1) * c_in];
            for o in 0..c_out {
                let go = grow[o];
                if go == S::zero() {
                    continue;
                }
                let wr = &wv[o * c_in..(o + 1) * c_in];
                for i in 0..c_in {
                    gxr[i] += go * wr[i];
                }
            }
        }
    }
    if let Some(gw) = Tape::gbuf(nodes, grads, w) {
        for r in 0..rows {
            let grow = &g[r * c_out..(r + 1) * c_out];
            let xr = &xv[r * c_in..(r + 1) * c_in];
            for o in 0..c_out {
                let go = grow[o];
                if go == S::zero() {
                    continue;
                }
                let gwr = &mut gw[o * c_in..(o + 1) * c_in];
                for i in 0..c_in {
                    gwr[i] += go * xr[i];
                }
            }
        }
    }
    if let Some(b) = b {
        if let Some(gb) = Tape::gbuf(nodes, grads, b) {
            for r in 0..rows {
                let grow = &g[r * c_out..(r + 1) * c_out];
                for o in 0..c_out {
                    gb[o] += grow[o];
                }
            }
        }
    }
}

pub(super) fn softmax_backward<S: Scalar>(
    nodes: &[Tensor<S>],
    grads: &mut [Option<Vec<S>>],
    id: usize,
    x: usize,
    g: &[S],
) {
    let width = *nodes[id].shape.last().unwrap();
    let rows = nodes[id].values.len() / width;
    let yv = &nodes[id].values;
    if let Some(gx) = Tape::gbuf(nodes, grads, x) {
        for r in 0..rows {
            let y = &yv[r * width..(r + 1) * width];
            let gr = &g[r * width..(r + 1) * width];
            let mut dot = S::zero();
            for i in 0..width {
                dot += y[i] * gr[i];
            }
            let gxr = &mut gx[r * width..(r + 1) * width];
            for i in 0..width {
                gxr[i] += y[i] * (gr[i] - dot);
            }
        }
    }
}

pub(super) fn layer_norm_backward<S: Scalar>(
    nodes: &[Tensor<S>],
    grads: &mut [Option<Vec<S>>],
    x: usize,
    eps: S,
    g: &[S],
) {
    let width = *nodes[x].shape.last().unwrap();
    let rows = nodes[x].values.len() / width;
    let xv = &nodes[x].values;
    let inv_w = S::one() / S::c(width as f64);
    if let Some(gx) = Tape::gbuf(nodes, grads, x) {
        for r in 0..rows {
            let row = &xv[r * width..(r + 1) * width];
            let mut mean = S::zero();
            for &v in row {
                mean += v;
            }
            mean *= inv_w;
            let mut var = S::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_w;
            let rstd = S::one() / (var + eps).sqrt();
            let gr = &g[r * width..(r + 1) * width];
            let mut gmean = S::zero();
            let mut gdot = S::zero();
            for i in 0..width {
                let yhat = (row[i] - mean) * rstd;
                gmean += gr[i];
                gdot += gr[i] * yhat;
            }
            gmean *= inv_w;
            gdot *= inv_w;
            let gxr = &mut gx[r * width..(r + 1) * width];
            for i in 0..width {
                let yhat = (row[i] - mean) * rstd;
                gxr[i] += rstd * (gr[i] - gmean - yhat * gdot);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn conv2d_backward<S: Scalar>(
    nodes: &[Tensor<S>],
    grads: &mut [Option<Vec<S>>],
    id: usize,
    x: usize,
    w: usize,
    b: Option<usize>,
    stride: usize,
    pad: usize,
    g: &[S],
) {
    let xs = &nodes[x].shape;
    let ws = &nodes[w].shape;
    let os = &nodes[id].shape;
    let (t, h, wd, c_in) = (xs[0], xs[1], xs[2], xs[3]);
    let (kh, kw, _, c_out) = (ws[0], ws[1], ws[2], ws[3]);
    let (ho, wo) = (os[1], os[2]);
    let xv = &nodes[x].values;
    let wv = &nodes[w].values;

    let want_x = nodes[x].requires_grad;
    let want_w = nodes[w].requires_grad;
    // dx and dw share the same loop structure; two buffers are taken out of
    // the grad table up front to keep a single pass over g.
    let mut gx_local = if want_x { grads[x].take().or_else(|| Some(vec![S::zero(); xv.len()])) } else { None };
    let mut gw_local = if want_w { grads[w].take().or_else(|| Some(vec![S::zero(); wv.len()])) } else { None };

    for ft in 0..t {
        for oy in 0..ho {
            for ox in 0..wo {
                let grow = &g[((ft * ho + oy) * wo + ox) * c_out..][..c_out];
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xoff = ((ft * h + iy as usize) * wd + ix as usize) * c_in;
                        let woff = (ky * kw + kx) * c_in * c_out;
                        if let Some(gx) = gx_local.as_deref_mut() {
                            for ci in 0..c_in {
                                let wrow = &wv[woff + ci * c_out..][..c_out];
                                let mut acc = S::zero();
                                for co in 0..c_out {
                                    acc += wrow[co] * grow[co];
                                }
                                gx[xoff + ci] += acc;
                            }
                        }
                        if let Some(gw) = gw_local.as_deref_mut() {
                            for ci in 0..c_in {
                                let xc = xv[xoff + ci];
                                if xc == S::zero() {
                                    continue;
                                }
                                let gwrow = &mut gw[woff + ci * c_out..][..c_out];
                                for co in 0..c_out {
                                    gwrow[co] += xc * grow[co];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if want_x {
        grads[x] = gx_local;
    }
    if want_w {
        grads[w] = gw_local;
    }
    if let Some(b) = b {
        if let Some(gb) = Tape::gbuf(nodes, grads, b) {
            for row in 0..t * ho * wo {
                let grow = &g[row * c_out..(row + 1) * c_out];
                for co in 0..c_out {
                    gb[co] += grow[co];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::Tape;

    #[test]
    fn linear_matches_hand_matmul() {
        let mut tape: Tape<f64> = Tape::new();
        // x: 2x3, w: 2x3 (c_out=2, c_in=3), b: 2
        let x = tape.leaf(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = tape.leaf(&[2, 3], vec![1.0, 0.0, -1.0, 0.5, 0.5, 0.5]).unwrap();
        let b = tape.leaf(&[2], vec![10.0, -10.0]).unwrap();
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.shape(y), &[2, 2]);
        // row0: [1-3+10, 0.5*(1+2+3)-10] = [8, -7]; row1: [4-6+10, 7.5-10]
        assert_eq!(tape.values(y), &[8.0, -7.0, 8.0, -2.5]);
    }

    #[test]
    fn linear_keeps_leading_dims() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&[2, 2, 3], vec![0.5; 12]).unwrap();
        let w = tape.leaf(&[4, 3], vec![1.0; 12]).unwrap();
        let y = tape.linear(x, w, None).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 4]);
        assert!(tape.values(y).iter().all(|&v| (v - 1.5).abs() < 1e-15));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape
            .leaf(&[3, 4], vec![
                0.1, -2.0, 3.5, 0.0, //
                10.0, 10.0, 10.0, 10.0, //
                -1e30, 5.0, 4.0, -1e30,
            ])
            .unwrap();
        let y = tape.softmax(x).unwrap();
        let v = tape.values(y);
        for r in 0..3 {
            let s: f64 = v[r * 4..(r + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {r} sums to {s}");
        }
        // The -1e30 masked entries underflow to exactly zero weight.
        assert_eq!(v[8], 0.0);
        assert_eq!(v[11], 0.0);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&[2, 4], vec![3.0; 8]).unwrap();
        let y = tape.layer_norm(x, 1e-5).unwrap();
        assert!(tape.values(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = tape.layer_norm(x, 0.0).unwrap();
        let v = tape.values(y);
        let mean: f64 = v.iter().sum::<f64>() / 4.0;
        let var: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn conv2d_identity_kernel_passes_through() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&[1, 3, 3, 1], (1..=9).map(f64::from).collect()).unwrap();
        // 1x1 kernel, single channel, weight 1: output equals input.
        let w = tape.leaf(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 3, 1]);
        assert_eq!(tape.values(y), tape.values(x));
    }

    #[test]
    fn conv2d_stride_and_padding_shapes() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&[2, 8, 8, 3], vec![0.1; 2 * 8 * 8 * 3]).unwrap();
        let w = tape.leaf(&[3, 3, 3, 5], vec![0.01; 3 * 3 * 3 * 5]).unwrap();
        let b = tape.leaf(&[5], vec![1.0; 5]).unwrap();
        let y = tape.conv2d(x, w, Some(b), 2, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 4, 4, 5]);
    }

    #[test]
    fn conv2d_sums_receptive_field() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&[1, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = tape.leaf(&[2, 2, 1, 1], vec![1.0; 4]).unwrap();
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.values(y), &[10.0]);
    }
}
