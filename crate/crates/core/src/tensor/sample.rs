//! Differentiable sampling on feature grids.
//!
//! [`Tape::bilinear_sample`] is the single-point primitive; [`Tape::st_sample`]
//! is the fused kernel behind deformable attention: every query row gathers a
//! weighted set of bilinear samples from multi-scale, multi-frame value
//! volumes. Coordinates are normalized to [0, 1] per axis (grid node `i` of an
//! extent-`n` axis sits at `i / (n - 1)`); out-of-range coordinates clamp to
//! the border and receive zero coordinate gradient there.

use super::{Op, Result, Tape, Tensor, TensorError, TensorRef};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct SampleGrid {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Frame slots cover the query frame and its immediate neighbors:
    /// slot `s` reads frame `t_q + s - 1`. Slots outside the snippet are
    /// inactive.
    Neighbor,
    /// Frame slots are the absolute snippet frames `0..T`.
    Full,
    /// One slot whose frame coordinate is `t_q` plus a regressed fractional
    /// offset, interpolated linearly between the two enclosing frames.
    Fractional,
}

/// Static layout of one fused sampling op.
///
/// Offsets and weights are laid out per row as `[heads][slots][scale][k]`
/// with 2 trailing offset components (3 in fractional mode: x, y, frame).
/// A (head, slot) pair is active when the slot maps to a real frame and the
/// head's quota covers the slot's frame distance: heads are halved per frame
/// of distance from the query frame, never below one.
#[derive(Clone, Debug)]
pub struct SampleSpec {
    pub heads: usize,
    pub head_dim: usize,
    pub grids: Vec<SampleGrid>,
    pub k_points: usize,
    pub slots: usize,
    pub mode: SampleMode,
    /// Query frame per row, already clamped into the observed range.
    pub row_frames: Vec<u32>,
}

impl SampleSpec {
    pub fn channels(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Offset components per sample point.
    pub fn comp(&self) -> usize {
        match self.mode {
            SampleMode::Fractional => 3,
            _ => 2,
        }
    }

    /// Weight entries per row: heads * slots * scales * k.
    pub fn entries(&self) -> usize {
        self.heads * self.slots * self.grids.len() * self.k_points
    }

    pub fn t_len(&self) -> usize {
        self.grids[0].t
    }

    /// Heads allotted to a frame at the given distance from the query frame.
    pub fn head_quota(&self, dist: usize) -> usize {
        if dist >= usize::BITS as usize {
            return 1;
        }
        (self.heads >> dist).max(1)
    }

    /// Frame index read by `slot` for a query at `t_q`, or None when the slot
    /// falls outside the snippet.
    pub fn slot_frame(&self, t_q: usize, slot: usize) -> Option<usize> {
        match self.mode {
            SampleMode::Neighbor => {
                let f = t_q as isize + slot as isize - 1;
                (f >= 0 && (f as usize) < self.t_len()).then_some(f as usize)
            }
            SampleMode::Full => Some(slot),
            SampleMode::Fractional => Some(t_q),
        }
    }

    /// Whether head `h` samples `slot` for a query at `t_q`.
    pub fn active(&self, h: usize, t_q: usize, slot: usize) -> bool {
        match self.mode {
            SampleMode::Fractional => true,
            _ => match self.slot_frame(t_q, slot) {
                Some(f) => h < self.head_quota(f.abs_diff(t_q)),
                None => false,
            },
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = !self.grids.is_empty()
            && self.heads > 0
            && self.head_dim > 0
            && self.k_points > 0
            && self.slots > 0
            && self.grids.iter().all(|g| g.t == self.t_len() && g.t > 0 && g.h > 0 && g.w > 0)
            && self.row_frames.iter().all(|&f| (f as usize) < self.t_len())
            && (self.mode != SampleMode::Fractional || self.slots == 1);
        if ok {
            Ok(())
        } else {
            Err(TensorError::Invalid {
                op: "st_sample",
                msg: "inconsistent sample spec".into(),
            })
        }
    }
}

/// Clamp a normalized coordinate and scale it onto a grid axis.
/// Returns (low index, high index, fraction, interior flag).
#[inline]
fn grid_coord<S: Scalar>(norm: S, extent: usize) -> (usize, usize, S, bool) {
    let interior = norm > S::zero() && norm < S::one();
    let clamped = norm.max(S::zero()).min(S::one());
    let u = clamped * S::c((extent - 1) as f64);
    let i0 = u.floor();
    let mut lo = i0.to_usize().unwrap_or(0);
    if lo >= extent {
        lo = extent - 1;
    }
    let hi = (lo + 1).min(extent - 1);
    let frac = u - S::c(lo as f64);
    (lo, hi, frac, interior)
}

impl<S: Scalar> Tape<S> {
    /// Bilinear lookup of every channel of `vol[c, h, w]` at the normalized
    /// point (`x`, `y`), both rank-0 tensors. Differentiable in the volume and
    /// in the coordinates.
    pub fn bilinear_sample(&mut self, vol: TensorRef, x: TensorRef, y: TensorRef) -> Result<TensorRef> {
        let vs = &self.nodes[vol.0].shape;
        if vs.len() != 3 || self.nodes[x.0].values.len() != 1 || self.nodes[y.0].values.len() != 1 {
            return Err(TensorError::Invalid {
                op: "bilinear_sample",
                msg: format!("volume {vs:?} with scalar coordinates expected"),
            });
        }
        let (c, h, w) = (vs[0], vs[1], vs[2]);
        let xv = self.nodes[x.0].values[0];
        let yv = self.nodes[y.0].values[0];
        let (i0, i1, fx, _) = grid_coord(xv, w);
        let (j0, j1, fy, _) = grid_coord(yv, h);
        let vv = &self.nodes[vol.0].values;
        let one = S::one();
        let mut values = Vec::with_capacity(c);
        for ch in 0..c {
            let base = ch * h * w;
            let v00 = vv[base + j0 * w + i0];
            let v01 = vv[base + j0 * w + i1];
            let v10 = vv[base + j1 * w + i0];
            let v11 = vv[base + j1 * w + i1];
            values.push(
                (one - fy) * ((one - fx) * v00 + fx * v01) + fy * ((one - fx) * v10 + fx * v11),
            );
        }
        self.insert(
            "bilinear_sample",
            vec![c],
            values,
            Op::Bilinear {
                vol: vol.0,
                x: x.0,
                y: y.0,
            },
            false,
        )
    }

    /// Fused deformable sampling: for every query row, gather `alpha`-weighted
    /// bilinear samples at `positions + offsets` from per-scale value volumes
    /// (`values[l]` of shape `[t, h_l, w_l, c]`) and sum them per head.
    ///
    /// * `positions`: `[rows, 2]` normalized query points
    /// * `offsets`: `[rows, entries * comp]` normalized offsets
    /// * `alpha`: `[rows, entries]` sample weights (softmax output; inactive
    ///   entries must already carry zero weight)
    ///
    /// Output: `[rows, c]`, head blocks side by side.
    pub fn st_sample(
        &mut self,
        positions: TensorRef,
        offsets: TensorRef,
        alpha: TensorRef,
        values: &[TensorRef],
        spec: SampleSpec,
    ) -> Result<TensorRef> {
        spec.validate()?;
        let rows = spec.row_frames.len();
        let entries = spec.entries();
        let c = spec.channels();
        let shapes_ok = self.nodes[positions.0].shape == [rows, 2]
            && self.nodes[offsets.0].shape == [rows, entries * spec.comp()]
            && self.nodes[alpha.0].shape == [rows, entries]
            && values.len() == spec.grids.len()
            && values
                .iter()
                .zip(&spec.grids)
                .all(|(v, g)| self.nodes[v.0].shape == [g.t, g.h, g.w, c]);
        if !shapes_ok {
            return Err(TensorError::Invalid {
                op: "st_sample",
                msg: "operand shapes do not match the sample spec".into(),
            });
        }

        let mut out = vec![S::zero(); rows * c];
        {
            let nodes = &self.nodes;
            let pos = &nodes[positions.0].values;
            let off = &nodes[offsets.0].values;
            let alp = &nodes[alpha.0].values;
            let vols: Vec<&[S]> = values.iter().map(|v| nodes[v.0].values.as_slice()).collect();
            let comp = spec.comp();
            let n_scales = spec.grids.len();
            let one = S::one();
            for r in 0..rows {
                let t_q = spec.row_frames[r] as usize;
                let x = pos[r * 2];
                let y = pos[r * 2 + 1];
                let row_off = &off[r * entries * comp..(r + 1) * entries * comp];
                let row_alp = &alp[r * entries..(r + 1) * entries];
                for head in 0..spec.heads {
                    let block = &mut out[r * c + head * spec.head_dim..][..spec.head_dim];
                    for slot in 0..spec.slots {
                        if !spec.active(head, t_q, slot) {
                            continue;
                        }
                        let frame = spec.slot_frame(t_q, slot).unwrap();
                        for (l, grid) in spec.grids.iter().enumerate() {
                            for k in 0..spec.k_points {
                                let e = ((head * spec.slots + slot) * n_scales + l) * spec.k_points + k;
                                let a = row_alp[e];
                                let sx = x + row_off[e * comp];
                                let sy = y + row_off[e * comp + 1];
                                let (i0, i1, fx, _) = grid_coord(sx, grid.w);
                                let (j0, j1, fy, _) = grid_coord(sy, grid.h);
                                let hd = spec.head_dim;
                                let mut gather = |f: usize, weight: S| {
                                    let plane = &vols[l][((f * grid.h) * grid.w) * c..];
                                    let b00 = (j0 * grid.w + i0) * c + head * hd;
                                    let b01 = (j0 * grid.w + i1) * c + head * hd;
                                    let b10 = (j1 * grid.w + i0) * c + head * hd;
                                    let b11 = (j1 * grid.w + i1) * c + head * hd;
                                    let w00 = weight * (one - fy) * (one - fx);
                                    let w01 = weight * (one - fy) * fx;
                                    let w10 = weight * fy * (one - fx);
                                    let w11 = weight * fy * fx;
                                    for ch in 0..hd {
                                        block[ch] += w00 * plane[b00 + ch]
                                            + w01 * plane[b01 + ch]
                                            + w10 * plane[b10 + ch]
                                            + w11 * plane[b11 + ch];
                                    }
                                };
                                if spec.mode == SampleMode::Fractional {
                                    let tau = (S::c(t_q as f64) + row_off[e * comp + 2])
                                        .max(S::zero())
                                        .min(S::c((grid.t - 1) as f64));
                                    let f0 = tau.floor().to_usize().unwrap_or(0).min(grid.t - 1);
                                    let f1 = (f0 + 1).min(grid.t - 1);
                                    let ft = tau - S::c(f0 as f64);
                                    gather(f0, a * (one - ft));
                                    if f1 != f0 {
                                        gather(f1, a * ft);
                                    }
                                } else {
                                    gather(frame, a);
                                }
                            }
                        }
                    }
                }
            }
        }
        self.insert(
            "st_sample",
            vec![rows, c],
            out,
            Op::StSample {
                positions: positions.0,
                offsets: offsets.0,
                alpha: alpha.0,
                values: values.iter().map(|v| v.0).collect(),
                spec: Box::new(spec),
            },
            false,
        )
    }
}

pub(super) fn bilinear_backward<S: Scalar>(
    nodes: &[Tensor<S>],
    grads: &mut [Option<Vec<S>>],
    vol: usize,
    x: usize,
    y: usize,
    g: &[S],
) {
    let vs = &nodes[vol].shape;
    let (c, h, w) = (vs[0], vs[1], vs[2]);
    let xv = nodes[x].values[0];
    let yv = nodes[y].values[0];
    let (i0, i1, fx, in_x) = grid_coord(xv, w);
    let (j0, j1, fy, in_y) = grid_coord(yv, h);
    let one = S::one();
    if let Some(gv) = Tape::gbuf(nodes, grads, vol) {
        for ch in 0..c {
            let base = ch * h * w;
            let gc = g[ch];
            gv[base + j0 * w + i0] += gc * (one - fy) * (one - fx);
            gv[base + j0 * w + i1] += gc * (one - fy) * fx;
            gv[base + j1 * w + i0] += gc * fy * (one - fx);
            gv[base + j1 * w + i1] += gc * fy * fx;
        }
    }
    let vv = &nodes[vol].values;
    if nodes[x].requires_grad || nodes[y].requires_grad {
        let mut dx = S::zero();
        let mut dy = S::zero();
        for ch in 0..c {
            let base = ch * h * w;
            let v00 = vv[base + j0 * w + i0];
            let v01 = vv[base + j0 * w + i1];
            let v10 = vv[base + j1 * w + i0];
            let v11 = vv[base + j1 * w + i1];
            dx += g[ch] * ((one - fy) * (v01 - v00) + fy * (v11 - v10));
            dy += g[ch] * ((one - fx) * (v10 - v00) + fx * (v11 - v01));
        }
        if in_x {
            if let Some(gx) = Tape::gbuf(nodes, grads, x) {
                gx[0] += dx * S::c((w - 1) as f64);
            }
        }
        if in_y {
            if let Some(gy) = Tape::gbuf(nodes, grads, y) {
                gy[0] += dy * S::c((h - 1) as f64);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn st_sample_backward<S: Scalar>(
    nodes: &[Tensor<S>],
    grads: &mut [Option<Vec<S>>],
    positions: usize,
    offsets: usize,
    alpha: usize,
    values: &[usize],
    spec: &SampleSpec,
    g: &[S],
) {
    let rows = spec.row_frames.len();
    let entries = spec.entries();
    let comp = spec.comp();
    let c = spec.channels();
    let n_scales = spec.grids.len();
    let one = S::one();

    let pos = &nodes[positions].values;
    let off = &nodes[offsets].values;
    let alp = &nodes[alpha].values;
    let vols: Vec<&[S]> = values.iter().map(|&v| nodes[v].values.as_slice()).collect();

    // Take grad buffers out of the table so reads of node values and writes
    // of gradients can proceed together.
    let mut gval: Vec<Option<Vec<S>>> = values
        .iter()
        .map(|&v| {
            if nodes[v].requires_grad {
                Some(
                    grads[v]
                        .take()
                        .unwrap_or_else(|| vec![S::zero(); nodes[v].values.len()]),
                )
            } else {
                None
            }
        })
        .collect();
    let want_pos = nodes[positions].requires_grad;
    let want_off = nodes[offsets].requires_grad;
    let want_alp = nodes[alpha].requires_grad;
    let mut gpos = if want_pos {
        Some(grads[positions].take().unwrap_or_else(|| vec![S::zero(); pos.len()]))
    } else {
        None
    };
    let mut goff = if want_off {
        Some(grads[offsets].take().unwrap_or_else(|| vec![S::zero(); off.len()]))
    } else {
        None
    };
    let mut galp = if want_alp {
        Some(grads[alpha].take().unwrap_or_else(|| vec![S::zero(); alp.len()]))
    } else {
        None
    };

    for r in 0..rows {
        let t_q = spec.row_frames[r] as usize;
        let x = pos[r * 2];
        let y = pos[r * 2 + 1];
        for head in 0..spec.heads {
            let gblock = &g[r * c + head * spec.head_dim..][..spec.head_dim];
            for slot in 0..spec.slots {
                if !spec.active(head, t_q, slot) {
                    continue;
                }
                let frame = spec.slot_frame(t_q, slot).unwrap();
                for (l, grid) in spec.grids.iter().enumerate() {
                    for k in 0..spec.k_points {
                        let e = ((head * spec.slots + slot) * n_scales + l) * spec.k_points + k;
                        let ei = r * entries + e;
                        let a = alp[ei];
                        let sx = x + off[r * entries * comp + e * comp];
                        let sy = y + off[r * entries * comp + e * comp + 1];
                        let (i0, i1, fx, in_x) = grid_coord(sx, grid.w);
                        let (j0, j1, fy, in_y) = grid_coord(sy, grid.h);
                        let hd = spec.head_dim;
                        let head_base = head * hd;

                        // Per enclosing frame: (frame index, lerp weight,
                        // d(weight)/d(frame fraction)).
                        let mut frames: [(usize, S, S); 2] = [(frame, one, S::zero()); 2];
                        let mut n_frames = 1;
                        let mut dtau_scale = S::zero();
                        if spec.mode == SampleMode::Fractional {
                            let raw = S::c(t_q as f64) + off[r * entries * comp + e * comp + 2];
                            let hi = S::c((grid.t - 1) as f64);
                            let in_t = raw > S::zero() && raw < hi;
                            let tau = raw.max(S::zero()).min(hi);
                            let f0 = tau.floor().to_usize().unwrap_or(0).min(grid.t - 1);
                            let f1 = (f0 + 1).min(grid.t - 1);
                            let ft = tau - S::c(f0 as f64);
                            frames[0] = (f0, one - ft, -one);
                            frames[1] = (f1, ft, one);
                            n_frames = if f1 != f0 { 2 } else { 1 };
                            dtau_scale = if in_t { one } else { S::zero() };
                        }

                        let mut dalpha = S::zero();
                        let mut du = S::zero();
                        let mut dv = S::zero();
                        let mut dtau = S::zero();
                        for &(f, fw, dfw) in frames.iter().take(n_frames) {
                            let plane = &vols[l][((f * grid.h) * grid.w) * c..];
                            let b00 = (j0 * grid.w + i0) * c + head_base;
                            let b01 = (j0 * grid.w + i1) * c + head_base;
                            let b10 = (j1 * grid.w + i0) * c + head_base;
                            let b11 = (j1 * grid.w + i1) * c + head_base;
                            let w00 = (one - fy) * (one - fx);
                            let w01 = (one - fy) * fx;
                            let w10 = fy * (one - fx);
                            let w11 = fy * fx;
                            let mut sampled = S::zero();
                            let mut dfx = S::zero();
                            let mut dfy = S::zero();
                            for ch in 0..hd {
                                let (v00, v01, v10, v11) = (
                                    plane[b00 + ch],
                                    plane[b01 + ch],
                                    plane[b10 + ch],
                                    plane[b11 + ch],
                                );
                                let gc = gblock[ch];
                                sampled += gc * (w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11);
                                dfx += gc * ((one - fy) * (v01 - v00) + fy * (v11 - v10));
                                dfy += gc * ((one - fx) * (v10 - v00) + fx * (v11 - v01));
                            }
                            dalpha += fw * sampled;
                            du += a * fw * dfx;
                            dv += a * fw * dfy;
                            dtau += a * dfw * sampled;
                            if let Some(gv) = gval[l].as_deref_mut() {
                                let scale = a * fw;
                                let goffset = ((f * grid.h) * grid.w) * c;
                                for ch in 0..hd {
                                    let gc = gblock[ch] * scale;
                                    gv[goffset + b00 + ch] += gc * w00;
                                    gv[goffset + b01 + ch] += gc * w01;
                                    gv[goffset + b10 + ch] += gc * w10;
                                    gv[goffset + b11 + ch] += gc * w11;
                                }
                            }
                        }
                        if let Some(ga) = galp.as_deref_mut() {
                            ga[ei] += dalpha;
                        }
                        let du_norm = if in_x { du * S::c((grid.w - 1) as f64) } else { S::zero() };
                        let dv_norm = if in_y { dv * S::c((grid.h - 1) as f64) } else { S::zero() };
                        if let Some(go) = goff.as_deref_mut() {
                            go[r * entries * comp + e * comp] += du_norm;
                            go[r * entries * comp + e * comp + 1] += dv_norm;
                            if comp == 3 {
                                go[r * entries * comp + e * comp + 2] += dtau * dtau_scale;
                            }
                        }
                        if let Some(gp) = gpos.as_deref_mut() {
                            gp[r * 2] += du_norm;
                            gp[r * 2 + 1] += dv_norm;
                        }
                    }
                }
            }
        }
    }

    for (i, &v) in values.iter().enumerate() {
        if let Some(buf) = gval[i].take() {
            grads[v] = Some(buf);
        }
    }
    if let Some(buf) = gpos {
        grads[positions] = Some(buf);
    }
    if let Some(buf) = goff {
        grads[offsets] = Some(buf);
    }
    if let Some(buf) = galp {
        grads[alpha] = Some(buf);
    }
}

#[cfg(test)]
mod tests {
    use super::{SampleGrid, SampleMode, SampleSpec};
    use crate::tensor::Tape;

    fn ramp(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 * 0.1).collect()
    }

    #[test]
    fn bilinear_is_exact_at_grid_nodes() {
        let mut tape: Tape<f64> = Tape::new();
        // volume [c=2, h=3, w=4]
        let vol = tape.leaf(&[2, 3, 4], ramp(24)).unwrap();
        for (iy, ix) in [(0usize, 0usize), (2, 3), (1, 2)] {
            let x = tape.leaf(&[], vec![ix as f64 / 3.0]).unwrap();
            let y = tape.leaf(&[], vec![iy as f64 / 2.0]).unwrap();
            let out = tape.bilinear_sample(vol, x, y).unwrap();
            let v = tape.values(out);
            for c in 0..2 {
                let want = (c * 12 + iy * 4 + ix) as f64 * 0.1;
                assert!((v[c] - want).abs() < 1e-12, "node ({iy},{ix}) ch {c}");
            }
        }
    }

    #[test]
    fn bilinear_midpoint_averages_corners() {
        let mut tape: Tape<f64> = Tape::new();
        let vol = tape.leaf(&[1, 2, 2], vec![0.0, 2.0, 4.0, 10.0]).unwrap();
        let x = tape.leaf(&[], vec![0.5]).unwrap();
        let y = tape.leaf(&[], vec![0.5]).unwrap();
        let out = tape.bilinear_sample(vol, x, y).unwrap();
        assert!((tape.value(out) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn bilinear_clamps_outside_coordinates() {
        let mut tape: Tape<f64> = Tape::new();
        let vol = tape.leaf(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let cases = [(-0.7, -0.3, 1.0), (1.9, 0.0, 2.0), (1.5, 1.5, 4.0)];
        for (xq, yq, want) in cases {
            let x = tape.leaf(&[], vec![xq]).unwrap();
            let y = tape.leaf(&[], vec![yq]).unwrap();
            let out = tape.bilinear_sample(vol, x, y).unwrap();
            assert!((tape.value(out) - want).abs() < 1e-12, "query ({xq},{yq})");
        }
    }

    fn tiny_spec(mode: SampleMode, heads: usize, t: usize) -> SampleSpec {
        SampleSpec {
            heads,
            head_dim: 2,
            grids: vec![SampleGrid { t, h: 3, w: 3 }],
            k_points: 2,
            slots: if matches!(mode, SampleMode::Neighbor) { 3 } else { t },
            mode,
            row_frames: vec![1; 2],
        }
    }

    #[test]
    fn spec_entry_bookkeeping() {
        let spec = tiny_spec(SampleMode::Neighbor, 4, 3);
        assert_eq!(spec.channels(), 8);
        assert_eq!(spec.comp(), 2);
        assert_eq!(spec.entries(), 4 * 3 * 1 * 2);
        assert_eq!(spec.head_quota(0), 4);
        assert_eq!(spec.head_quota(1), 2);
        assert_eq!(spec.head_quota(2), 1);
        assert_eq!(spec.head_quota(9), 1);
        let frac = tiny_spec(SampleMode::Fractional, 4, 3);
        assert_eq!(frac.comp(), 3);
    }

    #[test]
    fn constant_volume_exposes_head_quotas() {
        // On a constant field, offsets cannot matter: each head returns the
        // constant times the summed alpha of its *active* entries, which makes
        // the per-distance head quota directly observable.
        let mut tape: Tape<f64> = Tape::new();
        let spec = tiny_spec(SampleMode::Full, 2, 2);
        let rows = 2;
        let e = spec.entries();
        assert_eq!(e, 8);
        let c = spec.channels();
        let pos = tape.leaf(&[rows, 2], vec![0.3, 0.4, 0.8, 0.1]).unwrap();
        let off = tape
            .leaf(&[rows, e * spec.comp()], ramp(rows * e * spec.comp()))
            .unwrap();
        let alpha = tape.leaf(&[rows, e], vec![1.0 / e as f64; rows * e]).unwrap();
        let vol = tape.leaf(&[2, 3, 3, c], vec![7.0; 2 * 3 * 3 * c]).unwrap();
        let out = tape.st_sample(pos, off, alpha, &[vol], spec.clone()).unwrap();
        assert_eq!(tape.shape(out), &[rows, c]);
        // Queries sit at frame 1. Head 0 covers both frames (4 entries alive),
        // head 1 only the query frame (2 entries), each entry weighted 1/8.
        let want_head = [7.0 * 4.0 / 8.0, 7.0 * 2.0 / 8.0];
        let v = tape.values(out);
        for r in 0..rows {
            for head in 0..spec.heads {
                for d in 0..spec.head_dim {
                    let got = v[r * c + head * spec.head_dim + d];
                    assert!(
                        (got - want_head[head]).abs() < 1e-12,
                        "row {r} head {head}: {got}"
                    );
                }
            }
        }
    }

    #[test]
    fn fractional_mode_lerps_between_frames() {
        let mut tape: Tape<f64> = Tape::new();
        let spec = SampleSpec {
            heads: 1,
            head_dim: 1,
            grids: vec![SampleGrid { t: 2, h: 2, w: 2 }],
            k_points: 2,
            slots: 1,
            mode: SampleMode::Fractional,
            row_frames: vec![0],
        };
        let e = spec.entries();
        assert_eq!(e, 2);
        let pos = tape.leaf(&[1, 2], vec![0.5, 0.5]).unwrap();
        // Point 0 stays at tau=0 (frame 0), point 1 jumps tau=+1 (frame 1).
        let off = tape
            .leaf(&[1, e * 3], vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0])
            .unwrap();
        let alpha = tape.leaf(&[1, e], vec![0.5, 0.5]).unwrap();
        // Frame 0 constant 2.0, frame 1 constant 6.0.
        let mut vals = vec![2.0; 4];
        vals.extend(vec![6.0; 4]);
        let vol = tape.leaf(&[2, 2, 2, 1], vals).unwrap();
        let out = tape.st_sample(pos, off, alpha, &[vol], spec.clone()).unwrap();
        // 0.5 * 2.0 + 0.5 * 6.0
        assert!((tape.value(out) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn neighbor_mode_masks_out_of_range_slots() {
        // Query at frame 0: slot 0 (t-1) is out of range and must contribute
        // nothing even with nonzero alpha ("nothing" = treated by masking in
        // the attention layer; here the sampler clamps the slot's frame).
        let spec = SampleSpec {
            heads: 1,
            head_dim: 1,
            grids: vec![SampleGrid { t: 2, h: 2, w: 2 }],
            k_points: 1,
            slots: 3,
            mode: SampleMode::Neighbor,
            row_frames: vec![0],
        };
        assert_eq!(spec.slot_frame(0, 0), None);
        assert_eq!(spec.slot_frame(0, 1), Some(0));
        assert_eq!(spec.slot_frame(0, 2), Some(1));
        assert_eq!(spec.slot_frame(1, 2), None);
    }
}
