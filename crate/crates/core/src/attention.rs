//! Deformable attention over spatiotemporal feature volumes.
//!
//! Each query row carries a normalized 2-D reference point and a frame index.
//! A linear head regresses per-query sampling offsets, a second one regresses
//! weight logits; weights are softmax-normalized per attention head over that
//! head's sample entries, with inactive entries masked to exact zero. The
//! weighted bilinear gathers run in one fused tape op, then a bias-free output
//! projection mixes the heads. Value and output projections carry no bias, so
//! the layer output is exactly linear in the value volumes.
//!
//! Three frame patterns are supported:
//! * [`AttentionVariant::Neighbor`]: three frame slots at `t-1, t, t+1`.
//! * [`AttentionVariant::Full`]: one slot per snippet frame.
//! * [`AttentionVariant::Direct3d`]: a single slot whose frame coordinate is
//!   regressed as a third, fractional offset component.
//!
//! For the slot-based patterns, the number of heads attending to a frame
//! halves per frame of distance from the query frame (never below one), so
//! nearby frames get most of the sampling budget.

use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{
    ParamStore, Result, SampleGrid, SampleMode, SampleSpec, Tape, TensorError, TensorRef,
};

/// Additive pre-softmax mask; exp(x - max) underflows to exact zero.
const MASK: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionVariant {
    Neighbor,
    Direct3d,
    Full,
}

impl AttentionVariant {
    pub fn name(self) -> &'static str {
        match self {
            AttentionVariant::Neighbor => "neighbor",
            AttentionVariant::Direct3d => "direct3d",
            AttentionVariant::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "neighbor" => Some(AttentionVariant::Neighbor),
            "direct3d" => Some(AttentionVariant::Direct3d),
            "full" => Some(AttentionVariant::Full),
            _ => None,
        }
    }

    pub fn mode(self) -> SampleMode {
        match self {
            AttentionVariant::Neighbor => SampleMode::Neighbor,
            AttentionVariant::Direct3d => SampleMode::Fractional,
            AttentionVariant::Full => SampleMode::Full,
        }
    }

    pub fn slots(self, t_len: usize) -> usize {
        match self {
            AttentionVariant::Neighbor => 3,
            AttentionVariant::Direct3d => 1,
            AttentionVariant::Full => t_len,
        }
    }
}

/// Static geometry of one attention layer.
#[derive(Clone, Debug)]
pub struct AttentionCfg {
    pub channels: usize,
    pub heads: usize,
    pub k_points: usize,
    /// Snippet length of the value volumes.
    pub t_len: usize,
    /// Spatial extent (h, w) of each value scale.
    pub scale_shapes: Vec<(usize, usize)>,
    pub variant: AttentionVariant,
}

impl AttentionCfg {
    pub fn validate(&self) -> Result<()> {
        let ok = self.channels > 0
            && self.heads > 0
            && self.channels % self.heads == 0
            && self.k_points > 0
            && self.t_len > 0
            && !self.scale_shapes.is_empty()
            && self.scale_shapes.iter().all(|&(h, w)| h > 0 && w > 0);
        if ok {
            Ok(())
        } else {
            Err(TensorError::Invalid {
                op: "attention",
                msg: format!("bad layer geometry {self:?}"),
            })
        }
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn slots(&self) -> usize {
        self.variant.slots(self.t_len)
    }

    pub fn comp(&self) -> usize {
        match self.variant {
            AttentionVariant::Direct3d => 3,
            _ => 2,
        }
    }

    /// Sample entries per query row.
    pub fn entries(&self) -> usize {
        self.heads * self.slots() * self.scale_shapes.len() * self.k_points
    }

    pub fn spec(&self, row_frames: Vec<u32>) -> SampleSpec {
        SampleSpec {
            heads: self.heads,
            head_dim: self.head_dim(),
            grids: self
                .scale_shapes
                .iter()
                .map(|&(h, w)| SampleGrid { t: self.t_len, h, w })
                .collect(),
            k_points: self.k_points,
            slots: self.slots(),
            mode: self.variant.mode(),
            row_frames,
        }
    }

    /// Bilinear gathers head `head` performs for a query at frame `t_q`:
    /// frames the head actually visits, times scales, times points. The
    /// fractional variant reads two enclosing frames per point.
    pub fn samples_per_query(&self, head: usize, t_q: usize) -> usize {
        let spec = self.spec(vec![t_q as u32]);
        let per_point = self.scale_shapes.len() * self.k_points;
        match self.variant {
            AttentionVariant::Direct3d => per_point * if self.t_len > 1 { 2 } else { 1 },
            _ => (0..self.slots())
                .filter(|&s| spec.active(head, t_q, s))
                .count()
                * per_point,
        }
    }
}

/// Tape handles of one layer's parameters.
#[derive(Clone, Copy)]
pub struct AttentionParams {
    pub off_w: TensorRef,
    pub off_b: TensorRef,
    pub alpha_w: TensorRef,
    pub alpha_b: TensorRef,
    pub val_w: TensorRef,
    pub out_w: TensorRef,
}

impl AttentionParams {
    pub fn from_staged(staged: &crate::tensor::Staged, prefix: &str) -> Self {
        AttentionParams {
            off_w: staged.get(&format!("{prefix}.off.w")),
            off_b: staged.get(&format!("{prefix}.off.b")),
            alpha_w: staged.get(&format!("{prefix}.alpha.w")),
            alpha_b: staged.get(&format!("{prefix}.alpha.b")),
            val_w: staged.get(&format!("{prefix}.val.w")),
            out_w: staged.get(&format!("{prefix}.out.w")),
        }
    }
}

/// Register one layer's parameters under `prefix`.
///
/// The offset regressor starts at zero weights with biases spreading the k
/// points on small circles (rotated per head), the weight regressor starts at
/// zero so attention begins uniform over active entries, and the two
/// projections get scaled normal init.
pub fn init_params<S: Scalar>(
    store: &mut ParamStore<S>,
    prefix: &str,
    cfg: &AttentionCfg,
    rng: &mut Rng,
) -> Result<()> {
    cfg.validate()?;
    let c = cfg.channels;
    let e = cfg.entries();
    let comp = cfg.comp();
    let (slots, scales, k_pts) = (cfg.slots(), cfg.scale_shapes.len(), cfg.k_points);

    let mut off_b = vec![S::zero(); e * comp];
    for h in 0..cfg.heads {
        for slot in 0..slots {
            for l in 0..scales {
                for k in 0..k_pts {
                    let entry = ((h * slots + slot) * scales + l) * k_pts + k;
                    let angle = std::f64::consts::TAU
                        * (h as f64 / cfg.heads as f64
                            + k as f64 / (k_pts as f64 * cfg.heads as f64));
                    let radius = 0.05 * (k + 1) as f64 / k_pts as f64;
                    off_b[entry * comp] = S::c(radius * angle.cos());
                    off_b[entry * comp + 1] = S::c(radius * angle.sin());
                    // fractional frame component, if any, starts at zero
                }
            }
        }
    }
    store.add(&format!("{prefix}.off.w"), &[e * comp, c], vec![S::zero(); e * comp * c])?;
    store.add(&format!("{prefix}.off.b"), &[e * comp], off_b)?;
    store.add(&format!("{prefix}.alpha.w"), &[e, c], vec![S::zero(); e * c])?;
    store.add(&format!("{prefix}.alpha.b"), &[e], vec![S::zero(); e])?;
    let std = (1.0 / c as f64).sqrt();
    let dense = |rng: &mut Rng| -> Vec<S> {
        (0..c * c).map(|_| S::c(rng.normal() * std)).collect()
    };
    store.add(&format!("{prefix}.val.w"), &[c, c], dense(rng))?;
    store.add(&format!("{prefix}.out.w"), &[c, c], dense(rng))?;
    Ok(())
}

/// Masked, per-head-normalized attention weights: `[rows, entries]`, zero on
/// inactive entries, summing to one over each head's active entries.
pub fn weights<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &AttentionCfg,
    p: &AttentionParams,
    queries: TensorRef,
    row_frames: &[u32],
) -> Result<TensorRef> {
    let rows = row_frames.len();
    let e = cfg.entries();
    let logits = tape.linear(queries, p.alpha_w, Some(p.alpha_b))?;

    let spec = cfg.spec(row_frames.to_vec());
    let (slots, scales, k_pts) = (cfg.slots(), cfg.scale_shapes.len(), cfg.k_points);
    let mut mask = vec![S::zero(); rows * e];
    let mut any = false;
    for (r, &t_q) in row_frames.iter().enumerate() {
        for h in 0..cfg.heads {
            for slot in 0..slots {
                if spec.active(h, t_q as usize, slot) {
                    continue;
                }
                any = true;
                for l in 0..scales {
                    for k in 0..k_pts {
                        let entry = ((h * slots + slot) * scales + l) * k_pts + k;
                        mask[r * e + entry] = S::c(MASK);
                    }
                }
            }
        }
    }
    let masked = if any {
        let m = tape.constant(&[rows, e], mask)?;
        tape.add(logits, m)?
    } else {
        logits
    };
    // Entries are laid out head-major, so a reshape groups each head's block
    // for the row softmax.
    let grouped = tape.reshape(masked, &[rows * cfg.heads, slots * scales * k_pts])?;
    let alpha = tape.softmax(grouped)?;
    tape.reshape(alpha, &[rows, e])
}

/// One full attention layer application.
///
/// * `queries`: `[rows, channels]` query features
/// * `positions`: `[rows, 2]` normalized reference points (may require grad)
/// * `row_frames`: query frame per row, clamped into `0..t_len`
/// * `volumes`: per-scale value volumes `[t_len, h_l, w_l, channels]`
pub fn attend<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &AttentionCfg,
    p: &AttentionParams,
    queries: TensorRef,
    positions: TensorRef,
    row_frames: &[u32],
    volumes: &[TensorRef],
) -> Result<TensorRef> {
    cfg.validate()?;
    let rows = row_frames.len();
    if tape.shape(queries) != [rows, cfg.channels] {
        return Err(TensorError::Invalid {
            op: "attention",
            msg: format!(
                "queries {:?} for {} rows of {} channels",
                tape.shape(queries),
                rows,
                cfg.channels
            ),
        });
    }
    let offsets = tape.linear(queries, p.off_w, Some(p.off_b))?;
    let alpha = weights(tape, cfg, p, queries, row_frames)?;

    let mut projected = Vec::with_capacity(volumes.len());
    for (&v, &(h, w)) in volumes.iter().zip(&cfg.scale_shapes) {
        let flat = tape.reshape(v, &[cfg.t_len * h * w, cfg.channels])?;
        let proj = tape.linear(flat, p.val_w, None)?;
        projected.push(tape.reshape(proj, &[cfg.t_len, h, w, cfg.channels])?);
    }

    let spec = cfg.spec(row_frames.to_vec());
    let sampled = tape.st_sample(positions, offsets, alpha, &projected, spec)?;
    tape.linear(sampled, p.out_w, None)
}
