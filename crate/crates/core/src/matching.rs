//! Trajectory assignment and the training loss.
//!
//! Person slots are matched to target trajectories once per snippet, on the
//! final decoder layer, by a Hungarian assignment over three costs:
//! occurrence (negative mean probability over target-present frames),
//! trajectory L1 (visibility-weighted, over composed joints) and visibility
//! L2. The same assignment then supervises every decoder layer.
//!
//! All joint quantities here live in the loss space: roots as
//! (x, y) in [0, 1] image coordinates plus depth in meters, joint offsets in
//! focal-normalized metric units. That keeps every axis at roughly unit
//! scale regardless of image resolution or subject distance.

use crate::model::{LayerOut, ModelCfg};
use crate::scalar::Scalar;
use crate::tensor::{Tape, TensorError, TensorRef};

#[derive(Debug, thiserror::Error)]
pub enum MatchError {
    #[error("target occurs in zero frames")]
    NeverPresent,
    #[error("target has no visible joint in any frame")]
    NeverVisible,
    #[error("{targets} targets but only {preds} prediction slots")]
    Capacity { preds: usize, targets: usize },
    #[error("non-finite cost for prediction {pred}, target {target}")]
    NonFinite { pred: usize, target: usize },
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, MatchError>;

/// One slot's predictions over the snippet, detached from the tape for cost
/// evaluation. `joints[t][k]` is the composed joint (root + offset).
#[derive(Clone, Debug)]
pub struct PredTraj {
    pub occurrence: Vec<f64>,
    pub joints: Vec<Vec<[f64; 3]>>,
    pub offsets: Vec<Vec<[f64; 3]>>,
    pub visibility: Vec<Vec<f64>>,
}

/// A ground-truth trajectory in loss space. Frames where the person is
/// absent carry zero visibility, which removes them from every weighted sum.
#[derive(Clone, Debug)]
pub struct TargetTraj {
    pub present: Vec<bool>,
    pub joints: Vec<Vec<[f64; 3]>>,
    pub offsets: Vec<Vec<[f64; 3]>>,
    pub visibility: Vec<Vec<f64>>,
}

impl TargetTraj {
    pub fn frames(&self) -> usize {
        self.present.len()
    }

    pub fn num_joints(&self) -> usize {
        self.visibility.first().map_or(0, Vec::len)
    }

    fn vis_total(&self) -> f64 {
        self.visibility.iter().flatten().sum()
    }

    /// A target that never occurs, or is never visible, cannot be matched
    /// meaningfully; callers drop these rather than failing the batch.
    pub fn is_degenerate(&self) -> bool {
        !self.present.iter().any(|&p| p) || self.vis_total() == 0.0
    }
}

/// Negative mean occurrence probability over the target's present frames.
pub fn occ_cost(pred: &PredTraj, target: &TargetTraj) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, &present) in target.present.iter().enumerate() {
        if present {
            num += pred.occurrence[t];
            den += 1.0;
        }
    }
    if den == 0.0 {
        return Err(MatchError::NeverPresent);
    }
    Ok(-num / den)
}

/// Visibility-weighted mean L1 distance between composed joint trajectories.
pub fn traj_cost(pred: &PredTraj, target: &TargetTraj) -> Result<f64> {
    let den = target.vis_total();
    if den == 0.0 {
        return Err(MatchError::NeverVisible);
    }
    let mut num = 0.0;
    for (pj, (tj, tv)) in pred
        .joints
        .iter()
        .zip(target.joints.iter().zip(&target.visibility))
    {
        for (k, v) in tv.iter().enumerate() {
            for a in 0..3 {
                num += v * (pj[k][a] - tj[k][a]).abs();
            }
        }
    }
    Ok(num / den)
}

/// Mean squared visibility error over every joint of every frame.
pub fn vis_cost(pred: &PredTraj, target: &TargetTraj) -> f64 {
    let mut num = 0.0;
    let mut count = 0.0;
    for (pv, tv) in pred.visibility.iter().zip(&target.visibility) {
        for (p, t) in pv.iter().zip(tv) {
            num += (p - t) * (p - t);
            count += 1.0;
        }
    }
    num / count
}

/// Pairwise matching costs; rows are predictions, columns targets.
pub struct CostMatrix {
    preds: usize,
    targets: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn from_fn(
        preds: usize,
        targets: usize,
        mut f: impl FnMut(usize, usize) -> Result<f64>,
    ) -> Result<CostMatrix> {
        let mut data = Vec::with_capacity(preds * targets);
        for i in 0..preds {
            for j in 0..targets {
                let c = f(i, j)?;
                if !c.is_finite() {
                    return Err(MatchError::NonFinite { pred: i, target: j });
                }
                data.push(c);
            }
        }
        Ok(CostMatrix {
            preds,
            targets,
            data,
        })
    }

    pub fn preds(&self) -> usize {
        self.preds
    }

    pub fn targets(&self) -> usize {
        self.targets
    }

    pub fn at(&self, pred: usize, target: usize) -> f64 {
        self.data[pred * self.targets + target]
    }
}

pub fn cost_matrix(preds: &[PredTraj], targets: &[TargetTraj]) -> Result<CostMatrix> {
    CostMatrix::from_fn(preds.len(), targets.len(), |i, j| {
        Ok(occ_cost(&preds[i], &targets[j])?
            + traj_cost(&preds[i], &targets[j])?
            + vis_cost(&preds[i], &targets[j]))
    })
}

/// An injective map from targets to prediction slots.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `pred_for_target[j]` is the slot matched to target `j`.
    pub pred_for_target: Vec<usize>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn is_matched(&self, pred: usize) -> bool {
        self.pred_for_target.contains(&pred)
    }
}

/// Minimum-cost assignment of every target to a distinct prediction, by the
/// shortest-augmenting-path form of the Hungarian algorithm (O(n^2 m) with
/// row/column potentials). Index 0 of the column arrays is a virtual column
/// that anchors each augmenting search.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    let (n, m) = (cost.targets, cost.preds);
    if n > m {
        return Err(MatchError::Capacity {
            preds: m,
            targets: n,
        });
    }
    if n == 0 {
        return Ok(Assignment {
            pred_for_target: Vec::new(),
            total_cost: 0.0,
        });
    }
    // Internally: rows = targets 1..=n, columns = predictions 1..=m.
    let a = |i: usize, j: usize| cost.at(j - 1, i - 1);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        // Walk the augmenting path back, flipping matches.
        while j0 != 0 {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
        }
    }
    let mut pred_for_target = vec![usize::MAX; n];
    for j in 1..=m {
        if row_of[j] != 0 {
            pred_for_target[row_of[j] - 1] = j - 1;
        }
    }
    let total_cost = pred_for_target
        .iter()
        .enumerate()
        .map(|(t, &p)| cost.at(p, t))
        .sum();
    Ok(Assignment {
        pred_for_target,
        total_cost,
    })
}

pub fn match_trajectories(preds: &[PredTraj], targets: &[TargetTraj]) -> Result<Assignment> {
    hungarian(&cost_matrix(preds, targets)?)
}

/// Detach one decoder layer's predictions into cost-space trajectories.
pub fn pred_trajs<S: Scalar>(tape: &Tape<S>, cfg: &ModelCfg, layer: &LayerOut) -> Vec<PredTraj> {
    let (t_total, j) = (cfg.t_total(), cfg.num_joints);
    let xy = tape.values(layer.root_xy);
    let depth = tape.values(layer.depth);
    let off = tape.values(layer.offsets);
    let vis = tape.values(layer.visibility);
    let occ = tape.values(layer.occurrence);
    (0..cfg.num_queries)
        .map(|n| {
            let mut traj = PredTraj {
                occurrence: Vec::with_capacity(t_total),
                joints: Vec::with_capacity(t_total),
                offsets: Vec::with_capacity(t_total),
                visibility: Vec::with_capacity(t_total),
            };
            for t in 0..t_total {
                let r = n * t_total + t;
                let root = [xy[r * 2].f64(), xy[r * 2 + 1].f64(), depth[r].f64()];
                let mut offsets = vec![[0.0; 3]];
                for k in 0..j - 1 {
                    let base = (r * (j - 1) + k) * 3;
                    offsets.push([off[base].f64(), off[base + 1].f64(), off[base + 2].f64()]);
                }
                traj.joints.push(
                    offsets
                        .iter()
                        .map(|o| [root[0] + o[0], root[1] + o[1], root[2] + o[2]])
                        .collect(),
                );
                traj.offsets.push(offsets);
                traj.occurrence.push(occ[r].f64());
                traj.visibility
                    .push(vis[r * j..(r + 1) * j].iter().map(|v| v.f64()).collect());
            }
            traj
        })
        .collect()
}

/// Per-component loss weights. The paper-form loss uses unit weights; they
/// are exposed for experiments.
#[derive(Clone, Debug)]
pub struct LossCfg {
    pub w_occ: f64,
    pub w_traj: f64,
    pub w_vis: f64,
    pub w_offset: f64,
    pub w_smooth: f64,
    pub w_heatmap: f64,
    /// Floor for probabilities inside logs.
    pub eps: f64,
}

impl Default for LossCfg {
    fn default() -> Self {
        LossCfg {
            w_occ: 1.0,
            w_traj: 1.0,
            w_vis: 1.0,
            w_offset: 1.0,
            w_smooth: 1.0,
            w_heatmap: 1.0,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub occ: f64,
    pub traj: f64,
    pub vis: f64,
    pub offset: f64,
    pub smooth: f64,
}

#[derive(Debug)]
pub struct LossBreakdown {
    /// Per decoder layer, already normalized by the target count.
    pub layers: Vec<LossTerms>,
    pub occ: f64,
    pub traj: f64,
    pub vis: f64,
    pub offset: f64,
    pub smooth: f64,
    pub heatmap: f64,
    pub total: f64,
    /// A probability hit the log floor somewhere.
    pub clamped: bool,
    /// Targets excluded for being never present or never visible.
    pub dropped_targets: usize,
    pub assignment: Assignment,
}

struct Accum {
    parts: Vec<TensorRef>,
}

impl Accum {
    fn new() -> Self {
        Accum { parts: Vec::new() }
    }

    fn push(&mut self, t: TensorRef) {
        self.parts.push(t);
    }

    /// Sum of all parts, scaled; None when nothing accumulated.
    fn fold<S: Scalar>(
        self,
        tape: &mut Tape<S>,
        scale: f64,
    ) -> crate::tensor::Result<Option<TensorRef>> {
        let mut it = self.parts.into_iter();
        let Some(mut acc) = it.next() else {
            return Ok(None);
        };
        for p in it {
            acc = tape.add(acc, p)?;
        }
        Ok(Some(tape.scale(acc, S::c(scale))?))
    }
}

/// The full snippet loss: Hungarian-matched occurrence, trajectory,
/// visibility, offset and smoothness terms for every decoder layer (one
/// assignment, computed on the last layer), absence supervision for
/// unmatched slots, and a single heatmap term. Pose terms are divided by
/// the number of live targets. Returns the scalar loss node and a detached
/// numeric breakdown.
pub fn training_loss<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &ModelCfg,
    lcfg: &LossCfg,
    layers: &[LayerOut],
    heatmaps: TensorRef,
    targets: &[TargetTraj],
    target_heatmaps: &[f64],
) -> Result<(TensorRef, LossBreakdown)> {
    let t_total = cfg.t_total();
    let nj = cfg.num_joints;
    if layers.is_empty() {
        return Err(MatchError::Shape("no decoder layers".into()));
    }
    for t in targets {
        if t.frames() != t_total || (!t.is_degenerate() && t.num_joints() != nj) {
            return Err(MatchError::Shape(format!(
                "target with {} frames / {} joints, model decodes {} / {}",
                t.frames(),
                t.num_joints(),
                t_total,
                nj
            )));
        }
    }

    let live: Vec<&TargetTraj> = targets.iter().filter(|t| !t.is_degenerate()).collect();
    let dropped_targets = targets.len() - live.len();
    let m = live.len();
    if m > cfg.num_queries {
        return Err(MatchError::Capacity {
            preds: cfg.num_queries,
            targets: m,
        });
    }

    let assignment = if m > 0 {
        let preds = pred_trajs(tape, cfg, layers.last().unwrap());
        let owned: Vec<TargetTraj> = live.iter().map(|&t| (*t).clone()).collect();
        match_trajectories(&preds, &owned)?
    } else {
        Assignment {
            pred_for_target: Vec::new(),
            total_cost: 0.0,
        }
    };

    let norm = 1.0 / m.max(1) as f64;
    let eps = lcfg.eps;
    let mut clamped = false;
    let mut per_layer = Vec::with_capacity(layers.len());
    let mut layer_nodes: Vec<TensorRef> = Vec::new();

    for layer in layers {
        let mut occ_acc = Accum::new();
        let mut traj_acc = Accum::new();
        let mut vis_acc = Accum::new();
        let mut off_acc = Accum::new();
        let mut smooth_acc = Accum::new();

        for (&slot, &target) in assignment.pred_for_target.iter().zip(&live) {
            let rows = |t: TensorRef, tape: &mut Tape<S>| -> crate::tensor::Result<TensorRef> {
                tape.narrow(t, 0, slot * t_total, t_total)
            };

            // Occurrence NLL over the frames where the target is present.
            let occ_n = rows(layer.occurrence, tape)?;
            let occ_vals = tape.values(occ_n);
            clamped |= target
                .present
                .iter()
                .zip(occ_vals)
                .any(|(&p, o)| p && o.f64() < eps);
            let floored = tape.clamp_min(occ_n, S::c(eps))?;
            let log_o = tape.ln(floored)?;
            let mask: Vec<S> = target
                .present
                .iter()
                .map(|&p| if p { S::one() } else { S::zero() })
                .collect();
            let mask = tape.constant(&[t_total, 1], mask)?;
            let picked = tape.mul(log_o, mask)?;
            let s = tape.sum_all(picked)?;
            occ_acc.push(tape.neg(s)?);

            // Composed joints [t_total, 3 * nj]: root repeated per joint
            // plus the offset block (root offset is the zero column).
            let root_xy = rows(layer.root_xy, tape)?;
            let depth = rows(layer.depth, tape)?;
            let root3 = tape.concat(1, &[root_xy, depth])?;
            let roots = tape.concat(1, &vec![root3; nj])?;
            let zeros = tape.constant(&[t_total, 3], vec![S::zero(); t_total * 3])?;
            let off_n = rows(layer.offsets, tape)?;
            let off_full = tape.concat(1, &[zeros, off_n])?;
            let joints = tape.add(roots, off_full)?;

            let vis_den = target.vis_total();
            let mut w = Vec::with_capacity(t_total * 3 * nj);
            let mut tj = Vec::with_capacity(t_total * 3 * nj);
            let mut toff = Vec::with_capacity(t_total * 3 * nj);
            for t in 0..t_total {
                for k in 0..nj {
                    for a in 0..3 {
                        w.push(S::c(target.visibility[t][k] / vis_den));
                        tj.push(S::c(target.joints[t][k][a]));
                        toff.push(S::c(target.offsets[t][k][a]));
                    }
                }
            }
            let w = tape.constant(&[t_total, 3 * nj], w)?;
            let tj = tape.constant(&[t_total, 3 * nj], tj)?;
            let toff = tape.constant(&[t_total, 3 * nj], toff)?;

            let d = tape.sub(joints, tj)?;
            let d = tape.abs(d)?;
            let d = tape.mul(d, w)?;
            traj_acc.push(tape.sum_all(d)?);

            let d = tape.sub(off_full, toff)?;
            let d = tape.abs(d)?;
            let d = tape.mul(d, w)?;
            off_acc.push(tape.sum_all(d)?);

            // Visibility L2 over every joint of every frame.
            let vis_n = rows(layer.visibility, tape)?;
            let tv: Vec<S> = target
                .visibility
                .iter()
                .flatten()
                .map(|&v| S::c(v))
                .collect();
            let tv = tape.constant(&[t_total, nj], tv)?;
            let d = tape.sub(vis_n, tv)?;
            let d2 = tape.mul(d, d)?;
            let s = tape.sum_all(d2)?;
            vis_acc.push(tape.scale(s, S::c(1.0 / (nj * t_total) as f64))?);

            // Offset smoothness between consecutive frames.
            if t_total > 1 {
                let a = tape.narrow(off_full, 0, 1, t_total - 1)?;
                let b = tape.narrow(off_full, 0, 0, t_total - 1)?;
                let d = tape.sub(a, b)?;
                let d2 = tape.mul(d, d)?;
                let s = tape.sum_all(d2)?;
                smooth_acc.push(tape.scale(s, S::c(1.0 / (nj * (t_total - 1)) as f64))?);
            }
        }

        // Unmatched slots are supervised toward absence in every frame.
        for slot in 0..cfg.num_queries {
            if assignment.is_matched(slot) {
                continue;
            }
            let occ_n = tape.narrow(layer.occurrence, 0, slot * t_total, t_total)?;
            let occ_vals = tape.values(occ_n);
            clamped |= occ_vals.iter().any(|o| 1.0 - o.f64() < eps);
            let neg = tape.neg(occ_n)?;
            let one_minus = tape.add_const(neg, S::one())?;
            let floored = tape.clamp_min(one_minus, S::c(eps))?;
            let log_a = tape.ln(floored)?;
            let s = tape.sum_all(log_a)?;
            occ_acc.push(tape.neg(s)?);
        }

        let occ = occ_acc.fold(tape, norm * lcfg.w_occ)?;
        let traj = traj_acc.fold(tape, norm * lcfg.w_traj)?;
        let vis = vis_acc.fold(tape, norm * lcfg.w_vis)?;
        let off = off_acc.fold(tape, norm * lcfg.w_offset)?;
        let smooth = smooth_acc.fold(tape, norm * lcfg.w_smooth)?;

        let value = |t: &Option<TensorRef>, tape: &Tape<S>| match t {
            Some(r) => tape.values(*r)[0].f64(),
            None => 0.0,
        };
        per_layer.push(LossTerms {
            occ: value(&occ, tape),
            traj: value(&traj, tape),
            vis: value(&vis, tape),
            offset: value(&off, tape),
            smooth: value(&smooth, tape),
        });
        for part in [occ, traj, vis, off, smooth].into_iter().flatten() {
            layer_nodes.push(part);
        }
    }

    // Heatmap L2 over observed frames, added once.
    let hm_shape = tape.shape(heatmaps).to_vec();
    let hm_n: usize = hm_shape.iter().product();
    if target_heatmaps.len() != hm_n {
        return Err(MatchError::Shape(format!(
            "{} target heatmap values for shape {hm_shape:?}",
            target_heatmaps.len()
        )));
    }
    let th: Vec<S> = target_heatmaps.iter().map(|&v| S::c(v)).collect();
    let th = tape.constant(&hm_shape, th)?;
    let d = tape.sub(heatmaps, th)?;
    let d2 = tape.mul(d, d)?;
    let s = tape.sum_all(d2)?;
    let heatmap_node = tape.scale(s, S::c(lcfg.w_heatmap / cfg.snippet_frames as f64))?;
    let heatmap = tape.values(heatmap_node)[0].f64();

    let mut total_node = heatmap_node;
    for part in layer_nodes {
        total_node = tape.add(total_node, part)?;
    }

    let sum = |f: fn(&LossTerms) -> f64| per_layer.iter().map(f).sum::<f64>();
    let breakdown = LossBreakdown {
        occ: sum(|l| l.occ),
        traj: sum(|l| l.traj),
        vis: sum(|l| l.vis),
        offset: sum(|l| l.offset),
        smooth: sum(|l| l.smooth),
        heatmap,
        total: tape.values(total_node)[0].f64(),
        layers: per_layer,
        clamped,
        dropped_targets,
        assignment,
    };
    Ok((total_node, breakdown))
}

/// Supervision heatmaps: per joint channel, the max over instances of a unit
/// Gaussian around each visible joint. `joints` holds (frame, joint, x, y)
/// in grid units of the output resolution; output is `[t, h, w, nj]`.
pub fn target_heatmaps(
    t_len: usize,
    h: usize,
    w: usize,
    nj: usize,
    joints: &[(usize, usize, f64, f64)],
    sigma: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; t_len * h * w * nj];
    let inv = 1.0 / (2.0 * sigma * sigma);
    for &(t, k, jx, jy) in joints {
        assert!(t < t_len && k < nj, "joint outside the heatmap grid");
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f64 - jx).powi(2) + (y as f64 - jy).powi(2);
                let g = (-d2 * inv).exp();
                let cell = &mut out[((t * h + y) * w + x) * nj + k];
                if g > *cell {
                    *cell = g;
                }
            }
        }
    }
    out
}
