//! Snippet enumeration, train/val/occlusion splits, and the conversion from
//! stored annotations to loss-space supervision.

use super::{RenderedSequence, Result, SynthError, NUM_JOINTS, PELVIS};
use crate::matching::TargetTraj;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SnippetRef {
    pub sequence: usize,
    pub start: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct SplitCfg {
    /// Frames a snippet spans, observed plus forecast.
    pub snippet_len: usize,
    /// Step between snippet starts within a sequence.
    pub stride: usize,
    /// Fraction of sequences held out of training.
    pub val_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Default)]
pub struct Splits {
    pub train: Vec<SnippetRef>,
    pub val: Vec<SnippetRef>,
    /// Held-out snippets containing at least one person-frame that is
    /// present yet fully hidden.
    pub occlusion: Vec<SnippetRef>,
}

/// Deterministically partition sequences into train and held-out pools,
/// then peel the held-out snippets with a fully occluded person-frame into
/// the occlusion split. The three sets are disjoint by construction.
pub fn make_splits(seqs: &[RenderedSequence], cfg: &SplitCfg) -> Result<Splits> {
    if seqs.len() < 2 {
        return Err(SynthError::Config(
            "need at least two sequences to split".into(),
        ));
    }
    if cfg.snippet_len == 0 || cfg.stride == 0 {
        return Err(SynthError::Config("zero snippet length or stride".into()));
    }
    if !(0.0..1.0).contains(&cfg.val_fraction) || cfg.val_fraction == 0.0 {
        return Err(SynthError::Config(format!(
            "val fraction {} outside (0, 1)",
            cfg.val_fraction
        )));
    }

    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut rng = Rng::seed_from(cfg.seed);
    rng.shuffle(&mut order);
    let held = ((seqs.len() as f64 * cfg.val_fraction).ceil() as usize).clamp(1, seqs.len() - 1);

    let mut splits = Splits::default();
    for (rank, &s) in order.iter().enumerate() {
        let seq = &seqs[s];
        if seq.meta.frames < cfg.snippet_len {
            continue;
        }
        let mut start = 0;
        while start + cfg.snippet_len <= seq.meta.frames {
            let snip = SnippetRef { sequence: s, start };
            if rank >= held {
                splits.train.push(snip);
            } else if snippet_has_full_occlusion(seq, start, cfg.snippet_len) {
                splits.occlusion.push(snip);
            } else {
                splits.val.push(snip);
            }
            start += cfg.stride;
        }
    }
    Ok(splits)
}

pub fn snippet_has_full_occlusion(seq: &RenderedSequence, start: usize, len: usize) -> bool {
    (start..start + len)
        .any(|t| (0..seq.people()).any(|p| seq.fully_occluded(t, p)))
}

/// Loss-space targets for one snippet: one trajectory per annotated person,
/// roots as image fractions plus depth, offsets focal-normalized at the
/// target's own root depth, visibility as 0/1.
pub fn snippet_targets(
    seq: &RenderedSequence,
    start: usize,
    frames: usize,
) -> Result<Vec<TargetTraj>> {
    if start + frames > seq.meta.frames {
        return Err(SynthError::Config(format!(
            "snippet {start}+{frames} outside {} frames",
            seq.meta.frames
        )));
    }
    let (w1, h1) = (
        (seq.meta.width - 1) as f64,
        (seq.meta.height - 1) as f64,
    );
    let mut out = Vec::with_capacity(seq.people());
    for p in 0..seq.people() {
        let mut traj = TargetTraj {
            present: Vec::with_capacity(frames),
            joints: Vec::with_capacity(frames),
            offsets: Vec::with_capacity(frames),
            visibility: Vec::with_capacity(frames),
        };
        for t in start..start + frames {
            let a = &seq.annots[t][p];
            traj.present.push(a.present);
            if !a.present {
                traj.joints.push(vec![[0.0; 3]; NUM_JOINTS]);
                traj.offsets.push(vec![[0.0; 3]; NUM_JOINTS]);
                traj.visibility.push(vec![0.0; NUM_JOINTS]);
                continue;
            }
            let root_px = a.joints[PELVIS];
            let d = root_px[2];
            let root = [root_px[0] / w1, root_px[1] / h1, d];
            let mut offsets = vec![[0.0; 3]];
            for k in 1..NUM_JOINTS {
                let off_px = [
                    a.joints[k][0] - root_px[0],
                    a.joints[k][1] - root_px[1],
                    a.joints[k][2] - root_px[2],
                ];
                offsets.push(
                    seq.meta
                        .cam
                        .normalize_offset(off_px, d)
                        .map_err(|e| SynthError::Config(e.to_string()))?,
                );
            }
            traj.joints.push(
                offsets
                    .iter()
                    .map(|o| [root[0] + o[0], root[1] + o[1], root[2] + o[2]])
                    .collect(),
            );
            traj.offsets.push(offsets);
            traj.visibility
                .push(a.vis.iter().map(|&v| f64::from(v)).collect());
        }
        out.push(traj);
    }
    Ok(out)
}

/// Visible joints of the observed frames in heatmap grid units:
/// (frame offset, joint, x, y) at the given stride.
pub fn heatmap_points(
    seq: &RenderedSequence,
    start: usize,
    frames_obs: usize,
    stride: usize,
) -> Vec<(usize, usize, f64, f64)> {
    let mut pts = Vec::new();
    for dt in 0..frames_obs {
        for a in &seq.annots[start + dt] {
            if !a.present {
                continue;
            }
            for k in 0..NUM_JOINTS {
                if a.vis[k] {
                    pts.push((
                        dt,
                        k,
                        a.joints[k][0] / stride as f64,
                        a.joints[k][1] / stride as f64,
                    ));
                }
            }
        }
    }
    pts
}

/// One frame as floats in [0, 1], shaped `[h, w, 3]` row-major.
pub fn frame_image(seq: &RenderedSequence, t: usize) -> Vec<f64> {
    seq.frames[t].iter().map(|&b| b as f64 / 255.0).collect()
}

#[cfg(test)]
mod tests {
    use super::super::{generate_scene, render, SceneCfg};
    use super::*;

    fn tiny_seqs(n: usize) -> Vec<RenderedSequence> {
        (0..n)
            .map(|i| {
                let cfg = SceneCfg {
                    seed: 100 + i as u64,
                    frames: 8,
                    ..SceneCfg::default()
                };
                render(&generate_scene(&cfg).unwrap()).unwrap()
            })
            .collect()
    }

    #[test]
    fn splits_are_disjoint_and_deterministic() {
        let seqs = tiny_seqs(5);
        let cfg = SplitCfg {
            snippet_len: 4,
            stride: 2,
            val_fraction: 0.4,
            seed: 3,
        };
        let a = make_splits(&seqs, &cfg).unwrap();
        let b = make_splits(&seqs, &cfg).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        assert_eq!(a.occlusion, b.occlusion);

        let train_seqs: Vec<usize> = a.train.iter().map(|s| s.sequence).collect();
        for s in a.val.iter().chain(&a.occlusion) {
            assert!(!train_seqs.contains(&s.sequence));
        }
        for s in &a.occlusion {
            assert!(snippet_has_full_occlusion(&seqs[s.sequence], s.start, 4));
        }
        for s in &a.val {
            assert!(!snippet_has_full_occlusion(&seqs[s.sequence], s.start, 4));
        }
        assert!(!a.train.is_empty());
        assert!(!a.val.is_empty() || !a.occlusion.is_empty());
    }

    #[test]
    fn split_rejects_degenerate_configs() {
        let seqs = tiny_seqs(1);
        let cfg = SplitCfg {
            snippet_len: 4,
            stride: 2,
            val_fraction: 0.4,
            seed: 3,
        };
        assert!(make_splits(&seqs, &cfg).is_err());
        let seqs = tiny_seqs(2);
        assert!(make_splits(&seqs, &SplitCfg { val_fraction: 0.0, ..cfg }).is_err());
        assert!(make_splits(&seqs, &SplitCfg { stride: 0, ..cfg }).is_err());
    }

    #[test]
    fn targets_compose_root_and_normalized_offsets() {
        let seqs = tiny_seqs(1);
        let seq = &seqs[0];
        let targets = snippet_targets(seq, 2, 4).unwrap();
        assert_eq!(targets.len(), seq.people());
        let cam = seq.meta.cam;
        for (p, tr) in targets.iter().enumerate() {
            for (dt, t) in (2..6).enumerate() {
                let a = &seq.annots[t][p];
                assert_eq!(tr.present[dt], a.present);
                if !a.present {
                    continue;
                }
                assert_eq!(tr.offsets[dt][0], [0.0; 3]);
                // Joint 4 round-trips to its pixel annotation.
                let root = tr.joints[dt][0];
                let off = cam
                    .denormalize_offset(tr.offsets[dt][4], root[2])
                    .unwrap();
                let w1 = (seq.meta.width - 1) as f64;
                let h1 = (seq.meta.height - 1) as f64;
                assert!((root[0] * w1 + off[0] - a.joints[4][0]).abs() < 1e-9);
                assert!((root[1] * h1 + off[1] - a.joints[4][1]).abs() < 1e-9);
                assert!((root[2] + off[2] - a.joints[4][2]).abs() < 1e-12);
            }
        }
        assert!(snippet_targets(seq, 6, 4).is_err());
    }

    #[test]
    fn heatmap_points_cover_exactly_the_visible_joints() {
        let seqs = tiny_seqs(1);
        let seq = &seqs[0];
        let pts = heatmap_points(seq, 1, 3, 4);
        let visible: usize = (1..4)
            .map(|t| {
                seq.annots[t]
                    .iter()
                    .filter(|a| a.present)
                    .map(|a| a.vis.iter().filter(|&&v| v).count())
                    .sum::<usize>()
            })
            .sum();
        assert_eq!(pts.len(), visible);
        for &(dt, k, x, y) in &pts {
            let a = &seq.annots[1 + dt][..];
            let hit = a.iter().any(|pa| {
                pa.present
                    && pa.vis[k]
                    && (pa.joints[k][0] / 4.0 - x).abs() < 1e-12
                    && (pa.joints[k][1] / 4.0 - y).abs() < 1e-12
            });
            assert!(hit);
        }
    }
}
