//! Evaluation metrics over metric-space joints: MPJPE (plain and
//! root-aligned), 3D-PCK, detection F1, CLEAR-MOT tracking accuracy and
//! forecast path error. Inputs are 3D joints in meters; errors are reported
//! in millimeters, rates in percent. Lifting from 2.5D happens upstream.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("no visible joints to average over")]
    NoVisibleJoints,
    #[error("no target detections in the evaluation window")]
    NoTargets,
    #[error("{0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, MetricError>;

const MM: f64 = 1000.0;

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

fn check_joints(pred: &[[f64; 3]], target: &[[f64; 3]], vis: &[f64]) -> Result<()> {
    if pred.len() != target.len() || pred.len() != vis.len() || pred.is_empty() {
        return Err(MetricError::Shape(format!(
            "{} pred, {} target, {} visibility entries",
            pred.len(),
            target.len(),
            vis.len()
        )));
    }
    Ok(())
}

/// Mean Euclidean joint error in millimeters over visible joints.
pub fn mpjpe(pred: &[[f64; 3]], target: &[[f64; 3]], vis: &[f64]) -> Result<f64> {
    check_joints(pred, target, vis)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for k in 0..pred.len() {
        if vis[k] > 0.5 {
            sum += dist(pred[k], target[k]);
            n += 1;
        }
    }
    if n == 0 {
        return Err(MetricError::NoVisibleJoints);
    }
    Ok(sum / n as f64 * MM)
}

/// MPJPE after subtracting each side's root joint, which removes any global
/// translation of the prediction.
pub fn mpjpe_rel(pred: &[[f64; 3]], target: &[[f64; 3]], vis: &[f64]) -> Result<f64> {
    check_joints(pred, target, vis)?;
    let align = |j: &[[f64; 3]]| -> Vec<[f64; 3]> {
        let r = j[0];
        j.iter()
            .map(|p| [p[0] - r[0], p[1] - r[1], p[2] - r[2]])
            .collect()
    };
    mpjpe(&align(pred), &align(target), vis)
}

/// Percentage of visible joints strictly within the threshold (millimeters).
pub fn pck3d(pred: &[[f64; 3]], target: &[[f64; 3]], vis: &[f64], thr_mm: f64) -> Result<f64> {
    check_joints(pred, target, vis)?;
    let mut hit = 0usize;
    let mut n = 0usize;
    for k in 0..pred.len() {
        if vis[k] > 0.5 {
            n += 1;
            if dist(pred[k], target[k]) * MM < thr_mm {
                hit += 1;
            }
        }
    }
    if n == 0 {
        return Err(MetricError::NoVisibleJoints);
    }
    Ok(hit as f64 / n as f64 * 100.0)
}

/// One person on one side of an evaluation frame. Predictions pass all-ones
/// visibility; targets carry their ground-truth flags.
#[derive(Clone, Debug)]
pub struct EvalPerson {
    pub id: usize,
    /// Metric 3D joints, root first.
    pub joints: Vec<[f64; 3]>,
    pub vis: Vec<f64>,
}

impl EvalPerson {
    fn root(&self) -> [f64; 3] {
        self.joints[0]
    }
}

#[derive(Clone, Debug, Default)]
pub struct EvalFrame {
    pub preds: Vec<EvalPerson>,
    pub targets: Vec<EvalPerson>,
}

fn check_frames(frames: &[EvalFrame]) -> Result<()> {
    for (t, f) in frames.iter().enumerate() {
        for side in [&f.preds, &f.targets] {
            let mut ids: Vec<usize> = side.iter().map(|p| p.id).collect();
            ids.sort_unstable();
            ids.dedup();
            if ids.len() != side.len() {
                return Err(MetricError::Shape(format!("duplicate ids in frame {t}")));
            }
            if side.iter().any(|p| p.joints.is_empty()) {
                return Err(MetricError::Shape(format!("empty person in frame {t}")));
            }
        }
    }
    Ok(())
}

/// Greedy person pairing by ascending root distance under a gate, the fixed
/// protocol all scene-level metrics share.
fn pair_people(
    preds: &[EvalPerson],
    targets: &[EvalPerson],
    gate_m: f64,
    keep: &[(usize, usize)],
) -> Vec<(usize, usize)> {
    let mut p_used = vec![false; preds.len()];
    let mut t_used = vec![false; targets.len()];
    let mut pairs = Vec::new();
    for &(pi, ti) in keep {
        if !p_used[pi] && !t_used[ti] && dist(preds[pi].root(), targets[ti].root()) <= gate_m {
            p_used[pi] = true;
            t_used[ti] = true;
            pairs.push((pi, ti));
        }
    }
    let mut order: Vec<(usize, usize)> = (0..preds.len())
        .flat_map(|i| (0..targets.len()).map(move |j| (i, j)))
        .collect();
    order.sort_by(|&(i, j), &(p, q)| {
        let a = dist(preds[i].root(), targets[j].root());
        let b = dist(preds[p].root(), targets[q].root());
        a.partial_cmp(&b).unwrap().then((i, j).cmp(&(p, q)))
    });
    for (i, j) in order {
        if !p_used[i] && !t_used[j] && dist(preds[i].root(), targets[j].root()) <= gate_m {
            p_used[i] = true;
            t_used[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    pairs
}

/// The person pairing every scene-level metric here uses, exposed so
/// report code can aggregate joint errors over the same matches.
pub fn frame_matches(frame: &EvalFrame, gate_m: f64) -> Vec<(usize, usize)> {
    pair_people(&frame.preds, &frame.targets, gate_m, &[])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub missed: usize,
}

impl Confusion {
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.missed == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.missed) as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// Joint-level detection quality at a distance threshold in meters. People
/// are paired per frame by root distance (1 m gate); a predicted joint is a
/// true positive when its counterpart is visible and within the threshold,
/// a false positive when visible and beyond it or when its person matched
/// nobody. Invisible target joints are ignored; visible joints without a
/// matched prediction count as misses.
pub fn f1_at(frames: &[EvalFrame], thr_m: f64) -> Result<Confusion> {
    check_frames(frames)?;
    let mut c = Confusion::default();
    for f in frames {
        let pairs = pair_people(&f.preds, &f.targets, 1.0, &[]);
        let mut p_used = vec![false; f.preds.len()];
        let mut t_used = vec![false; f.targets.len()];
        for (pi, ti) in pairs {
            p_used[pi] = true;
            t_used[ti] = true;
            let (p, t) = (&f.preds[pi], &f.targets[ti]);
            if p.joints.len() != t.joints.len() {
                return Err(MetricError::Shape("joint count mismatch".into()));
            }
            for k in 0..p.joints.len() {
                if t.vis[k] <= 0.5 {
                    continue;
                }
                if dist(p.joints[k], t.joints[k]) < thr_m {
                    c.tp += 1;
                } else {
                    c.fp += 1;
                    c.missed += 1;
                }
            }
        }
        for (pi, p) in f.preds.iter().enumerate() {
            if !p_used[pi] {
                c.fp += p.joints.len();
            }
        }
        for (ti, t) in f.targets.iter().enumerate() {
            if !t_used[ti] {
                c.missed += t.vis.iter().filter(|&&v| v > 0.5).count();
            }
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MotKind {
    Match,
    Miss,
    FalsePositive,
    IdSwitch,
}

#[derive(Clone, Copy, Debug)]
pub struct MotEvent {
    pub frame: usize,
    pub kind: MotKind,
    pub pred: Option<usize>,
    pub target: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct MotaSummary {
    /// Percent; at most 100, negative when errors outnumber detections.
    pub mota: f64,
    pub matches: usize,
    pub misses: usize,
    pub false_positives: usize,
    pub switches: usize,
    pub total_targets: usize,
    pub events: Vec<MotEvent>,
}

/// CLEAR-MOT accuracy on root positions. Correspondences persist while both
/// sides stay within the gate; leftovers pair greedily by distance. An id
/// switch is logged at the frame where a target's matched prediction id
/// changes, once per change.
pub fn mota(frames: &[EvalFrame], gate_m: f64) -> Result<MotaSummary> {
    check_frames(frames)?;
    let total_targets: usize = frames.iter().map(|f| f.targets.len()).sum();
    if total_targets == 0 {
        return Err(MetricError::NoTargets);
    }

    // target id -> pred id of the live correspondence / the last one ever.
    let mut live: Vec<(usize, usize)> = Vec::new();
    let mut last_pred: std::collections::HashMap<usize, usize> = std::collections::HashMap::new();
    let mut s = MotaSummary {
        mota: 0.0,
        matches: 0,
        misses: 0,
        false_positives: 0,
        switches: 0,
        total_targets,
        events: Vec::new(),
    };

    for (t, f) in frames.iter().enumerate() {
        // Keep last frame's pairs that still hold up.
        let keep: Vec<(usize, usize)> = live
            .iter()
            .filter_map(|&(tid, pid)| {
                let pi = f.preds.iter().position(|p| p.id == pid)?;
                let ti = f.targets.iter().position(|g| g.id == tid)?;
                Some((pi, ti))
            })
            .collect();
        let pairs = pair_people(&f.preds, &f.targets, gate_m, &keep);

        let mut p_used = vec![false; f.preds.len()];
        let mut t_used = vec![false; f.targets.len()];
        live.clear();
        for (pi, ti) in pairs {
            p_used[pi] = true;
            t_used[ti] = true;
            let (pid, tid) = (f.preds[pi].id, f.targets[ti].id);
            if let Some(&prev) = last_pred.get(&tid) {
                if prev != pid {
                    s.switches += 1;
                    s.events.push(MotEvent {
                        frame: t,
                        kind: MotKind::IdSwitch,
                        pred: Some(pid),
                        target: Some(tid),
                    });
                }
            }
            last_pred.insert(tid, pid);
            live.push((tid, pid));
            s.matches += 1;
            s.events.push(MotEvent {
                frame: t,
                kind: MotKind::Match,
                pred: Some(pid),
                target: Some(tid),
            });
        }
        for (pi, p) in f.preds.iter().enumerate() {
            if !p_used[pi] {
                s.false_positives += 1;
                s.events.push(MotEvent {
                    frame: t,
                    kind: MotKind::FalsePositive,
                    pred: Some(p.id),
                    target: None,
                });
            }
        }
        for (ti, g) in f.targets.iter().enumerate() {
            if !t_used[ti] {
                s.misses += 1;
                s.events.push(MotEvent {
                    frame: t,
                    kind: MotKind::Miss,
                    pred: None,
                    target: Some(g.id),
                });
            }
        }
    }

    s.mota = 100.0
        * (1.0 - (s.misses + s.false_positives + s.switches) as f64 / total_targets as f64);
    Ok(s)
}

/// Per-step forecast error: millimeters between predicted and true root at
/// each horizon step.
pub fn path_error(forecast: &[[f64; 3]], target: &[[f64; 3]]) -> Result<Vec<f64>> {
    if forecast.len() != target.len() {
        return Err(MetricError::Shape(format!(
            "{} forecast vs {} target steps",
            forecast.len(),
            target.len()
        )));
    }
    Ok(forecast
        .iter()
        .zip(target)
        .map(|(&p, &t)| dist(p, t) * MM)
        .collect())
}

/// One aggregated number for a report table.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub metric: String,
    pub sequence: String,
    /// Forecast horizon in frames; zero for non-forecast metrics.
    pub horizon: usize,
    pub value: f64,
    pub count: usize,
}

pub fn to_csv(rows: &[CsvRow]) -> String {
    let mut out = String::from("metric,sequence,horizon,value,count\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.metric, r.sequence, r.horizon, r.value, r.count
        ));
    }
    out
}
