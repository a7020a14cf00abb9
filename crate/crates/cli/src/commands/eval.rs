//! `eval`: run the model (or the ground truth itself) over a split, track
//! each scene, and report pose, detection, tracking and forecast metrics
//! as CSV rows keyed by (metric, sequence, horizon).
//!
//! Protocol notes that matter for comparisons:
//! * scenes are tracked whole, but pose/detection/tracking metrics count
//!   only frames inside the split's snippet windows;
//! * PCK is detection-aware: every visible target joint in a scored frame
//!   lands in the denominator whether or not anything matched it;
//! * forecast errors are per horizon step, next to a constant-last-pose
//!   baseline over the same samples.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use snipper_core::geometry::Pose;
use snipper_core::metrics::{
    self, frame_matches, to_csv, Confusion, CsvRow, EvalFrame, EvalPerson,
};
use snipper_core::model::ModelCfg;
use snipper_core::rng::Rng;
use snipper_core::synth::RenderedSequence;
use snipper_core::tensor::ParamStore;
use snipper_core::tracking::{SnippetResult, Track, TrackCfg};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{gt_pose, Dataset};
use crate::runner::{tile_starts, track_snippets, Runner};
use crate::CliError;

pub enum PredSource<'a> {
    /// Ground-truth annotations fed through the same tracking/metric path.
    Oracle,
    Model(&'a Runner),
}

pub struct EvalOutcome {
    pub rows: Vec<CsvRow>,
    pub csv: PathBuf,
}

/// Build the runner a checkpoint describes, refusing configs that disagree.
pub fn load_runner(cfg: &RunConfig, path: &str) -> Result<Runner, CliError> {
    if path.is_empty() {
        return Err(CliError::Config(
            "no checkpoint configured (set eval.checkpoint or track.checkpoint)".into(),
        ));
    }
    let model_cfg = cfg.model_cfg()?;
    let ck = checkpoint::load(Path::new(path))?;
    if ck.echo != cfg.model_echo() {
        return Err(CliError::Config(format!(
            "checkpoint and config describe different models:\n{}vs\n{}",
            ck.echo,
            cfg.model_echo()
        )));
    }
    let model = snipper_core::model::Model::new(model_cfg.clone())?;
    let mut store = ParamStore::new();
    model.init_params(&mut store, &mut Rng::seed_from(0))?;
    checkpoint::apply_params(&ck, &mut store)?;
    Runner::new(model_cfg, store)
}

/// A pose with occurrence zero for padding beyond the sequence end.
fn absent_pose(nj: usize) -> Pose<f64> {
    Pose::from_joints(&vec![[0.0, 0.0, 1.0]; nj], vec![0.0; nj], 0.0)
        .expect("constant pose is well-formed")
}

/// Ground truth packaged exactly like model output, slot = person.
fn oracle_snippets(seq: &RenderedSequence, cfg: &ModelCfg) -> Vec<SnippetResult<f64>> {
    let (t_obs, t_fut) = (cfg.snippet_frames, cfg.forecast_frames);
    let starts = if t_obs == 1 {
        (0..seq.meta.frames).collect()
    } else {
        tile_starts(seq.meta.frames, t_obs)
    };
    starts
        .into_iter()
        .map(|start| {
            let trajectories = (0..seq.people())
                .map(|p| {
                    (0..t_obs + t_fut)
                        .map(|dt| {
                            if start + dt < seq.meta.frames {
                                gt_pose(seq, start + dt, p)
                            } else {
                                absent_pose(cfg.num_joints)
                            }
                        })
                        .collect()
                })
                .collect();
            SnippetResult::new(start, t_obs, t_fut, trajectories)
                .expect("oracle snippets are well-formed")
        })
        .collect()
}

/// Matched-pair pose error sums plus the detection-aware PCK denominator.
#[derive(Clone, Copy, Default)]
struct PoseAcc {
    err_sum: f64,
    rel_sum: f64,
    matched_joints: usize,
    pck_hits: usize,
    visible_joints: usize,
}

#[derive(Clone, Copy, Default)]
struct MotAcc {
    errors: usize,
    targets: usize,
}

#[derive(Clone, Default)]
struct ForecastAcc {
    err_sums: Vec<f64>,
    base_sums: Vec<f64>,
    counts: Vec<usize>,
}

impl ForecastAcc {
    fn sized(t_fut: usize) -> Self {
        ForecastAcc {
            err_sums: vec![0.0; t_fut],
            base_sums: vec![0.0; t_fut],
            counts: vec![0; t_fut],
        }
    }

    fn merge(&mut self, other: &ForecastAcc) {
        for k in 0..self.counts.len() {
            self.err_sums[k] += other.err_sums[k];
            self.base_sums[k] += other.base_sums[k];
            self.counts[k] += other.counts[k];
        }
    }
}

struct SceneScores {
    pose: PoseAcc,
    confusion: Confusion,
    mot: MotAcc,
    forecast: ForecastAcc,
}

/// Frames of one scene that belong to the split.
fn window_frames(refs: &[snipper_core::synth::SnippetRef], scene: usize, len: usize, frames: usize) -> BTreeSet<usize> {
    let mut set = BTreeSet::new();
    for r in refs.iter().filter(|r| r.sequence == scene) {
        for t in r.start..(r.start + len).min(frames) {
            set.insert(t);
        }
    }
    set
}

fn eval_frame(seq: &RenderedSequence, tracks: &[Track<f64>], t: usize) -> EvalFrame {
    let cam = &seq.meta.cam;
    let preds = tracks
        .iter()
        .filter_map(|tr| {
            let e = tr.entries.iter().find(|e| e.frame == t && e.observed)?;
            Some(EvalPerson {
                id: tr.id,
                joints: e.pose.joints_3d(cam).ok()?,
                vis: vec![1.0; e.pose.num_joints()],
            })
        })
        .collect();
    let targets = (0..seq.people())
        .filter(|&p| seq.annots[t][p].present)
        .map(|p| EvalPerson {
            id: p,
            joints: gt_pose(seq, t, p)
                .joints_3d(cam)
                .expect("stored depths are positive"),
            vis: seq.annots[t][p].vis.iter().map(|&v| f64::from(v)).collect(),
        })
        .collect();
    EvalFrame { preds, targets }
}

fn pose_scores(frames: &[EvalFrame], gate_m: f64, pck_mm: f64) -> Result<PoseAcc, CliError> {
    let mut acc = PoseAcc::default();
    for f in frames {
        for t in &f.targets {
            acc.visible_joints += t.vis.iter().filter(|&&v| v > 0.5).count();
        }
        for (pi, ti) in frame_matches(f, gate_m) {
            let (p, t) = (&f.preds[pi], &f.targets[ti]);
            let n_vis = t.vis.iter().filter(|&&v| v > 0.5).count();
            if n_vis == 0 {
                continue;
            }
            let err = metrics::mpjpe(&p.joints, &t.joints, &t.vis)?;
            let rel = metrics::mpjpe_rel(&p.joints, &t.joints, &t.vis)?;
            let pck = metrics::pck3d(&p.joints, &t.joints, &t.vis, pck_mm)?;
            acc.err_sum += err * n_vis as f64;
            acc.rel_sum += rel * n_vis as f64;
            acc.matched_joints += n_vis;
            acc.pck_hits += (pck * n_vis as f64 / 100.0).round() as usize;
        }
    }
    Ok(acc)
}

/// Greedy unique slot-to-person matching at the last observed frame, then
/// per-step forecast errors against the ground-truth future, with the
/// held-last-pose baseline on the same samples.
fn forecast_scores(
    seq: &RenderedSequence,
    snippets: &[SnippetResult<f64>],
    t_fut: usize,
    tau: f64,
    gate_m: f64,
) -> Result<ForecastAcc, CliError> {
    let mut acc = ForecastAcc::sized(t_fut);
    let cam = &seq.meta.cam;
    let dist = |a: [f64; 3], b: [f64; 3]| {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    };
    for s in snippets {
        let f_obs = s.common_frame();
        let people: Vec<(usize, [f64; 3])> = (0..seq.people())
            .filter(|&p| seq.annots[f_obs][p].present)
            .map(|p| Ok((p, gt_pose(seq, f_obs, p).root_3d(cam)?)))
            .collect::<Result<_, CliError>>()?;
        let mut cands = Vec::new();
        for (slot, traj) in s.trajectories.iter().enumerate() {
            let obs = &traj[s.frames_obs - 1];
            if obs.occurrence < tau {
                continue;
            }
            let pr = obs.root_3d(cam)?;
            for &(p, gr) in &people {
                let d = dist(pr, gr);
                if d <= gate_m {
                    cands.push((d, slot, p));
                }
            }
        }
        cands.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
        let mut slot_used = vec![false; s.trajectories.len()];
        let mut person_used = vec![false; seq.people()];
        for (_, slot, p) in cands {
            if slot_used[slot] || person_used[p] {
                continue;
            }
            slot_used[slot] = true;
            person_used[p] = true;
            let held = gt_pose(seq, f_obs, p).root_3d(cam)?;
            for k in 1..=t_fut {
                let f = f_obs + k;
                if f >= seq.meta.frames || !seq.annots[f][p].present {
                    continue;
                }
                let gt = gt_pose(seq, f, p).root_3d(cam)?;
                let pred = s.trajectories[slot][s.frames_obs - 1 + k].root_3d(cam)?;
                acc.err_sums[k - 1] += dist(pred, gt) * 1000.0;
                acc.base_sums[k - 1] += dist(held, gt) * 1000.0;
                acc.counts[k - 1] += 1;
            }
        }
    }
    Ok(acc)
}

fn score_scene(
    cfg: &RunConfig,
    model_cfg: &ModelCfg,
    seq: &RenderedSequence,
    snippets: &[SnippetResult<f64>],
    frames: &BTreeSet<usize>,
) -> Result<SceneScores, CliError> {
    let tcfg = TrackCfg {
        threshold: cfg.eval.track_threshold_m,
        tau: cfg.eval.tau,
        ..TrackCfg::default()
    };
    let tracks = track_snippets(snippets, model_cfg.snippet_frames, seq, &tcfg)?;
    let eval_frames: Vec<EvalFrame> = frames.iter().map(|&t| eval_frame(seq, &tracks, t)).collect();

    let pose = pose_scores(&eval_frames, cfg.eval.gate_m, cfg.eval.pck_mm)?;
    let confusion = metrics::f1_at(&eval_frames, cfg.eval.f1_thr_mm / 1000.0)?;
    let mot = match metrics::mota(&eval_frames, cfg.eval.gate_m) {
        Ok(s) => MotAcc {
            errors: s.misses + s.false_positives + s.switches,
            targets: s.total_targets,
        },
        Err(snipper_core::metrics::MetricError::NoTargets) => MotAcc::default(),
        Err(e) => return Err(e.into()),
    };
    let forecast = forecast_scores(
        seq,
        snippets,
        model_cfg.forecast_frames,
        cfg.eval.tau,
        cfg.eval.gate_m,
    )?;
    Ok(SceneScores {
        pose,
        confusion,
        mot,
        forecast,
    })
}

fn push_rows(rows: &mut Vec<CsvRow>, name: &str, s: &SceneScores) {
    let mut row = |metric: &str, horizon: usize, value: f64, count: usize| {
        rows.push(CsvRow {
            metric: metric.into(),
            sequence: name.into(),
            horizon,
            value,
            count,
        });
    };
    if s.pose.matched_joints > 0 {
        let n = s.pose.matched_joints as f64;
        row("mpjpe", 0, s.pose.err_sum / n, s.pose.matched_joints);
        row("mpjpe_rel", 0, s.pose.rel_sum / n, s.pose.matched_joints);
    }
    if s.pose.visible_joints > 0 {
        row(
            "pck3d",
            0,
            100.0 * s.pose.pck_hits as f64 / s.pose.visible_joints as f64,
            s.pose.visible_joints,
        );
    }
    let c = &s.confusion;
    row("precision", 0, c.precision(), c.tp + c.fp);
    row("recall", 0, c.recall(), c.tp + c.missed);
    row("f1", 0, c.f1(), c.tp + c.fp + c.missed);
    if s.mot.targets > 0 {
        row(
            "mota",
            0,
            100.0 * (1.0 - s.mot.errors as f64 / s.mot.targets as f64),
            s.mot.targets,
        );
    }
    for k in 0..s.forecast.counts.len() {
        let n = s.forecast.counts[k];
        if n > 0 {
            row("path_error", k + 1, s.forecast.err_sums[k] / n as f64, n);
            row("path_baseline", k + 1, s.forecast.base_sums[k] / n as f64, n);
        }
    }
}

pub fn evaluate(
    cfg: &RunConfig,
    ds: &Dataset,
    source: &PredSource,
) -> Result<Vec<CsvRow>, CliError> {
    let model_cfg = cfg.model_cfg()?;
    let refs = ds.split(&cfg.eval.split)?;
    if refs.is_empty() {
        println!("warning: split {} is empty, nothing to evaluate", cfg.eval.split);
        return Ok(Vec::new());
    }
    let mut rows = Vec::new();
    let mut all = SceneScores {
        pose: PoseAcc::default(),
        confusion: Confusion::default(),
        mot: MotAcc::default(),
        forecast: ForecastAcc::sized(model_cfg.forecast_frames),
    };
    for scene in ds.split_scenes(&cfg.eval.split)? {
        let seq = &ds.seqs[scene];
        let snippets = match source {
            PredSource::Oracle => oracle_snippets(seq, &model_cfg),
            PredSource::Model(runner) => runner.infer_tiled(seq)?,
        };
        let frames = window_frames(refs, scene, model_cfg.t_total(), seq.meta.frames);
        let s = score_scene(cfg, &model_cfg, seq, &snippets, &frames)?;
        push_rows(&mut rows, &ds.names[scene], &s);

        all.pose.err_sum += s.pose.err_sum;
        all.pose.rel_sum += s.pose.rel_sum;
        all.pose.matched_joints += s.pose.matched_joints;
        all.pose.pck_hits += s.pose.pck_hits;
        all.pose.visible_joints += s.pose.visible_joints;
        all.confusion.tp += s.confusion.tp;
        all.confusion.fp += s.confusion.fp;
        all.confusion.missed += s.confusion.missed;
        all.mot.errors += s.mot.errors;
        all.mot.targets += s.mot.targets;
        all.forecast.merge(&s.forecast);
    }
    push_rows(&mut rows, "all", &all);
    Ok(rows)
}

pub fn cmd_eval(cfg: &RunConfig, out: &Path, _force: bool) -> Result<EvalOutcome, CliError> {
    let model_cfg = cfg.model_cfg()?;
    let runner;
    let source = if cfg.eval.oracle {
        PredSource::Oracle
    } else {
        runner = load_runner(cfg, &cfg.eval.checkpoint)?;
        PredSource::Model(&runner)
    };
    let ds = Dataset::load(cfg, &model_cfg)?;
    let rows = evaluate(cfg, &ds, &source)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    let csv = out.join("metrics.csv");
    super::write_file(&csv, &to_csv(&rows))?;
    for r in rows.iter().filter(|r| r.sequence == "all") {
        println!("{} (h{}): {:.4} over {}", r.metric, r.horizon, r.value, r.count);
    }
    println!("wrote {}", csv.display());
    Ok(EvalOutcome { rows, csv })
}
