//! Whole-video identity assembly. Consecutive snippets overlap in exactly
//! one frame; their trajectories are paired there by 3D pose distance.
//! Tracks spawn and terminate on the occurrence probability, and forecast
//! poses ride along as provisional entries until a later snippet observes
//! those frames. A frame-to-frame variant serves as the baseline for models
//! that see a single frame at a time.

use std::collections::HashMap;

use thiserror::Error;

use crate::geometry::{Camera, GeomError, Pose};
use crate::matching::{hungarian, CostMatrix, MatchError};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("snippets share no single common frame: next starts at {got}, expected {expected}")]
    NoCommonFrame { expected: usize, got: usize },
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Geometry(#[from] GeomError),
    #[error(transparent)]
    Matching(#[from] MatchError),
}

pub type Result<T> = std::result::Result<T, TrackError>;

/// Decoded model output for one snippet placed on the video timeline.
#[derive(Clone, Debug)]
pub struct SnippetResult<S> {
    /// Video index of the first observed frame.
    pub start: usize,
    pub frames_obs: usize,
    pub frames_fut: usize,
    /// `[slot][t]`, `t` spanning observed then forecast frames.
    pub trajectories: Vec<Vec<Pose<S>>>,
}

impl<S: Scalar> SnippetResult<S> {
    pub fn new(
        start: usize,
        frames_obs: usize,
        frames_fut: usize,
        trajectories: Vec<Vec<Pose<S>>>,
    ) -> Result<Self> {
        if frames_obs == 0 {
            return Err(TrackError::Shape("snippet observes no frames".into()));
        }
        let len = frames_obs + frames_fut;
        if let Some(bad) = trajectories.iter().position(|tr| tr.len() != len) {
            return Err(TrackError::Shape(format!(
                "slot {bad} has {} poses, snippet spans {len} frames",
                trajectories[bad].len()
            )));
        }
        Ok(SnippetResult {
            start,
            frames_obs,
            frames_fut,
            trajectories,
        })
    }

    /// Video index of the frame shared with the following snippet.
    pub fn common_frame(&self) -> usize {
        self.start + self.frames_obs - 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackState {
    Active,
    Terminated,
}

#[derive(Clone, Debug)]
pub struct TrackEntry<S> {
    pub frame: usize,
    pub pose: Pose<S>,
    /// False for forecast poses that no later snippet has confirmed.
    pub observed: bool,
}

#[derive(Clone, Debug)]
pub struct Track<S> {
    pub id: usize,
    /// Strictly increasing frame indices, at most one entry per frame.
    pub entries: Vec<TrackEntry<S>>,
    pub state: TrackState,
}

impl<S: Scalar> Track<S> {
    fn new(id: usize) -> Self {
        Track {
            id,
            entries: Vec::new(),
            state: TrackState::Active,
        }
    }

    /// Insert or replace the entry at `frame`, keeping frames sorted.
    /// A later snippet always wins a frame it reaches again.
    fn upsert(&mut self, frame: usize, pose: Pose<S>, observed: bool) {
        let entry = TrackEntry {
            frame,
            pose,
            observed,
        };
        match self.entries.binary_search_by_key(&frame, |e| e.frame) {
            Ok(i) => self.entries[i] = entry,
            Err(i) => self.entries.insert(i, entry),
        }
    }

    pub fn pose_at(&self, frame: usize) -> Option<&Pose<S>> {
        self.entries
            .binary_search_by_key(&frame, |e| e.frame)
            .ok()
            .map(|i| &self.entries[i].pose)
    }

    fn terminate(&mut self) {
        self.state = TrackState::Terminated;
        // Forecasts the pipeline never confirmed die with the track.
        self.entries.retain(|e| e.observed);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrackCfg {
    /// Association gate: mean joint distance in meters.
    pub threshold: f64,
    /// Occurrence probability needed to keep, spawn or match a pose.
    pub tau: f64,
    /// Optimal assignment at the common frame instead of greedy
    /// nearest-first pairing.
    pub hungarian: bool,
}

impl Default for TrackCfg {
    fn default() -> Self {
        TrackCfg {
            threshold: 0.5,
            tau: 0.5,
            hungarian: false,
        }
    }
}

/// Mean over joints of the Euclidean distance between the lifted 3D
/// skeletons.
pub fn pose_distance<S: Scalar>(a: &Pose<S>, b: &Pose<S>, cam: &Camera<S>) -> Result<f64> {
    if a.num_joints() != b.num_joints() {
        return Err(TrackError::Shape(format!(
            "poses with {} vs {} joints",
            a.num_joints(),
            b.num_joints()
        )));
    }
    let ja = a.joints_3d(cam)?;
    let jb = b.joints_3d(cam)?;
    let mut sum = 0.0;
    for (p, q) in ja.iter().zip(&jb) {
        let d = [
            (p[0] - q[0]).f64(),
            (p[1] - q[1]).f64(),
            (p[2] - q[2]).f64(),
        ];
        sum += (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    }
    Ok(sum / ja.len() as f64)
}

/// Pair items of two sets given their distance matrix, leaving anything
/// farther than the gate unpaired. Greedy takes pairs nearest first; the
/// optimal variant minimizes the total distance before gating.
fn pair_up(dist: &[Vec<f64>], threshold: f64, optimal: bool) -> Result<Vec<(usize, usize)>> {
    let na = dist.len();
    let nb = if na == 0 { 0 } else { dist[0].len() };
    if na == 0 || nb == 0 {
        return Ok(Vec::new());
    }
    let mut pairs = Vec::new();
    if optimal {
        // Orient so the smaller side plays the exhaustive role.
        let swap = nb > na;
        let (rows, cols) = if swap { (nb, na) } else { (na, nb) };
        let cost = CostMatrix::from_fn(rows, cols, |i, j| {
            Ok(if swap { dist[j][i] } else { dist[i][j] })
        })
        .map_err(MatchError::from)?;
        let assign = hungarian(&cost)?;
        for (j, &i) in assign.pred_for_target.iter().enumerate() {
            let (a, b) = if swap { (j, i) } else { (i, j) };
            if dist[a][b] <= threshold {
                pairs.push((a, b));
            }
        }
    } else {
        let mut order: Vec<(usize, usize)> = (0..na)
            .flat_map(|i| (0..nb).map(move |j| (i, j)))
            .collect();
        order.sort_by(|&(i, j), &(p, q)| {
            dist[i][j]
                .partial_cmp(&dist[p][q])
                .unwrap()
                .then((i, j).cmp(&(p, q)))
        });
        let (mut a_used, mut b_used) = (vec![false; na], vec![false; nb]);
        for (i, j) in order {
            if dist[i][j] > threshold {
                break;
            }
            if !a_used[i] && !b_used[j] {
                a_used[i] = true;
                b_used[j] = true;
                pairs.push((i, j));
            }
        }
    }
    pairs.sort_unstable();
    Ok(pairs)
}

fn eligible<S: Scalar>(snip: &SnippetResult<S>, t: usize, tau: f64) -> Vec<usize> {
    (0..snip.trajectories.len())
        .filter(|&s| snip.trajectories[s][t].occurrence.f64() >= tau)
        .collect()
}

/// Pair the trajectories of two consecutive snippets at their single common
/// frame. Returns `(prev slot, next slot)` pairs; slots whose occurrence
/// falls below `tau` at the common frame take no part.
pub fn associate<S: Scalar>(
    prev: &SnippetResult<S>,
    next: &SnippetResult<S>,
    cam: &Camera<S>,
    cfg: &TrackCfg,
) -> Result<Vec<(usize, usize)>> {
    let common = prev.common_frame();
    if next.start != common {
        return Err(TrackError::NoCommonFrame {
            expected: common,
            got: next.start,
        });
    }
    let a = eligible(prev, prev.frames_obs - 1, cfg.tau);
    let b = eligible(next, 0, cfg.tau);
    let mut dist = vec![vec![0.0; b.len()]; a.len()];
    for (i, &pa) in a.iter().enumerate() {
        for (j, &pb) in b.iter().enumerate() {
            dist[i][j] = pose_distance(
                &prev.trajectories[pa][prev.frames_obs - 1],
                &next.trajectories[pb][0],
                cam,
            )?;
        }
    }
    Ok(pair_up(&dist, cfg.threshold, cfg.hungarian)?
        .into_iter()
        .map(|(i, j)| (a[i], b[j]))
        .collect())
}

/// Append one snippet's poses for a slot to a track, skipping frames where
/// the occurrence falls below `tau`.
fn extend_track<S: Scalar>(track: &mut Track<S>, snip: &SnippetResult<S>, slot: usize, tau: f64) {
    for (t, pose) in snip.trajectories[slot].iter().enumerate() {
        if pose.occurrence.f64() >= tau {
            track.upsert(snip.start + t, pose.clone(), t < snip.frames_obs);
        }
    }
}

/// Fold [`associate`] over snippets tiling a video with single-frame
/// overlaps. Fresh ids are issued in slot order, never reused; terminated
/// tracks drop their unconfirmed forecasts.
pub fn track_video<S: Scalar>(
    snippets: &[SnippetResult<S>],
    cam: &Camera<S>,
    cfg: &TrackCfg,
) -> Result<Vec<Track<S>>> {
    let mut tracks: Vec<Track<S>> = Vec::new();
    let Some(first) = snippets.first() else {
        return Ok(tracks);
    };

    // The opening snippet has no common frame yet; every slot that ever
    // rises above tau in an observed frame starts a track.
    let mut active: HashMap<usize, usize> = HashMap::new();
    for (slot, traj) in first.trajectories.iter().enumerate() {
        if traj[..first.frames_obs]
            .iter()
            .any(|p| p.occurrence.f64() >= cfg.tau)
        {
            let mut tr = Track::new(tracks.len());
            extend_track(&mut tr, first, slot, cfg.tau);
            active.insert(slot, tr.id);
            tracks.push(tr);
        }
    }

    for pair in snippets.windows(2) {
        let (prev, next) = (&pair[0], &pair[1]);
        let pairs = associate(prev, next, cam, cfg)?;

        let mut next_active: HashMap<usize, usize> = HashMap::new();
        let mut prev_matched = vec![false; prev.trajectories.len()];
        for (ps, ns) in pairs {
            prev_matched[ps] = true;
            if let Some(&id) = active.get(&ps) {
                next_active.insert(ns, id);
            }
        }
        for (&slot, &id) in &active {
            if !prev_matched[slot] {
                tracks[id].terminate();
            }
        }
        for ns in eligible(next, 0, cfg.tau) {
            next_active
                .entry(ns)
                .or_insert_with(|| {
                    let tr = Track::new(tracks.len());
                    tracks.push(tr);
                    tracks.len() - 1
                });
        }
        for (&slot, &id) in &next_active {
            extend_track(&mut tracks[id], next, slot, cfg.tau);
        }
        active = next_active;
    }
    Ok(tracks)
}

/// Frame-to-frame tracking for single-frame models: optimal assignment on
/// 3D pose distance between consecutive frames, with the same gate, spawn
/// and terminate rules. One frame of dropout is enough to cut a track.
pub fn track_single_frame<S: Scalar>(
    frames: &[Vec<Pose<S>>],
    cam: &Camera<S>,
    cfg: &TrackCfg,
) -> Result<Vec<Track<S>>> {
    let mut tracks: Vec<Track<S>> = Vec::new();
    // Track index paired with the pose it showed at the previous frame.
    let mut active: Vec<usize> = Vec::new();

    for (f, poses) in frames.iter().enumerate() {
        let cur: Vec<usize> = (0..poses.len())
            .filter(|&i| poses[i].occurrence.f64() >= cfg.tau)
            .collect();

        let mut dist = vec![vec![0.0; cur.len()]; active.len()];
        for (i, &id) in active.iter().enumerate() {
            let last = &tracks[id].entries.last().unwrap().pose;
            for (j, &p) in cur.iter().enumerate() {
                dist[i][j] = pose_distance(last, &poses[p], cam)?;
            }
        }
        let pairs = pair_up(&dist, cfg.threshold, true)?;

        let mut next_active = Vec::new();
        let mut track_matched = vec![false; active.len()];
        let mut pose_matched = vec![false; cur.len()];
        for (i, j) in pairs {
            track_matched[i] = true;
            pose_matched[j] = true;
            let id = active[i];
            tracks[id].upsert(f, poses[cur[j]].clone(), true);
            next_active.push(id);
        }
        for (i, &id) in active.iter().enumerate() {
            if !track_matched[i] {
                tracks[id].terminate();
            }
        }
        for (j, &p) in cur.iter().enumerate() {
            if !pose_matched[j] {
                let mut tr = Track::new(tracks.len());
                tr.upsert(f, poses[p].clone(), true);
                next_active.push(tr.id);
                tracks.push(tr);
            }
        }
        active = next_active;
    }
    Ok(tracks)
}
