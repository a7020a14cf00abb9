//! Run configuration: a flat `key = value` text format with `[section]`
//! headers. Every key has a default; unknown sections, unknown keys,
//! duplicates and unparsable values are hard errors so a typo cannot
//! silently change an experiment.

use std::collections::BTreeMap;
use std::path::PathBuf;

use snipper_core::attention::AttentionVariant;
use snipper_core::model::ModelCfg;
use snipper_core::synth::Script;

use crate::CliError;

pub use snipper_core::synth::NUM_JOINTS;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetCfg {
    pub dir: PathBuf,
    pub scenes: usize,
    pub people: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Cycled over scene index.
    pub scripts: Vec<Script>,
    pub root_speed: f64,
    pub angular_vel: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitsCfg {
    pub stride: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSec {
    pub channels: usize,
    pub heads: usize,
    pub k_points: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub queries: usize,
    pub snippet_frames: usize,
    pub forecast_frames: usize,
    pub strides: Vec<usize>,
    pub variant: AttentionVariant,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainCfg {
    pub steps: u64,
    pub lr: f64,
    pub optimizer: String,
    pub momentum: f64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Heatmap Gaussian width in grid cells.
    pub sigma: f64,
    pub w_occ: f64,
    pub w_traj: f64,
    pub w_vis: f64,
    pub w_offset: f64,
    pub w_smooth: f64,
    pub w_heatmap: f64,
    /// Checkpoint to continue from; empty starts fresh.
    pub resume: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalCfg {
    pub split: String,
    pub checkpoint: String,
    /// Ground-truth poses as predictions, no model involved.
    pub oracle: bool,
    pub pck_mm: f64,
    pub f1_thr_mm: f64,
    pub gate_m: f64,
    pub track_threshold_m: f64,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackSec {
    pub split: String,
    pub checkpoint: String,
    pub threshold_m: f64,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblateCfg {
    pub seeds: u64,
    pub steps: u64,
    pub variants: Vec<AttentionVariant>,
    pub snippet_set: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetCfg,
    pub splits: SplitsCfg,
    pub model: ModelSec,
    pub train: TrainCfg,
    pub eval: EvalCfg,
    pub track: TrackSec,
    pub ablate: AblateCfg,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetCfg {
                dir: PathBuf::from("data"),
                scenes: 20,
                people: 2,
                frames: 13,
                width: 64,
                height: 64,
                seed: 1,
                scripts: vec![Script::Crossing, Script::Free],
                root_speed: 0.06,
                angular_vel: 0.25,
            },
            splits: SplitsCfg {
                stride: 2,
                val_fraction: 0.25,
                seed: 9,
            },
            model: ModelSec {
                channels: 48,
                heads: 6,
                k_points: 2,
                enc_layers: 2,
                dec_layers: 2,
                queries: 6,
                snippet_frames: 4,
                forecast_frames: 1,
                strides: vec![4, 8],
                variant: AttentionVariant::Full,
            },
            train: TrainCfg {
                steps: 50,
                lr: 3e-4,
                optimizer: "adam".into(),
                momentum: 0.9,
                checkpoint_every: 0,
                seed: 5,
                sigma: 1.0,
                w_occ: 1.0,
                w_traj: 1.0,
                w_vis: 1.0,
                w_offset: 1.0,
                w_smooth: 1.0,
                w_heatmap: 1.0,
                resume: String::new(),
            },
            eval: EvalCfg {
                split: "val".into(),
                checkpoint: String::new(),
                oracle: false,
                pck_mm: 150.0,
                f1_thr_mm: 150.0,
                gate_m: 1.0,
                track_threshold_m: 0.5,
                tau: 0.5,
            },
            track: TrackSec {
                split: "val".into(),
                checkpoint: String::new(),
                threshold_m: 0.5,
                tau: 0.5,
            },
            ablate: AblateCfg {
                seeds: 3,
                steps: 200,
                variants: vec![
                    AttentionVariant::Neighbor,
                    AttentionVariant::Direct3d,
                    AttentionVariant::Full,
                ],
                snippet_set: vec![1, 4],
            },
        }
    }
}

fn parse_script(s: &str) -> Option<Script> {
    match s {
        "free" => Some(Script::Free),
        "static" => Some(Script::Static),
        "crossing" => Some(Script::Crossing),
        "exit_enter" => Some(Script::ExitEnter),
        _ => None,
    }
}

pub fn script_name(s: Script) -> &'static str {
    match s {
        Script::Free => "free",
        Script::Static => "static",
        Script::Crossing => "crossing",
        Script::ExitEnter => "exit_enter",
    }
}

/// Raw parsed file: `section.key -> (value, line)`, strict about shape.
fn raw_entries(text: &str) -> Result<BTreeMap<String, (String, usize)>, CliError> {
    let mut out = BTreeMap::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        if let Some(name) = s.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| CliError::Config(format!("line {line}: unterminated section")))?
                .trim();
            if name.is_empty() {
                return Err(CliError::Config(format!("line {line}: empty section name")));
            }
            section = name.to_string();
            continue;
        }
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {line}: expected key = value")))?;
        if section.is_empty() {
            return Err(CliError::Config(format!(
                "line {line}: key outside any [section]"
            )));
        }
        let key = format!("{section}.{}", k.trim());
        if out.insert(key.clone(), (v.trim().to_string(), line)).is_some() {
            return Err(CliError::Config(format!("line {line}: duplicate key {key}")));
        }
    }
    Ok(out)
}

/// Typed take-out of one key; whatever is left at the end is unknown.
struct Keys {
    map: BTreeMap<String, (String, usize)>,
}

impl Keys {
    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        self.map.remove(key)
    }

    fn set<T>(
        &mut self,
        key: &str,
        out: &mut T,
        parse: impl Fn(&str) -> Option<T>,
    ) -> Result<(), CliError> {
        if let Some((v, line)) = self.take(key) {
            *out = parse(&v)
                .ok_or_else(|| CliError::Config(format!("line {line}: bad value for {key}: {v}")))?;
        }
        Ok(())
    }

    fn finish(self) -> Result<(), CliError> {
        if let Some((key, (_, line))) = self.map.into_iter().next() {
            return Err(CliError::Config(format!("line {line}: unknown key {key}")));
        }
        Ok(())
    }
}

fn num<T: std::str::FromStr>(s: &str) -> Option<T> {
    s.parse().ok()
}

fn list<T: std::str::FromStr>(s: &str) -> Option<Vec<T>> {
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut k = Keys {
            map: raw_entries(text)?,
        };
        let mut c = RunConfig::default();

        let d = &mut c.dataset;
        k.set("dataset.dir", &mut d.dir, |s| Some(PathBuf::from(s)))?;
        k.set("dataset.scenes", &mut d.scenes, num)?;
        k.set("dataset.people", &mut d.people, num)?;
        k.set("dataset.frames", &mut d.frames, num)?;
        k.set("dataset.width", &mut d.width, num)?;
        k.set("dataset.height", &mut d.height, num)?;
        k.set("dataset.seed", &mut d.seed, num)?;
        k.set("dataset.scripts", &mut d.scripts, |s| {
            let v: Option<Vec<Script>> = s.split(',').map(|p| parse_script(p.trim())).collect();
            v.filter(|v| !v.is_empty())
        })?;
        k.set("dataset.root_speed", &mut d.root_speed, num)?;
        k.set("dataset.angular_vel", &mut d.angular_vel, num)?;

        let sp = &mut c.splits;
        k.set("splits.stride", &mut sp.stride, num)?;
        k.set("splits.val_fraction", &mut sp.val_fraction, num)?;
        k.set("splits.seed", &mut sp.seed, num)?;

        let m = &mut c.model;
        k.set("model.channels", &mut m.channels, num)?;
        k.set("model.heads", &mut m.heads, num)?;
        k.set("model.k_points", &mut m.k_points, num)?;
        k.set("model.enc_layers", &mut m.enc_layers, num)?;
        k.set("model.dec_layers", &mut m.dec_layers, num)?;
        k.set("model.queries", &mut m.queries, num)?;
        k.set("model.snippet_frames", &mut m.snippet_frames, num)?;
        k.set("model.forecast_frames", &mut m.forecast_frames, num)?;
        k.set("model.strides", &mut m.strides, list)?;
        k.set("model.variant", &mut m.variant, AttentionVariant::parse)?;

        let t = &mut c.train;
        k.set("train.steps", &mut t.steps, num)?;
        k.set("train.lr", &mut t.lr, num)?;
        k.set("train.optimizer", &mut t.optimizer, |s| {
            matches!(s, "adam" | "sgd").then(|| s.to_string())
        })?;
        k.set("train.momentum", &mut t.momentum, num)?;
        k.set("train.checkpoint_every", &mut t.checkpoint_every, num)?;
        k.set("train.seed", &mut t.seed, num)?;
        k.set("train.sigma", &mut t.sigma, num)?;
        k.set("train.w_occ", &mut t.w_occ, num)?;
        k.set("train.w_traj", &mut t.w_traj, num)?;
        k.set("train.w_vis", &mut t.w_vis, num)?;
        k.set("train.w_offset", &mut t.w_offset, num)?;
        k.set("train.w_smooth", &mut t.w_smooth, num)?;
        k.set("train.w_heatmap", &mut t.w_heatmap, num)?;
        k.set("train.resume", &mut t.resume, |s| Some(s.to_string()))?;

        let e = &mut c.eval;
        k.set("eval.split", &mut e.split, |s| {
            matches!(s, "train" | "val" | "occlusion").then(|| s.to_string())
        })?;
        k.set("eval.checkpoint", &mut e.checkpoint, |s| Some(s.to_string()))?;
        k.set("eval.oracle", &mut e.oracle, |s| match s {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        })?;
        k.set("eval.pck_mm", &mut e.pck_mm, num)?;
        k.set("eval.f1_thr_mm", &mut e.f1_thr_mm, num)?;
        k.set("eval.gate_m", &mut e.gate_m, num)?;
        k.set("eval.track_threshold_m", &mut e.track_threshold_m, num)?;
        k.set("eval.tau", &mut e.tau, num)?;

        let tr = &mut c.track;
        k.set("track.split", &mut tr.split, |s| {
            matches!(s, "train" | "val" | "occlusion").then(|| s.to_string())
        })?;
        k.set("track.checkpoint", &mut tr.checkpoint, |s| Some(s.to_string()))?;
        k.set("track.threshold_m", &mut tr.threshold_m, num)?;
        k.set("track.tau", &mut tr.tau, num)?;

        let a = &mut c.ablate;
        k.set("ablate.seeds", &mut a.seeds, num)?;
        k.set("ablate.steps", &mut a.steps, num)?;
        k.set("ablate.variants", &mut a.variants, |s| {
            if s.is_empty() {
                return Some(Vec::new());
            }
            s.split(',').map(|p| AttentionVariant::parse(p.trim())).collect()
        })?;
        k.set("ablate.snippet_set", &mut a.snippet_set, |s| {
            if s.is_empty() {
                return Some(Vec::new());
            }
            list(s)
        })?;

        k.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn validate(&self) -> Result<(), CliError> {
        if self.dataset.scenes == 0 {
            return Err(CliError::Config("dataset.scenes must be positive".into()));
        }
        if self.dataset.frames == 0 || self.dataset.people == 0 {
            return Err(CliError::Config("empty dataset dimensions".into()));
        }
        if self.train.steps == 0 {
            return Err(CliError::Config("train.steps must be positive".into()));
        }
        if !(self.splits.val_fraction > 0.0 && self.splits.val_fraction < 1.0) {
            return Err(CliError::Config("splits.val_fraction outside (0, 1)".into()));
        }
        self.model_cfg().map(|_| ())
    }

    /// The core model configuration this run trains or loads.
    pub fn model_cfg(&self) -> Result<ModelCfg, CliError> {
        let m = &self.model;
        let cfg = ModelCfg {
            channels: m.channels,
            heads: m.heads,
            k_points: m.k_points,
            enc_layers: m.enc_layers,
            dec_layers: m.dec_layers,
            num_queries: m.queries,
            snippet_frames: m.snippet_frames,
            forecast_frames: m.forecast_frames,
            image_h: self.dataset.height,
            image_w: self.dataset.width,
            strides: m.strides.clone(),
            num_joints: NUM_JOINTS,
            variant: m.variant,
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Canonical text of everything that must agree between a checkpoint
    /// and the run that loads it.
    pub fn model_echo(&self) -> String {
        let m = &self.model;
        format!(
            "[model]\nchannels = {}\nheads = {}\nk_points = {}\nenc_layers = {}\n\
             dec_layers = {}\nqueries = {}\nsnippet_frames = {}\nforecast_frames = {}\n\
             strides = {}\nvariant = {}\nwidth = {}\nheight = {}\n",
            m.channels,
            m.heads,
            m.k_points,
            m.enc_layers,
            m.dec_layers,
            m.queries,
            m.snippet_frames,
            m.forecast_frames,
            m.strides
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
            m.variant.name(),
            self.dataset.width,
            self.dataset.height,
        )
    }
}
