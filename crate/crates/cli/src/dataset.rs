//! Dataset plumbing between the synth module and the commands: scene
//! generation, on-disk layout (one `seqNNN` directory per sequence), split
//! derivation, and assembly of per-snippet model inputs.

use std::path::Path;

use snipper_core::geometry::Pose;
use snipper_core::matching::{target_heatmaps, TargetTraj};
use snipper_core::model::ModelCfg;
use snipper_core::synth::{
    self, frame_image, generate_scene, heatmap_points, make_splits, render, snippet_targets,
    MotionCfg, RenderedSequence, SceneCfg, SnippetRef, SplitCfg, Splits,
};

use crate::config::RunConfig;
use crate::CliError;

impl From<synth::SynthError> for CliError {
    fn from(e: synth::SynthError) -> Self {
        match e {
            synth::SynthError::Config(msg) => CliError::Config(msg),
            other => CliError::Data(other.to_string()),
        }
    }
}

pub fn seq_name(i: usize) -> String {
    format!("seq{i:03}")
}

/// All scenes of the configured corpus, scripts cycled over scene index,
/// seeds consecutive from the dataset seed.
pub fn generate(cfg: &RunConfig) -> Result<Vec<RenderedSequence>, CliError> {
    let d = &cfg.dataset;
    let mut seqs = Vec::with_capacity(d.scenes);
    for i in 0..d.scenes {
        let scene_cfg = SceneCfg {
            people: d.people,
            frames: d.frames,
            width: d.width,
            height: d.height,
            seed: d.seed.wrapping_add(i as u64),
            motion: MotionCfg {
                root_speed: d.root_speed,
                angular_vel: d.angular_vel,
            },
            script: d.scripts[i % d.scripts.len()],
        };
        seqs.push(render(&generate_scene(&scene_cfg)?)?);
    }
    Ok(seqs)
}

pub fn save_all(seqs: &[RenderedSequence], dir: &Path) -> Result<(), CliError> {
    for (i, seq) in seqs.iter().enumerate() {
        synth::save(seq, &dir.join(seq_name(i)))?;
    }
    Ok(())
}

/// Sequences plus the derived split, which depends on the model's snippet
/// geometry and is recomputed deterministically rather than stored.
pub struct Dataset {
    pub names: Vec<String>,
    pub seqs: Vec<RenderedSequence>,
    pub splits: Splits,
}

impl Dataset {
    pub fn load(cfg: &RunConfig, model: &ModelCfg) -> Result<Self, CliError> {
        let dir = &cfg.dataset.dir;
        let mut names: Vec<String> = std::fs::read_dir(dir)
            .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?
            .filter_map(|r| r.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.starts_with("seq"))
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(CliError::Data(format!(
                "{}: no seqNNN directories",
                dir.display()
            )));
        }
        let seqs: Vec<RenderedSequence> = names
            .iter()
            .map(|n| synth::load(&dir.join(n)).map_err(CliError::from))
            .collect::<Result<_, _>>()?;
        let splits = make_splits(
            &seqs,
            &SplitCfg {
                snippet_len: model.t_total(),
                stride: cfg.splits.stride,
                val_fraction: cfg.splits.val_fraction,
                seed: cfg.splits.seed,
            },
        )?;
        Ok(Dataset {
            names,
            seqs,
            splits,
        })
    }

    pub fn split(&self, name: &str) -> Result<&[SnippetRef], CliError> {
        match name {
            "train" => Ok(&self.splits.train),
            "val" => Ok(&self.splits.val),
            "occlusion" => Ok(&self.splits.occlusion),
            other => Err(CliError::Config(format!("unknown split {other}"))),
        }
    }

    /// Scene indices touched by a split, ascending.
    pub fn split_scenes(&self, name: &str) -> Result<Vec<usize>, CliError> {
        let mut ids: Vec<usize> = self.split(name)?.iter().map(|r| r.sequence).collect();
        ids.sort_unstable();
        ids.dedup();
        Ok(ids)
    }
}

/// Everything the model consumes for one training snippet.
pub struct SnippetBatch {
    /// `[t_obs, h, w, 3]` in [0, 1].
    pub images: Vec<f64>,
    /// Loss-space trajectories over the whole `t_obs + t_fut` window.
    pub targets: Vec<TargetTraj>,
    /// `[t_obs, h0, w0, num_joints]` supervision heatmaps.
    pub heatmaps: Vec<f64>,
}

/// Pixel values of `t_obs` consecutive frames, `[t, h, w, 3]` row-major.
pub fn frame_values(seq: &RenderedSequence, start: usize, t_obs: usize) -> Vec<f64> {
    let mut images = Vec::with_capacity(t_obs * seq.meta.height * seq.meta.width * 3);
    for dt in 0..t_obs {
        images.extend(frame_image(seq, start + dt));
    }
    images
}

pub fn snippet_batch(
    seq: &RenderedSequence,
    start: usize,
    model: &ModelCfg,
    sigma: f64,
) -> Result<SnippetBatch, CliError> {
    let t_obs = model.snippet_frames;
    let images = frame_values(seq, start, t_obs);
    let targets = snippet_targets(seq, start, model.t_total())?;
    let stride = model.strides[0];
    let pts = heatmap_points(seq, start, t_obs, stride);
    let (h0, w0) = (model.image_h / stride, model.image_w / stride);
    let heatmaps = target_heatmaps(t_obs, h0, w0, model.num_joints, &pts, sigma);
    Ok(SnippetBatch {
        images,
        targets,
        heatmaps,
    })
}

/// Ground-truth annotation as a pose, occurrence 1 when present.
pub fn gt_pose(seq: &RenderedSequence, t: usize, person: usize) -> Pose<f64> {
    let a = &seq.annots[t][person];
    Pose::from_joints(
        &a.joints,
        a.vis.iter().map(|&v| f64::from(v)).collect(),
        if a.present { 1.0 } else { 0.0 },
    )
    .expect("stored annotations are well-formed")
}
