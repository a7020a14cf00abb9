//! Driving a trained model over sequences: snippet inference, the tiling
//! that chains snippets through their shared frames, and whole-scene
//! tracking (frame-by-frame when the model observes a single frame).

use snipper_core::geometry::Pose;
use snipper_core::model::{Model, ModelCfg};
use snipper_core::synth::RenderedSequence;
use snipper_core::tensor::{ParamStore, Tape};
use snipper_core::tracking::{track_single_frame, track_video, SnippetResult, Track, TrackCfg};

use crate::dataset::frame_values;
use crate::CliError;

pub struct Runner {
    pub model: Model,
    pub store: ParamStore<f64>,
}

/// Snippet starts that tile a sequence so consecutive windows share exactly
/// one frame. Requires at least two observed frames per window.
pub fn tile_starts(frames: usize, t_obs: usize) -> Vec<usize> {
    assert!(t_obs >= 2, "tiling needs overlapping windows");
    let mut starts = Vec::new();
    let mut s = 0;
    while s + t_obs <= frames {
        starts.push(s);
        s += t_obs - 1;
    }
    starts
}

impl Runner {
    pub fn new(cfg: ModelCfg, store: ParamStore<f64>) -> Result<Self, CliError> {
        Ok(Runner {
            model: Model::new(cfg).map_err(CliError::from)?,
            store,
        })
    }

    /// One forward pass; the final decoder layer becomes the snippet result.
    pub fn infer(&self, seq: &RenderedSequence, start: usize) -> Result<SnippetResult<f64>, CliError> {
        let cfg = &self.model.cfg;
        let mut tape = Tape::new();
        let staged = self.store.stage(&mut tape)?;
        let images = tape.constant(
            &[cfg.snippet_frames, cfg.image_h, cfg.image_w, 3],
            frame_values(seq, start, cfg.snippet_frames),
        )?;
        let fwd = self.model.forward(&mut tape, &staged, images)?;
        let poses = self
            .model
            .decode(&tape, fwd.layers.last().expect("at least one layer"), &seq.meta.cam);
        SnippetResult::new(start, cfg.snippet_frames, cfg.forecast_frames, poses)
            .map_err(CliError::from)
    }

    /// Snippet results covering the whole sequence.
    pub fn infer_tiled(&self, seq: &RenderedSequence) -> Result<Vec<SnippetResult<f64>>, CliError> {
        let t_obs = self.model.cfg.snippet_frames;
        if t_obs == 1 {
            return (0..seq.meta.frames).map(|s| self.infer(seq, s)).collect();
        }
        tile_starts(seq.meta.frames, t_obs)
            .into_iter()
            .map(|s| self.infer(seq, s))
            .collect()
    }

    pub fn track_scene(
        &self,
        snippets: &[SnippetResult<f64>],
        seq: &RenderedSequence,
        tcfg: &TrackCfg,
    ) -> Result<Vec<Track<f64>>, CliError> {
        track_snippets(snippets, self.model.cfg.snippet_frames, seq, tcfg)
    }
}

/// Whole-scene identities. A single-frame model has no shared frames to
/// associate through, so it falls back to frame-by-frame matching.
pub fn track_snippets(
    snippets: &[SnippetResult<f64>],
    t_obs: usize,
    seq: &RenderedSequence,
    tcfg: &TrackCfg,
) -> Result<Vec<Track<f64>>, CliError> {
    if t_obs == 1 {
        let frames: Vec<Vec<Pose<f64>>> = snippets
            .iter()
            .map(|s| s.trajectories.iter().map(|tr| tr[0].clone()).collect())
            .collect();
        track_single_frame(&frames, &seq.meta.cam, tcfg).map_err(CliError::from)
    } else {
        track_video(snippets, &seq.meta.cam, tcfg).map_err(CliError::from)
    }
}

#[cfg(test)]
mod tests {
    use super::tile_starts;

    #[test]
    fn tiling_shares_exactly_one_frame_between_windows() {
        assert_eq!(tile_starts(13, 4), vec![0, 3, 6, 9]);
        assert_eq!(tile_starts(10, 4), vec![0, 3, 6]);
        assert_eq!(tile_starts(4, 4), vec![0]);
        assert_eq!(tile_starts(3, 4), Vec::<usize>::new());
        for (frames, t) in [(13, 4), (25, 3), (9, 2)] {
            for w in tile_starts(frames, t).windows(2) {
                assert_eq!(w[0] + t - 1, w[1]);
            }
        }
    }
}
