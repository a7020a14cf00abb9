//! `track`: run inference over whole scenes and dump the stitched tracks
//! as one CSV per sequence. Root coordinates are pixel (x, y) plus depth
//! in meters so the files plot directly over the rendered frames.

use std::fmt::Write as _;
use std::path::Path;

use snipper_core::tracking::TrackCfg;

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::runner::track_snippets;
use crate::CliError;

pub fn cmd_track(cfg: &RunConfig, out: &Path, _force: bool) -> Result<(), CliError> {
    let model_cfg = cfg.model_cfg()?;
    let ds = Dataset::load(cfg, &model_cfg)?;
    let runner = super::eval::load_runner(cfg, &cfg.track.checkpoint)?;
    let tcfg = TrackCfg {
        threshold: cfg.track.threshold_m,
        tau: cfg.track.tau,
        ..TrackCfg::default()
    };
    std::fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    for scene in ds.split_scenes(&cfg.track.split)? {
        let seq = &ds.seqs[scene];
        let snippets = runner.infer_tiled(seq)?;
        let tracks = track_snippets(&snippets, model_cfg.snippet_frames, seq, &tcfg)?;
        let mut csv = String::from("frame,track,observed,occurrence,x,y,d\n");
        for tr in &tracks {
            for e in &tr.entries {
                writeln!(
                    csv,
                    "{},{},{},{},{},{},{}",
                    e.frame,
                    tr.id,
                    u8::from(e.observed),
                    e.pose.occurrence,
                    e.pose.root[0],
                    e.pose.root[1],
                    e.pose.root[2],
                )
                .expect("writing to a String cannot fail");
            }
        }
        let path = out.join(format!("tracks_{}.csv", ds.names[scene]));
        super::write_file(&path, &csv)?;
        println!("{}: {} tracks -> {}", ds.names[scene], tracks.len(), path.display());
    }
    Ok(())
}
