//! `synth`: write the configured corpus to disk and report the split sizes
//! a model of the configured snippet geometry would see.

use std::path::Path;

use crate::config::{script_name, RunConfig};
use crate::dataset::{self, Dataset};
use crate::CliError;

pub fn cmd_synth(cfg: &RunConfig, out: &Path, force: bool) -> Result<(), CliError> {
    super::fresh_dir(out, force)?;
    let seqs = dataset::generate(cfg)?;
    dataset::save_all(&seqs, out)?;

    // Reload through the parser so what we report is what consumers get.
    let mut reload = cfg.clone();
    reload.dataset.dir = out.to_path_buf();
    let model = cfg.model_cfg()?;
    let ds = Dataset::load(&reload, &model)?;

    println!(
        "wrote {} sequences ({} frames of {}x{}) to {}",
        seqs.len(),
        cfg.dataset.frames,
        cfg.dataset.width,
        cfg.dataset.height,
        out.display()
    );
    println!(
        "scripts: {}",
        cfg.dataset
            .scripts
            .iter()
            .map(|&s| script_name(s))
            .collect::<Vec<_>>()
            .join(",")
    );
    println!(
        "splits for {}+{} frame snippets: train {}, val {}, occlusion {}",
        model.snippet_frames,
        model.forecast_frames,
        ds.splits.train.len(),
        ds.splits.val.len(),
        ds.splits.occlusion.len()
    );
    if ds.splits.occlusion.is_empty() {
        println!("warning: no fully occluded person-frames anywhere; occlusion split is empty");
    }
    Ok(())
}
