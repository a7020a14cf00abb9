//! `ablate`: sweep attention variant and snippet length over several seeds,
//! train each setting briefly, and score it on the occlusion split. Output
//! is one CSV row per run so the comparison is a pivot away.

use std::fmt::Write as _;
use std::path::Path;

use snipper_core::attention::AttentionVariant;

use crate::commands::eval::{evaluate, PredSource};
use crate::commands::train::cmd_train;
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::runner::Runner;
use crate::CliError;

/// One sweep point: a config patch plus labels for the CSV.
struct Setting {
    axis: &'static str,
    name: String,
    cfg: RunConfig,
}

fn variant_setting(base: &RunConfig, variant: AttentionVariant, seed: u64) -> Setting {
    let mut cfg = base.clone();
    cfg.model.variant = variant;
    patch_for_run(&mut cfg, seed);
    Setting {
        axis: "variant",
        name: variant.name().to_string(),
        cfg,
    }
}

fn snippet_setting(base: &RunConfig, frames: usize, seed: u64) -> Result<Setting, CliError> {
    if frames == 0 {
        return Err(CliError::Config("ablate.snippet_set entries must be positive".into()));
    }
    let mut cfg = base.clone();
    cfg.model.snippet_frames = frames;
    patch_for_run(&mut cfg, seed);
    Ok(Setting {
        axis: "snippet",
        name: format!("t{frames}"),
        cfg,
    })
}

fn patch_for_run(cfg: &mut RunConfig, seed: u64) {
    cfg.train.seed = cfg.train.seed.wrapping_add(seed);
    cfg.train.steps = cfg.ablate.steps;
    cfg.train.checkpoint_every = 0;
    cfg.train.resume = String::new();
    cfg.eval.split = "occlusion".to_string();
}

fn all_value(rows: &[snipper_core::metrics::CsvRow], metric: &str) -> f64 {
    rows.iter()
        .find(|r| r.sequence == "all" && r.metric == metric)
        .map_or(f64::NAN, |r| r.value)
}

pub fn cmd_ablate(cfg: &RunConfig, out: &Path, force: bool) -> Result<(), CliError> {
    super::fresh_dir(out, force)?;
    let mut settings = Vec::new();
    for seed in 0..cfg.ablate.seeds {
        for &v in &cfg.ablate.variants {
            settings.push(variant_setting(cfg, v, seed));
        }
        for &t in &cfg.ablate.snippet_set {
            settings.push(snippet_setting(cfg, t, seed)?);
        }
    }
    if settings.is_empty() {
        return Err(CliError::Config(
            "nothing to ablate: both ablate.variants and ablate.snippet_set are empty".into(),
        ));
    }

    let mut csv = String::from("axis,setting,seed,samples_per_query,mota,pck3d,f1,mpjpe\n");
    for s in &settings {
        let seed = s.cfg.train.seed.wrapping_sub(cfg.train.seed);
        let run_dir = out.join("runs").join(format!("{}_{}_s{seed}", s.axis, s.name));
        println!("== {} {} seed {seed}: training {} steps", s.axis, s.name, s.cfg.train.steps);
        let trained = cmd_train(&s.cfg, &run_dir, true)?;

        let model_cfg = s.cfg.model_cfg()?;
        let samples = model_cfg
            .attention_cfg()
            .samples_per_query(0, model_cfg.snippet_frames / 2);
        let runner = Runner::new(model_cfg.clone(), trained.store)?;
        let ds = Dataset::load(&s.cfg, &model_cfg)?;
        let rows = evaluate(&s.cfg, &ds, &PredSource::Model(&runner))?;

        writeln!(
            csv,
            "{},{},{seed},{samples},{},{},{},{}",
            s.axis,
            s.name,
            all_value(&rows, "mota"),
            all_value(&rows, "pck3d"),
            all_value(&rows, "f1"),
            all_value(&rows, "mpjpe"),
        )
        .expect("writing to a String cannot fail");
    }

    let path = out.join("ablate.csv");
    super::write_file(&path, &csv)?;
    println!("wrote {}", path.display());
    Ok(())
}
