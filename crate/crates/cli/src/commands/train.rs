//! `train`: stochastic snippet training with per-step loss logging and
//! bit-reproducible checkpoints. Snippets are drawn with replacement from
//! the train split by one PRNG whose state rides along in the checkpoint,
//! so a resumed run continues the exact same draw sequence. Live parameters
//! and moments are rounded to checkpoint precision whenever a checkpoint is
//! written, which keeps in-process and resumed continuations bitwise equal.

use std::path::{Path, PathBuf};

use snipper_core::matching::{training_loss, LossCfg};
use snipper_core::model::Model;
use snipper_core::rng::Rng;
use snipper_core::tensor::{Optimizer, OptimizerKind, ParamStore, Tape};

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::dataset::{snippet_batch, Dataset};
use crate::CliError;

pub struct TrainOutcome {
    /// Total loss at the first and last executed step.
    pub first_loss: f64,
    pub final_loss: f64,
    pub steps_run: u64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    /// Final parameters, already rounded to checkpoint precision.
    pub store: ParamStore<f64>,
}

fn optimizer_for(cfg: &RunConfig) -> Result<Optimizer<f64>, CliError> {
    let kind = match cfg.train.optimizer.as_str() {
        "sgd" => OptimizerKind::Sgd {
            momentum: cfg.train.momentum,
        },
        _ => OptimizerKind::adam_default(),
    };
    Optimizer::new(kind, cfg.train.lr).map_err(CliError::from)
}

fn loss_cfg(cfg: &RunConfig) -> LossCfg {
    LossCfg {
        w_occ: cfg.train.w_occ,
        w_traj: cfg.train.w_traj,
        w_vis: cfg.train.w_vis,
        w_offset: cfg.train.w_offset,
        w_smooth: cfg.train.w_smooth,
        w_heatmap: cfg.train.w_heatmap,
        ..LossCfg::default()
    }
}

/// Round live training state to what a checkpoint stores.
fn quantize_live(store: &mut ParamStore<f64>, opt: &mut Optimizer<f64>) -> Result<(), CliError> {
    checkpoint::quantize_store(store);
    let mut state = opt.state(store);
    for (_, _, values) in &mut state {
        for v in values {
            *v = checkpoint::f32_round(*v);
        }
    }
    opt.load_state(store, &state).map_err(CliError::from)
}

fn write_checkpoint(
    path: &Path,
    cfg: &RunConfig,
    step: u64,
    rng: &Rng,
    store: &mut ParamStore<f64>,
    opt: &mut Optimizer<f64>,
) -> Result<(), CliError> {
    let ck = Checkpoint {
        echo: cfg.model_echo(),
        step,
        rng_state: rng.state(),
        params: store
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.shape.clone(), e.values.clone()))
            .collect(),
        opt_state: opt.state(store),
    };
    checkpoint::save(path, &ck)?;
    quantize_live(store, opt)
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, _force: bool) -> Result<TrainOutcome, CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    let model_cfg = cfg.model_cfg()?;
    let ds = Dataset::load(cfg, &model_cfg)?;
    let refs = ds.split("train")?;
    if refs.is_empty() {
        return Err(CliError::Data("train split is empty".into()));
    }

    let model = Model::new(model_cfg.clone())?;
    let mut store = ParamStore::new();
    let mut init_rng = Rng::seed_from(cfg.train.seed);
    model.init_params(&mut store, &mut init_rng)?;
    let mut opt = optimizer_for(cfg)?;
    let mut data_rng = init_rng.split();
    let mut start_step = 0u64;

    if !cfg.train.resume.is_empty() {
        let ck = checkpoint::load(Path::new(&cfg.train.resume))?;
        if ck.echo != cfg.model_echo() {
            return Err(CliError::Config(format!(
                "checkpoint was trained with a different model:\n{}vs\n{}",
                ck.echo,
                cfg.model_echo()
            )));
        }
        checkpoint::apply_params(&ck, &mut store)?;
        opt.load_state(&store, &ck.opt_state)?;
        opt.set_steps(ck.step);
        data_rng = Rng::from_state(ck.rng_state);
        start_step = ck.step;
        if start_step >= cfg.train.steps {
            return Err(CliError::Config(format!(
                "checkpoint is already at step {start_step} of {}",
                cfg.train.steps
            )));
        }
    }

    let lcfg = loss_cfg(cfg);
    let mut log = String::from("step,occ,traj,vis,offset,smooth,heatmap,total\n");
    let mut first_loss = f64::NAN;
    let mut final_loss = f64::NAN;

    for step in start_step + 1..=cfg.train.steps {
        let r = &refs[data_rng.below(refs.len())];
        let seq = &ds.seqs[r.sequence];
        let outcome = (|| -> Result<_, CliError> {
            let batch = snippet_batch(seq, r.start, &model_cfg, cfg.train.sigma)?;
            let mut tape = Tape::new();
            let staged = store.stage(&mut tape)?;
            let images = tape.constant(
                &[model_cfg.snippet_frames, model_cfg.image_h, model_cfg.image_w, 3],
                batch.images,
            )?;
            let fwd = model.forward(&mut tape, &staged, images)?;
            let (loss, bd) = training_loss(
                &mut tape,
                &model_cfg,
                &lcfg,
                &fwd.layers,
                fwd.heatmaps,
                &batch.targets,
                &batch.heatmaps,
            )?;
            if !bd.total.is_finite() {
                return Err(CliError::Numeric(format!(
                    "loss is {} (occ {} traj {} vis {} offset {} smooth {} heatmap {})",
                    bd.total, bd.occ, bd.traj, bd.vis, bd.offset, bd.smooth, bd.heatmap
                )));
            }
            tape.backward(loss)?;
            let grads: Vec<Option<&[f64]>> =
                staged.refs().iter().map(|&p| tape.grad(p)).collect();
            opt.step(&mut store, &grads)?;
            Ok(bd)
        })();
        let bd = match outcome {
            Ok(bd) => bd,
            Err(CliError::Numeric(msg)) => {
                // Leave enough behind to rerun the offending batch.
                let dump = format!(
                    "step {step}\nsequence {}\nstart {}\n{}\n\n{}",
                    ds.names[r.sequence],
                    r.start,
                    msg,
                    cfg.model_echo()
                );
                super::write_file(&out.join("nan_dump.txt"), &dump)?;
                return Err(CliError::Numeric(format!(
                    "aborted at step {step} on {} (wrote {}): {msg}",
                    ds.names[r.sequence],
                    out.join("nan_dump.txt").display()
                )));
            }
            Err(other) => return Err(other),
        };

        log.push_str(&format!(
            "{step},{},{},{},{},{},{},{}\n",
            bd.occ, bd.traj, bd.vis, bd.offset, bd.smooth, bd.heatmap, bd.total
        ));
        if first_loss.is_nan() {
            first_loss = bd.total;
        }
        final_loss = bd.total;
        if step % 10 == 0 || step == cfg.train.steps {
            println!("step {step}  loss {:.6}", bd.total);
        }

        let every = cfg.train.checkpoint_every;
        if every > 0 && step % every == 0 && step != cfg.train.steps {
            write_checkpoint(
                &out.join(format!("ckpt_{step:06}.bin")),
                cfg,
                step,
                &data_rng,
                &mut store,
                &mut opt,
            )?;
        }
    }

    let ckpt_path = out.join("ckpt_final.bin");
    write_checkpoint(&ckpt_path, cfg, cfg.train.steps, &data_rng, &mut store, &mut opt)?;
    let log_path = out.join("loss.csv");
    super::write_file(&log_path, &log)?;
    println!(
        "trained {} steps, loss {:.6} -> {:.6}, checkpoint {}",
        cfg.train.steps - start_step,
        first_loss,
        final_loss,
        ckpt_path.display()
    );
    Ok(TrainOutcome {
        first_loss,
        final_loss,
        steps_run: cfg.train.steps - start_step,
        checkpoint: ckpt_path,
        log: log_path,
        store,
    })
}
