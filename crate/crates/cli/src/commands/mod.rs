//! The five commands. Each takes the parsed config plus the output
//! directory resolved by the front end, does its work, and reports through
//! both return values (for tests and the ablation driver) and stdout.

mod ablate;
mod eval;
mod synth;
mod track;
mod train;

pub use ablate::cmd_ablate;
pub use eval::{cmd_eval, EvalOutcome, PredSource};
pub use synth::cmd_synth;
pub use track::cmd_track;
pub use train::{cmd_train, TrainOutcome};

use std::path::Path;

use crate::CliError;

/// Create `dir`, refusing to reuse a non-empty one unless forced.
fn fresh_dir(dir: &Path, force: bool) -> Result<(), CliError> {
    if dir.exists() {
        let occupied = std::fs::read_dir(dir)
            .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(CliError::Config(format!(
                "{} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}
