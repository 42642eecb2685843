//! Batch entry points for the QA transfer pipeline.
//!
//! Every command writes a `manifest.json` with SHA-256 digests of the files it
//! produced. Exit codes: 0 on success, 2 for bad input, 3 for incompatible
//! checkpoints, 4 for numeric failure.

pub mod args;
pub mod commands;
pub mod manifest;
pub mod pipeline;

use std::path::Path;

use qtl_core::training::TrainConfig;
use qtl_core::{Error, Result};

pub use args::{Cli, Command};
pub use manifest::RunManifest;
pub use pipeline::{run_synthetic, SyntheticReport, SyntheticSpec};

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_COMPAT: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Incompatible(_) => EXIT_COMPAT,
        Error::Divergence { .. } => EXIT_NUMERIC,
        _ => EXIT_INPUT,
    }
}

/// Size of the rayon pool from `QTL_THREADS`; unset or unparsable means the
/// rayon default.
pub fn threads_from_env() -> Option<usize> {
    std::env::var("QTL_THREADS")
        .ok()?
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
}

fn config_or(path: Option<&Path>, default: TrainConfig) -> Result<TrainConfig> {
    path.map_or(Ok(default), TrainConfig::from_file)
}

pub fn cmd_synthetic(a: &args::SyntheticArgs) -> Result<SyntheticReport> {
    let mut spec = SyntheticSpec::desk(a.seed);
    spec.pretrain = config_or(a.pretrain_config.as_deref(), pipeline::desk_pretrain_config())?;
    spec.finetune = config_or(a.config.as_deref(), pipeline::desk_finetune_config())?;
    spec.n_pretrain = a.n_pretrain;
    spec.n_span_dev = a.n_span_dev;
    spec.n_finetune = a.n_finetune;
    spec.n_dev = a.n_dev;
    spec.n_test = a.n_test;
    spec.fractions = a.pretrain_fraction.clone();
    spec.scratch = !a.no_scratch;
    let report = run_synthetic(&spec, Some(&a.out))?;
    println!("{}", serde_json::to_string(&report).expect("serializable"));
    Ok(report)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Convert(a) => commands::cmd_convert(a),
        Command::Train(a) => commands::cmd_train(a, "train").map(drop),
        Command::TransferTrain(a) => {
            if a.init.is_none() {
                return Err(Error::Usage("transfer-train needs --init".into()));
            }
            commands::cmd_train(a, "transfer-train").map(drop)
        }
        Command::Evaluate(a) => commands::cmd_evaluate(a).map(drop),
        Command::Ensemble(a) => commands::cmd_ensemble(a).map(drop),
        Command::Analyze(a) => commands::cmd_analyze(a).map(drop),
        Command::Generate(a) => commands::cmd_generate(a),
        Command::Synthetic(a) => cmd_synthetic(a).map(drop),
    }
}
