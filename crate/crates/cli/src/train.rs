use std::fs;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use deoccl_core::dataset::{list_corpus, scan_root, split_sessions};
use deoccl_core::training::{load_checkpoint, TrainConfig, TrainPhase};
use deoccl_core::{DatasetSplit, HoldoutPolicy, Model, Trainer};

use crate::config::{CommonOpts, RunConfig};
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StepArg {
    /// Generic-corpus autoencoder pretraining.
    #[value(name = "1a")]
    PretrainGeneric,
    /// Step 1 on the user's unoccluded frames (attention bypassed).
    #[value(name = "1b")]
    FinetuneUser,
    /// Step 2 on synthetically occluded frames (attention active).
    #[value(name = "2")]
    Occluded,
    /// Full user curriculum; add --corpus to prepend generic pretraining.
    All,
}

/// Run the two-step curriculum, or a slice of it, against the prepared
/// dataset under the data root.
#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Which part of the curriculum to run.
    #[arg(long, value_enum, default_value_t = StepArg::All)]
    pub step: StepArg,
    /// Continue from the run directory's checkpoint.
    #[arg(long)]
    pub resume: bool,
    /// Directory of generic-face PNGs (default <data_root>/corpus).
    #[arg(long, value_name = "DIR")]
    pub corpus: Option<PathBuf>,
    /// Scale every stage's epoch count by this factor.
    #[arg(long, value_name = "FACTOR")]
    pub epoch_scale: Option<f64>,
    #[arg(long, value_name = "N")]
    pub batch_size: Option<usize>,
    #[arg(long, value_name = "RATE")]
    pub learning_rate: Option<f64>,
    /// Checkpoint cadence in epochs; 0 keeps stage boundaries only.
    #[arg(long, value_name = "EPOCHS")]
    pub checkpoint_every: Option<usize>,
    #[arg(long, value_name = "PIXELS")]
    pub image_size: Option<usize>,
    #[command(flatten)]
    pub common: CommonOpts,
}

pub fn run(args: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = args.common.resolve()?;
    if let Some(size) = args.image_size {
        cfg.set_image_size(size);
    }
    if let Some(scale) = args.epoch_scale {
        cfg.epoch_scale = scale;
    }
    if let Some(batch) = args.batch_size {
        cfg.batch_size = batch;
    }
    if let Some(rate) = args.learning_rate {
        cfg.learning_rate = rate;
    }
    if let Some(cadence) = args.checkpoint_every {
        cfg.checkpoint_every = cadence;
    }
    print!("{}", cfg.echo());

    let model = Model::new(cfg.network.clone())?;
    let trainer = Trainer::new(&model, cfg.train_config()?)?;
    let mut logger = deoccl_core::RunLogger::create(&cfg.out_root)?;
    let ckpt = logger.checkpoint_path();
    fs::write(cfg.out_root.join("run_config.txt"), cfg.echo()).map_err(|e| {
        CliError::data(format!("cannot write '{}': {e}", cfg.out_root.display()))
    })?;
    println!();
    println!("run dir: {}", cfg.out_root.display());

    let mut state = if args.resume {
        if !ckpt.exists() {
            return Err(CliError::data(format!(
                "no checkpoint to resume from at '{}'",
                ckpt.display()
            )));
        }
        load_checkpoint(&ckpt, &cfg.network)?
    } else {
        match args.step {
            StepArg::PretrainGeneric | StepArg::All => trainer.init_state(),
            StepArg::FinetuneUser => {
                if ckpt.exists() {
                    load_checkpoint(&ckpt, &cfg.network)?
                } else {
                    println!("note: no checkpoint at '{}'; starting fresh", ckpt.display());
                    trainer.init_state()
                }
            }
            StepArg::Occluded => {
                if !ckpt.exists() {
                    return Err(CliError::data(format!(
                        "step 2 requires a step-1 checkpoint at '{}'; run --step 1b first",
                        ckpt.display()
                    )));
                }
                load_checkpoint(&ckpt, &cfg.network)?
            }
        }
    };

    let corpus_dir = args.corpus.clone().unwrap_or_else(|| cfg.data_root.join("corpus"));
    match args.step {
        StepArg::PretrainGeneric => {
            let paths = list_corpus(&corpus_dir)?;
            trainer.pretrain_generic(&mut state, &paths, Some(&mut logger))?;
        }
        StepArg::FinetuneUser => {
            let split = load_split(&cfg)?;
            trainer.finetune_user(&mut state, &split, Some(&mut logger))?;
        }
        StepArg::Occluded => {
            let split = load_split(&cfg)?;
            trainer.train_occluded(&mut state, &split, Some(&mut logger))?;
        }
        StepArg::All => {
            let pretrain = if args.resume {
                state.cursor.phase == TrainPhase::Pretrain
            } else {
                args.corpus.is_some()
            };
            if pretrain {
                let paths = list_corpus(&corpus_dir)?;
                trainer.pretrain_generic(&mut state, &paths, Some(&mut logger))?;
            }
            let schedule = &trainer.config().schedule;
            if state.cursor.stage < step2_start(trainer.config()) {
                let split = load_split(&cfg)?;
                trainer.finetune_user(&mut state, &split, Some(&mut logger))?;
            }
            if state.cursor.stage < schedule.len() {
                let split = load_split(&cfg)?;
                trainer.train_occluded(&mut state, &split, Some(&mut logger))?;
            }
        }
    }

    let steps = state.cursor.step;
    let summary = logger.finish(trainer.config(), &cfg.network)?;
    println!("generator steps taken: {steps}");
    println!("checkpoint: {}", ckpt.display());
    println!("loss log: {}", cfg.out_root.join("train_log.csv").display());
    println!("run summary: {}", summary.display());
    Ok(())
}

fn step2_start(config: &TrainConfig) -> usize {
    config
        .schedule
        .iter()
        .position(|s| s.step == 2)
        .unwrap_or(config.schedule.len())
}

pub fn load_split(cfg: &RunConfig) -> Result<DatasetSplit, CliError> {
    let manifests = scan_root(&cfg.data_root)?;
    Ok(split_sessions(manifests, &HoldoutPolicy::LastTag)?)
}
