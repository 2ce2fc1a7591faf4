use std::fs;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use deoccl_core::dataset::list_corpus;
use deoccl_core::imaging::{apply_occlusion, load_image, resize_crop, save_image};
use deoccl_core::training::load_checkpoint;
use deoccl_core::{BinaryMask, ForwardMode, Model, RangeTag};

use crate::config::CommonOpts;
use crate::error::CliError;

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    /// Fuse encoder and decoder features through the attention maps.
    Attention,
    /// Plain encoder-decoder path, as used in step-1 training.
    Bypass,
}

/// Reconstruct unoccluded faces from a trained checkpoint.
#[derive(Debug, Args)]
pub struct InferArgs {
    /// Checkpoint written by `deoccl train`.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// A PNG file or a directory of PNGs.
    #[arg(long, value_name = "PATH")]
    pub input: PathBuf,
    /// Occluder mask PNG; when given, inputs are composited with the
    /// fill value first (simulation mode), else assumed pre-occluded.
    #[arg(long, value_name = "FILE")]
    pub mask: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Attention)]
    pub mode: ModeArg,
    /// Output directory (default <out_root>/infer).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonOpts,
}

pub fn run(args: &InferArgs) -> Result<(), CliError> {
    let cfg = args.common.resolve()?;
    print!("{}", cfg.echo());

    let state = load_checkpoint(&args.checkpoint, &cfg.network)?;
    let model = Model::new(cfg.network.clone())?;
    let mode = match args.mode {
        ModeArg::Attention => ForwardMode::Attention,
        ModeArg::Bypass => ForwardMode::Bypass,
    };
    let mask = args.mask.as_deref().map(BinaryMask::load).transpose()?;
    let inputs = if args.input.is_dir() {
        list_corpus(&args.input)?
    } else {
        vec![args.input.clone()]
    };

    let out_dir = args.out.clone().unwrap_or_else(|| cfg.out_root.join("infer"));
    fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::data(format!("cannot create '{}': {e}", out_dir.display())))?;
    println!();
    println!("output dir: {}", out_dir.display());

    for path in &inputs {
        let img = load_image(path, RangeTag::Unit)?;
        let img = resize_crop(&img, cfg.network.image_size, None, true)?;
        let mut x = img.to_range(RangeTag::Signed);
        if let Some(m) = &mask {
            x = apply_occlusion(&x, m, cfg.fill)?;
        }
        let (rec, _) = model.generator_forward(&state.params, &x, mode)?;
        let name = path
            .file_name()
            .ok_or_else(|| CliError::data(format!("input '{}' has no file name", path.display())))?;
        save_image(&rec, &out_dir.join(name))?;
    }
    println!("reconstructed {} frame(s)", inputs.len());
    Ok(())
}
