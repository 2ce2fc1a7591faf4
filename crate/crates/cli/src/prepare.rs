use std::path::PathBuf;

use clap::{Args, ValueEnum};
use deoccl_core::dataset::{
    generate_masks, ingest_session, LandmarkEngine, MaskShape, SyntheticLandmarks,
};

use crate::config::CommonOpts;
use crate::error::CliError;

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MaskShapeArg {
    Rectangle,
    Rounded,
}

/// Ingest one recording session and synthesize its occluder masks.
#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Directory of source PNG frames.
    #[arg(value_name = "FRAMES_DIR")]
    pub frames: PathBuf,
    /// Subject the session belongs to.
    #[arg(long)]
    pub subject: String,
    /// Session identifier, unique within the subject.
    #[arg(long)]
    pub session: String,
    /// Appearance tag (clothing/background variant); the holdout split
    /// reserves each subject's last tag for testing.
    #[arg(long)]
    pub appearance: String,
    /// Side length frames are cropped and resized to.
    #[arg(long, value_name = "PIXELS")]
    pub size: Option<usize>,
    /// Mask margin as a fraction of eye-box width, added on each side.
    #[arg(long, value_name = "FRACTION")]
    pub mask_horizontal_margin: Option<f32>,
    /// Mask margin as a fraction of eye-box height, added on each side.
    #[arg(long, value_name = "FRACTION")]
    pub mask_vertical_margin: Option<f32>,
    /// Occluder outline.
    #[arg(long, value_enum)]
    pub mask_shape: Option<MaskShapeArg>,
    #[command(flatten)]
    pub common: CommonOpts,
}

pub fn run(args: &PrepareArgs) -> Result<(), CliError> {
    let mut cfg = args.common.resolve()?;
    if let Some(size) = args.size {
        cfg.set_image_size(size);
    }
    if let Some(m) = args.mask_horizontal_margin {
        cfg.mask.horizontal_margin = m;
    }
    if let Some(m) = args.mask_vertical_margin {
        cfg.mask.vertical_margin = m;
    }
    if let Some(shape) = args.mask_shape {
        cfg.mask.shape = match shape {
            MaskShapeArg::Rectangle => MaskShape::Rectangle,
            MaskShapeArg::Rounded => MaskShape::RoundedRectangle,
        };
    }
    print!("{}", cfg.echo());

    let manifest = ingest_session(
        &cfg.data_root,
        &args.frames,
        &args.subject,
        &args.session,
        &args.appearance,
        cfg.network.image_size,
    )?;
    let engine = LandmarkEngine::new(Box::new(SyntheticLandmarks));
    let report = generate_masks(&manifest, &engine, &cfg.mask)?;

    println!();
    println!("session dir: {}", manifest.session_dir.display());
    println!("frames ingested: {}", manifest.frame_count);
    println!("masks written: {} (skipped: {})", report.written, report.skipped);
    Ok(())
}
