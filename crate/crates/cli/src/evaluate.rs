use std::fs;
use std::path::PathBuf;

use clap::Args;
use deoccl_core::metrics::{
    compare_report, evaluate, EvalOptions, MetricReport, NetworkReconstructor,
    OracleReconstructor,
};
use deoccl_core::training::load_checkpoint;
use deoccl_core::{ForwardMode, Model};

use crate::config::CommonOpts;
use crate::error::CliError;

/// Score checkpoints on the held-out unseen-appearance sessions and
/// write a comparison table.
#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint to score; repeat for side-by-side comparison.
    #[arg(long = "checkpoint", value_name = "FILE")]
    pub checkpoints: Vec<PathBuf>,
    /// Method labels, parallel to --checkpoint (default: file stems,
    /// or "deoccl" for a single checkpoint).
    #[arg(long, value_name = "NAME", value_delimiter = ',')]
    pub labels: Vec<String>,
    /// Additionally score mask-region PSNR per frame.
    #[arg(long)]
    pub masked_only: bool,
    /// Add a perfect-reconstruction reference row.
    #[arg(long)]
    pub oracle_generator: bool,
    /// Report directory (default <out_root>/eval).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonOpts,
}

pub fn run(args: &EvaluateArgs) -> Result<(), CliError> {
    let cfg = args.common.resolve()?;
    if args.checkpoints.is_empty() && !args.oracle_generator {
        return Err(CliError::usage(
            "pass at least one --checkpoint, or --oracle-generator".to_string(),
        ));
    }
    let labels = resolve_labels(args)?;
    print!("{}", cfg.echo());

    let split = crate::train::load_split(&cfg)?;
    let model = Model::new(cfg.network.clone())?;
    let out_dir = args.out.clone().unwrap_or_else(|| cfg.out_root.join("eval"));
    fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::data(format!("cannot create '{}': {e}", out_dir.display())))?;
    println!();
    println!("report dir: {}", out_dir.display());

    let mut reports: Vec<MetricReport> = Vec::new();
    for (path, label) in args.checkpoints.iter().zip(&labels) {
        let state = load_checkpoint(path, &cfg.network)?;
        let recon = NetworkReconstructor {
            model: &model,
            params: &state.params,
            mode: ForwardMode::Attention,
        };
        let options = EvalOptions {
            method_label: label.clone(),
            fill: cfg.fill,
            masked_psnr: args.masked_only,
        };
        reports.push(evaluate(&recon, &split, &options, None)?);
    }
    if args.oracle_generator {
        let options = EvalOptions {
            method_label: "oracle".to_string(),
            fill: cfg.fill,
            masked_psnr: args.masked_only,
        };
        reports.push(evaluate(&OracleReconstructor, &split, &options, None)?);
    }

    for report in &reports {
        let path = out_dir.join(format!("report_{}.json", file_tag(&report.method_label)));
        fs::write(&path, report.to_json())
            .map_err(|e| CliError::data(format!("cannot write '{}': {e}", path.display())))?;
        println!("report: {}", path.display());
    }
    let table = compare_report(&reports)?;
    let csv_path = out_dir.join("comparison.csv");
    fs::write(&csv_path, table.to_csv())
        .map_err(|e| CliError::data(format!("cannot write '{}': {e}", csv_path.display())))?;
    println!("comparison: {}", csv_path.display());
    println!();
    print!("{}", table.to_text());
    Ok(())
}

fn resolve_labels(args: &EvaluateArgs) -> Result<Vec<String>, CliError> {
    if args.labels.is_empty() {
        if args.checkpoints.len() == 1 {
            return Ok(vec!["deoccl".to_string()]);
        }
        return Ok(args
            .checkpoints
            .iter()
            .map(|p| p.file_stem().map_or_else(|| "deoccl".to_string(), |s| s.to_string_lossy().into_owned()))
            .collect());
    }
    if args.labels.len() != args.checkpoints.len() {
        return Err(CliError::usage(format!(
            "--labels names {} methods but {} checkpoints were given",
            args.labels.len(),
            args.checkpoints.len()
        )));
    }
    Ok(args.labels.clone())
}

/// Label sanitized for use in a file name.
fn file_tag(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '-' })
        .collect()
}
