use std::env;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use deoccl_core::dataset::{MaskShape, MaskSpec};
use deoccl_core::losses::LossWeights;
use deoccl_core::network::NetworkConfig;
use deoccl_core::training::{default_schedule, scale_schedule, TrainConfig};

use crate::error::CliError;

pub const CONFIG_HEADER: &str = "deoccl-config v1";

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct CommonOpts {
    /// Config file (`deoccl-config v1` header, then `key = value` lines).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dataset root directory.
    #[arg(long, value_name = "DIR")]
    pub data_root: Option<PathBuf>,
    /// Output root for run and report artifacts.
    #[arg(long, value_name = "DIR")]
    pub out_root: Option<PathBuf>,
    /// Master seed; all randomness flows from it.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl CommonOpts {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::resolve(self.config.as_deref())?;
        if let Some(dir) = &self.data_root {
            cfg.data_root = dir.clone();
        }
        if let Some(dir) = &self.out_root {
            cfg.out_root = dir.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

/// Fully resolved run settings.
///
/// Resolution order: built-in defaults, then `DEOCCL_DATA_ROOT` (data
/// root only), then the `--config` file, then command-line flags.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub checkpoint_every: usize,
    pub fill: f32,
    pub mask: MaskSpec,
    pub data_root: PathBuf,
    pub out_root: PathBuf,
    pub epoch_scale: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            network: NetworkConfig::default(),
            weights: train.weights,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            adam_beta1: train.adam_beta1,
            adam_beta2: train.adam_beta2,
            adam_eps: train.adam_eps,
            checkpoint_every: train.checkpoint_every,
            fill: train.fill,
            mask: MaskSpec::default(),
            data_root: PathBuf::from("data"),
            out_root: PathBuf::from("runs"),
            epoch_scale: 1.0,
            seed: train.seed,
        }
    }
}

impl RunConfig {
    pub fn resolve(file: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        if let Ok(root) = env::var("DEOCCL_DATA_ROOT") {
            if !root.is_empty() {
                cfg.data_root = PathBuf::from(root);
            }
        }
        if let Some(path) = file {
            cfg.apply_file(path)?;
        }
        Ok(cfg)
    }

    fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::data(format!("cannot read config '{}': {e}", path.display()))
        })?;
        let mut saw_header = false;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if !saw_header {
                if line != CONFIG_HEADER {
                    return Err(CliError::usage(format!(
                        "config '{}' must start with '{CONFIG_HEADER}'",
                        path.display()
                    )));
                }
                saw_header = true;
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let at = |msg: String| {
                CliError::usage(format!("{}:{}: {msg}", path.display(), idx + 1))
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at("expected 'key = value'".to_string()))?;
            self.set(key.trim(), value.trim()).map_err(at)?;
        }
        if !saw_header {
            return Err(CliError::usage(format!(
                "config '{}' is empty; expected the '{CONFIG_HEADER}' header",
                path.display()
            )));
        }
        Ok(())
    }

    /// Applies one `key = value` setting. Values are syntax-checked here;
    /// semantic validation belongs to the modules that consume them.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        match key {
            "image_size" => self.set_image_size(parse(key, value)?),
            "base_filters" => self.network.base_filters = parse(key, value)?,
            "bottleneck_dim" => self.network.bottleneck_dim = parse(key, value)?,
            "encoder_depth" => self.network.encoder_depth = parse(key, value)?,
            "attention_site_size" => self.network.attention_site_size = parse(key, value)?,
            "batch_norm" => self.network.batch_norm = parse(key, value)?,
            "mask_input_channel" => self.network.mask_input_channel = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "fill" => self.fill = parse(key, value)?,
            "lambda_rec" => self.weights.lambda_rec = parse(key, value)?,
            "lambda_adv" => self.weights.lambda_adv = parse(key, value)?,
            "lambda_ssim" => self.weights.lambda_ssim = parse(key, value)?,
            "lambda_mask" => self.weights.lambda_mask = parse(key, value)?,
            "mask_horizontal_margin" => self.mask.horizontal_margin = parse(key, value)?,
            "mask_vertical_margin" => self.mask.vertical_margin = parse(key, value)?,
            "mask_shape" => {
                self.mask.shape = match value {
                    "rectangle" => MaskShape::Rectangle,
                    "rounded" => MaskShape::RoundedRectangle,
                    other => {
                        return Err(format!(
                            "bad value '{other}' for mask_shape (rectangle or rounded)"
                        ))
                    }
                }
            }
            "data_root" => self.data_root = PathBuf::from(value),
            "out_root" => self.out_root = PathBuf::from(value),
            "epoch_scale" => self.epoch_scale = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            other => return Err(format!("unknown key '{other}'")),
        }
        Ok(())
    }

    /// The attention site sits at quarter resolution, so it tracks
    /// image_size unless a later explicit key overrides it.
    pub fn set_image_size(&mut self, size: usize) {
        self.network.image_size = size;
        self.network.attention_site_size = size / 4;
    }

    /// Training settings with the default schedule scaled by epoch_scale.
    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let schedule = scale_schedule(&default_schedule(), self.epoch_scale)?;
        let mut train = TrainConfig::new(schedule);
        train.batch_size = self.batch_size;
        train.learning_rate = self.learning_rate;
        train.adam_beta1 = self.adam_beta1;
        train.adam_beta2 = self.adam_beta2;
        train.adam_eps = self.adam_eps;
        train.weights = self.weights;
        train.checkpoint_every = self.checkpoint_every;
        train.fill = self.fill;
        train.seed = self.seed;
        Ok(train)
    }

    /// Round-trippable rendering: `echo()` output parses back to `self`.
    pub fn echo(&self) -> String {
        let shape = match self.mask.shape {
            MaskShape::Rectangle => "rectangle",
            MaskShape::RoundedRectangle => "rounded",
        };
        let mut s = String::new();
        let _ = writeln!(s, "{CONFIG_HEADER}");
        let _ = writeln!(s, "# Resolved settings; pass back via --config to reproduce.");
        let _ = writeln!(s);
        let _ = writeln!(s, "image_size = {}", self.network.image_size);
        let _ = writeln!(s, "base_filters = {}", self.network.base_filters);
        let _ = writeln!(s, "bottleneck_dim = {}", self.network.bottleneck_dim);
        let _ = writeln!(s, "encoder_depth = {}", self.network.encoder_depth);
        let _ = writeln!(s, "attention_site_size = {}", self.network.attention_site_size);
        let _ = writeln!(s, "batch_norm = {}", self.network.batch_norm);
        let _ = writeln!(s, "mask_input_channel = {}", self.network.mask_input_channel);
        let _ = writeln!(s);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "adam_beta1 = {}", self.adam_beta1);
        let _ = writeln!(s, "adam_beta2 = {}", self.adam_beta2);
        let _ = writeln!(s, "adam_eps = {}", self.adam_eps);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "fill = {}", self.fill);
        let _ = writeln!(s, "epoch_scale = {}", self.epoch_scale);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s);
        let _ = writeln!(s, "lambda_rec = {}", self.weights.lambda_rec);
        let _ = writeln!(s, "lambda_adv = {}", self.weights.lambda_adv);
        let _ = writeln!(s, "lambda_ssim = {}", self.weights.lambda_ssim);
        let _ = writeln!(s, "lambda_mask = {}", self.weights.lambda_mask);
        let _ = writeln!(s);
        let _ = writeln!(s, "mask_horizontal_margin = {}", self.mask.horizontal_margin);
        let _ = writeln!(s, "mask_vertical_margin = {}", self.mask.vertical_margin);
        let _ = writeln!(s, "mask_shape = {shape}");
        let _ = writeln!(s);
        let _ = writeln!(s, "data_root = {}", self.data_root.display());
        let _ = writeln!(s, "out_root = {}", self.out_root.display());
        s
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| format!("bad value '{value}' for {key}: {e}"))
}
