//! The two-step staged curriculum and its run loop.
//!
//! Step 1 trains the encoder-decoder in bypass mode on unoccluded faces
//! (plain autoencoding), adding the adversarial and SSIM terms stage by
//! stage. Step 2 switches to attention mode on occluded samples with the
//! mask loss present throughout. A generic-corpus pretraining pass can
//! precede step 1 using the same stage structure.
//!
//! Determinism: batch order is a pure function of (seed, epoch counter),
//! parameters initialize from the seed, and all updates are sequential,
//! so identical configs and data reproduce identical traces, and a
//! checkpoint resume continues them bit for bit.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{s, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{batch_iter, corpus_batches, DatasetError, DatasetSplit, Role, Sample, DEFAULT_FILL};
use crate::imaging::ImageTensor;
use crate::losses::{
    adv_loss_d_grad, adv_loss_g_grad, mask_loss_grad, rec_loss_grad, ssim_loss_grad, total_loss,
    ActiveSet, LossBreakdown, LossError, LossParts, LossWeights,
};
use crate::network::{ForwardMode, Model, NetworkConfig, NetworkError};
use crate::nn::{GradStore, ParamGroup};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("io error at {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("gradient for unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("gradient supplied for buffer '{0}'")]
    BufferGrad(String),
    #[error("gradient for '{name}' targets the frozen group {group}")]
    FrozenGroup { name: String, group: ParamGroup },
    #[error("gradient shape mismatch for '{name}'")]
    GradShape { name: String },
    #[error("trainable parameter '{0}' received no gradient")]
    MissingGrad(String),
    #[error("bad checkpoint: {reason}")]
    BadCheckpoint { reason: String },
    #[error("unsupported checkpoint version '{found}'")]
    CheckpointVersion { found: String },
    #[error("checkpoint network config {saved:?} does not match the expected {expected:?}")]
    CheckpointConfig { saved: Box<NetworkConfig>, expected: Box<NetworkConfig> },
    #[error("learning rate must be positive, got {0}")]
    NonPositiveRate(f64),
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("the schedule has no stages")]
    EmptySchedule,
    #[error("stage {index} is a step-1 stage after a step-2 stage")]
    StageOrder { index: usize },
    #[error("stage '{name}': {reason}")]
    BadStage { name: String, reason: &'static str },
    #[error("epoch scale factor must be positive, got {0}")]
    BadScale(f64),
    #[error("generic pretraining corpus is empty")]
    EmptyCorpus,
    #[error("wrong schedule position: expected {expected}")]
    WrongPhase { expected: &'static str },
    #[error("the schedule is already complete")]
    ScheduleDone,
    #[error("occluded stage ran without masks")]
    MissingMask,
    #[error("non-finite total loss {total} at step {step}")]
    NonFinite { step: u64, total: f64 },
}

/// Which frames feed a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    GenericCorpus,
    UserUnoccluded,
    UserOccluded,
}

/// One curriculum stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub step: u8,
    pub active: ActiveSet,
    pub epochs: usize,
    pub trainable: Vec<ParamGroup>,
    pub mode: ForwardMode,
    pub data_source: DataSource,
}

impl StageSpec {
    pub fn validate(&self) -> Result<(), TrainingError> {
        let bad = |reason| Err(TrainingError::BadStage { name: self.name.clone(), reason });
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.trainable.is_empty() {
            return bad("no trainable groups");
        }
        match self.step {
            1 => {
                if self.mode != ForwardMode::Bypass {
                    return bad("step-1 stages run in bypass mode");
                }
                if self.trainable.contains(&ParamGroup::Attention) {
                    return bad("step-1 stages freeze the attention group");
                }
                if self.active.mask {
                    return bad("step-1 stages exclude the mask loss");
                }
            }
            2 => {
                if self.mode != ForwardMode::Attention {
                    return bad("step-2 stages run with attention active");
                }
                if !self.active.mask {
                    return bad("step-2 stages include the mask loss");
                }
                if !self.trainable.contains(&ParamGroup::Attention) {
                    return bad("step-2 stages train the attention group");
                }
            }
            _ => return bad("step must be 1 or 2"),
        }
        if self.active.adv != self.trainable.contains(&ParamGroup::Discriminator) {
            return bad("the discriminator group is trainable exactly when the adversarial loss is active");
        }
        Ok(())
    }
}

/// The six-stage recipe: step 1 over 300/100/300 epochs, step 2 over
/// 300/100/200, each stage adding one loss term.
pub fn default_schedule() -> Vec<StageSpec> {
    use ParamGroup::{Attention, Decoder, Discriminator, Encoder};
    let s1 = |name: &str, active: ActiveSet, epochs, disc: bool| StageSpec {
        name: name.to_string(),
        step: 1,
        active,
        epochs,
        trainable: if disc {
            vec![Encoder, Decoder, Discriminator]
        } else {
            vec![Encoder, Decoder]
        },
        mode: ForwardMode::Bypass,
        data_source: DataSource::UserUnoccluded,
    };
    let s2 = |name: &str, active: ActiveSet, epochs, disc: bool| StageSpec {
        name: name.to_string(),
        step: 2,
        active,
        epochs,
        trainable: if disc {
            vec![Encoder, Decoder, Attention, Discriminator]
        } else {
            vec![Encoder, Decoder, Attention]
        },
        mode: ForwardMode::Attention,
        data_source: DataSource::UserOccluded,
    };
    let rec = ActiveSet::rec_only();
    vec![
        s1("1-rec", rec, 300, false),
        s1("1-adv", rec.with_adv(), 100, true),
        s1("1-ssim", rec.with_adv().with_ssim(), 300, true),
        s2("2-rec-mask", rec.with_mask(), 300, false),
        s2("2-adv", rec.with_mask().with_adv(), 100, true),
        s2("2-ssim", rec.with_mask().with_adv().with_ssim(), 200, true),
    ]
}

/// Scales every stage's epoch count by `factor`, flooring at one epoch.
pub fn scale_schedule(
    schedule: &[StageSpec],
    factor: f64,
) -> Result<Vec<StageSpec>, TrainingError> {
    if !(factor > 0.0) {
        return Err(TrainingError::BadScale(factor));
    }
    let mut out = schedule.to_vec();
    for stage in &mut out {
        stage.epochs = ((stage.epochs as f64 * factor).round() as usize).max(1);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: Vec<StageSpec>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Checkpoint cadence in epochs; 0 keeps stage boundaries only.
    pub checkpoint_every: usize,
    /// Occlusion fill value for step-2 samples.
    pub fill: f32,
}

impl TrainConfig {
    pub fn new(schedule: Vec<StageSpec>) -> Self {
        Self {
            schedule,
            batch_size: 50,
            learning_rate: 2e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 0,
            fill: DEFAULT_FILL,
        }
    }

    pub fn validate(&self) -> Result<(), TrainingError> {
        if !(self.learning_rate > 0.0) {
            return Err(TrainingError::NonPositiveRate(self.learning_rate));
        }
        if self.batch_size == 0 {
            return Err(TrainingError::ZeroBatch);
        }
        if self.schedule.is_empty() {
            return Err(TrainingError::EmptySchedule);
        }
        self.weights.validate()?;
        let mut seen_step2 = false;
        for (index, stage) in self.schedule.iter().enumerate() {
            stage.validate()?;
            if stage.step == 2 {
                seen_step2 = true;
            } else if seen_step2 {
                return Err(TrainingError::StageOrder { index });
            }
        }
        Ok(())
    }

    fn hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::new(default_schedule())
    }
}

/// Generic pretraining runs before the main schedule's cursor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainPhase {
    Pretrain,
    Main,
}

impl TrainPhase {
    pub fn code(self) -> u8 {
        match self {
            TrainPhase::Pretrain => 0,
            TrainPhase::Main => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(TrainPhase::Pretrain),
            1 => Some(TrainPhase::Main),
            _ => None,
        }
    }
}

/// Where the run loop stands: next stage/epoch to execute plus the
/// monotone step and epoch counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cursor {
    pub phase: TrainPhase,
    pub stage: usize,
    pub epoch: usize,
    pub step: u64,
    pub epoch_seq: u64,
}

impl Cursor {
    pub fn start() -> Self {
        Self { phase: TrainPhase::Main, stage: 0, epoch: 0, step: 0, epoch_seq: 0 }
    }
}

/// One logged training step.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub step: u64,
    pub stage: String,
    pub breakdown: LossBreakdown,
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: crate::nn::ParamStore<f32>,
    pub gen_opt: AdamState<f32>,
    pub disc_opt: AdamState<f32>,
    pub cursor: Cursor,
    pub rng: ChaCha20Rng,
    pub history: Vec<LossRow>,
}

impl TrainState {
    pub fn fresh(params: crate::nn::ParamStore<f32>, seed: u64) -> Self {
        Self {
            params,
            gen_opt: AdamState::new(),
            disc_opt: AdamState::new(),
            cursor: Cursor::start(),
            rng: ChaCha20Rng::seed_from_u64(seed),
            history: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StageNote {
    pub name: String,
    pub completed_at_step: u64,
}

#[derive(Serialize)]
struct RunSummary<'a> {
    format: &'static str,
    network: &'a NetworkConfig,
    train: &'a TrainConfig,
    stages: &'a [StageNote],
    rows: u64,
    wall_clock_secs: f64,
}

fn io_err(path: &Path, e: std::io::Error) -> TrainingError {
    TrainingError::Io { path: path.display().to_string(), reason: e.to_string() }
}

/// Run artifacts: the CSV step log, a rolling checkpoint, and a JSON
/// summary written by [`finish`](Self::finish). Reusing a directory
/// appends to the existing log, which is what a resumed run wants.
pub struct RunLogger {
    dir: PathBuf,
    csv: std::io::BufWriter<fs::File>,
    stages: Vec<StageNote>,
    rows: u64,
    t0: Instant,
}

impl RunLogger {
    pub fn create(dir: &Path) -> Result<Self, TrainingError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join("train_log.csv");
        let fresh = !path.exists();
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| io_err(&path, e))?;
        let mut csv = std::io::BufWriter::new(file);
        if fresh {
            writeln!(csv, "{}", LossBreakdown::csv_header()).map_err(|e| io_err(&path, e))?;
        }
        Ok(Self { dir: dir.to_path_buf(), csv, stages: Vec::new(), rows: 0, t0: Instant::now() })
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join("checkpoint.bin")
    }

    fn log_row(&mut self, step: u64, stage: &str, b: &LossBreakdown) -> Result<(), TrainingError> {
        writeln!(self.csv, "{}", b.csv_row(step, stage)).map_err(|e| io_err(&self.dir, e))?;
        self.rows += 1;
        Ok(())
    }

    fn note_stage(&mut self, name: &str, step: u64) {
        self.stages.push(StageNote { name: name.to_string(), completed_at_step: step });
    }

    fn flush(&mut self) -> Result<(), TrainingError> {
        self.csv.flush().map_err(|e| io_err(&self.dir, e))
    }

    /// Flushes the log and writes `run_summary.json`; returns its path.
    pub fn finish(
        mut self,
        train: &TrainConfig,
        network: &NetworkConfig,
    ) -> Result<PathBuf, TrainingError> {
        self.flush()?;
        let summary = RunSummary {
            format: "deoccl-run v1",
            network,
            train,
            stages: &self.stages,
            rows: self.rows,
            wall_clock_secs: self.t0.elapsed().as_secs_f64(),
        };
        let path = self.dir.join("run_summary.json");
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }
}

enum DataRef<'d> {
    Corpus(&'d [PathBuf]),
    Split(&'d DatasetSplit),
}

fn stack_images(images: &[ImageTensor]) -> Array4<f32> {
    let (c, h, w) = images[0].data().dim();
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        out.slice_mut(s![i, .., .., ..]).assign(img.data());
    }
    out
}

fn stack_gt(batch: &[Sample]) -> Array4<f32> {
    let frames: Vec<_> = batch.iter().map(|s| s.ground_truth.clone()).collect();
    stack_images(&frames)
}

fn stack_occ(batch: &[Sample]) -> Array4<f32> {
    let frames: Vec<_> = batch.iter().map(|s| s.occluded.clone()).collect();
    stack_images(&frames)
}

fn stack_mask(batch: &[Sample]) -> Array4<f32> {
    let (_, h, w) = batch[0].mask.data().dim();
    let mut out = Array4::zeros((batch.len(), 1, h, w));
    for (i, s) in batch.iter().enumerate() {
        out.slice_mut(s![i, .., .., ..]).assign(s.mask.data());
    }
    out
}

/// Runs a [`TrainConfig`] curriculum over one model.
pub struct Trainer<'a> {
    model: &'a Model,
    config: TrainConfig,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a Model, config: TrainConfig) -> Result<Self, TrainingError> {
        config.validate()?;
        Ok(Self { model, config })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    /// Seed-deterministic fresh state at the schedule start.
    pub fn init_state(&self) -> TrainState {
        TrainState::fresh(self.model.init_params(self.config.seed), self.config.seed)
    }

    fn step2_start(&self) -> usize {
        self.config
            .schedule
            .iter()
            .position(|s| s.step == 2)
            .unwrap_or(self.config.schedule.len())
    }

    /// Autoencodes a generic unoccluded corpus through the step-1 stages.
    ///
    /// Must run before any main-schedule training; the attention group
    /// stays untouched throughout.
    pub fn pretrain_generic(
        &self,
        state: &mut TrainState,
        corpus: &[PathBuf],
        mut logger: Option<&mut RunLogger>,
    ) -> Result<(), TrainingError> {
        if corpus.is_empty() {
            return Err(TrainingError::EmptyCorpus);
        }
        let c = state.cursor;
        let at_start = c.phase == TrainPhase::Main && c.stage == 0 && c.epoch == 0 && c.step == 0;
        match c.phase {
            TrainPhase::Pretrain => {}
            TrainPhase::Main if at_start => state.cursor.phase = TrainPhase::Pretrain,
            TrainPhase::Main => {
                return Err(TrainingError::WrongPhase {
                    expected: "an untrained state for generic pretraining",
                })
            }
        }
        if self.step2_start() == 0 {
            state.cursor.phase = TrainPhase::Main;
            return Ok(());
        }
        while state.cursor.phase == TrainPhase::Pretrain {
            self.advance(state, DataRef::Corpus(corpus), logger.as_deref_mut())?;
        }
        Ok(())
    }

    /// Runs the step-1 stages on the user's unoccluded train frames.
    pub fn finetune_user(
        &self,
        state: &mut TrainState,
        split: &DatasetSplit,
        mut logger: Option<&mut RunLogger>,
    ) -> Result<(), TrainingError> {
        let s2 = self.step2_start();
        if state.cursor.phase != TrainPhase::Main || state.cursor.stage >= s2 {
            return Err(TrainingError::WrongPhase {
                expected: "a step-1 cursor for unoccluded finetuning",
            });
        }
        while state.cursor.stage < s2 {
            self.advance(state, DataRef::Split(split), logger.as_deref_mut())?;
        }
        Ok(())
    }

    /// Runs the step-2 stages on occluded samples with attention active.
    pub fn train_occluded(
        &self,
        state: &mut TrainState,
        split: &DatasetSplit,
        mut logger: Option<&mut RunLogger>,
    ) -> Result<(), TrainingError> {
        let s2 = self.step2_start();
        if state.cursor.phase != TrainPhase::Main || state.cursor.stage < s2 {
            return Err(TrainingError::WrongPhase {
                expected: "completed step-1 stages before occluded training",
            });
        }
        if state.cursor.stage >= self.config.schedule.len() {
            return Err(TrainingError::ScheduleDone);
        }
        while state.cursor.stage < self.config.schedule.len() {
            self.advance(state, DataRef::Split(split), logger.as_deref_mut())?;
        }
        Ok(())
    }

    /// Executes the cursor's current epoch and rolls the cursor forward.
    fn advance(
        &self,
        state: &mut TrainState,
        data: DataRef<'_>,
        mut logger: Option<&mut RunLogger>,
    ) -> Result<(), TrainingError> {
        let stage = &self.config.schedule[state.cursor.stage];
        for g in ParamGroup::ALL {
            state.params.set_trainable(g, stage.trainable.contains(&g));
        }
        if state.cursor.epoch == 0 {
            state.gen_opt.reset();
            state.disc_opt.reset();
        }
        let seed = self.config.seed;
        let eseq = state.cursor.epoch_seq;
        match data {
            DataRef::Corpus(paths) => {
                let iter = corpus_batches(
                    paths,
                    self.model.config().image_size,
                    self.config.batch_size,
                    seed,
                    eseq,
                )?;
                for batch in iter {
                    let images = batch?;
                    let x = stack_images(&images);
                    let row = self.train_step(state, stage, x.clone(), &x, None)?;
                    record(state, stage, row, &mut logger)?;
                }
            }
            DataRef::Split(split) => {
                let iter = batch_iter(
                    split,
                    Role::Train,
                    self.config.batch_size,
                    seed,
                    eseq,
                    self.config.fill,
                )?;
                for batch in iter {
                    let samples = batch?;
                    let tgt = stack_gt(&samples);
                    let row = if stage.step == 1 {
                        self.train_step(state, stage, tgt.clone(), &tgt, None)?
                    } else {
                        let x = stack_occ(&samples);
                        let m = stack_mask(&samples);
                        self.train_step(state, stage, x, &tgt, Some(&m))?
                    };
                    record(state, stage, row, &mut logger)?;
                }
            }
        }

        state.cursor.epoch += 1;
        state.cursor.epoch_seq += 1;
        let epochs_done = state.cursor.epoch;
        let mut boundary = false;
        if state.cursor.epoch >= stage.epochs {
            boundary = true;
            if let Some(lg) = logger.as_deref_mut() {
                lg.note_stage(&stage.name, state.cursor.step);
            }
            state.cursor.stage += 1;
            state.cursor.epoch = 0;
            if state.cursor.phase == TrainPhase::Pretrain
                && state.cursor.stage >= self.step2_start()
            {
                state.cursor.phase = TrainPhase::Main;
                state.cursor.stage = 0;
            }
        }
        if let Some(lg) = logger.as_deref_mut() {
            let cadence = self.config.checkpoint_every;
            if boundary || (cadence > 0 && epochs_done % cadence == 0) {
                save_checkpoint(state, self.model.config(), &lg.checkpoint_path())?;
            }
            lg.flush()?;
        }
        Ok(())
    }

    /// One alternating GAN step: discriminator first (when adversarial
    /// training is active), then the generator against the updated
    /// discriminator.
    fn train_step(
        &self,
        state: &mut TrainState,
        stage: &StageSpec,
        x_in: Array4<f32>,
        x_tgt: &Array4<f32>,
        mask: Option<&Array4<f32>>,
    ) -> Result<LossBreakdown, TrainingError> {
        let hyper = self.config.hyper();
        let w = &self.config.weights;
        let (y, gen_cache) = self.model.generator_train(&mut state.params, x_in, stage.mode)?;

        let mut parts = LossParts::default();
        let mut dy = Array4::<f32>::zeros(y.dim());
        if stage.active.rec {
            let (v, g) = rec_loss_grad(&y, x_tgt)?;
            parts.rec = Some(v as f64);
            dy.scaled_add(w.lambda_rec as f32, &g);
        }
        if stage.active.mask {
            let m = mask.ok_or(TrainingError::MissingMask)?;
            let (v, g) = mask_loss_grad(&y, x_tgt, m)?;
            parts.mask = Some(v as f64);
            dy.scaled_add(w.lambda_mask as f32, &g);
        }
        if stage.active.ssim {
            let y_unit = y.mapv(|v| (v + 1.0) * 0.5);
            let t_unit = x_tgt.mapv(|v| (v + 1.0) * 0.5);
            let (v, g) = ssim_loss_grad(&y_unit, &t_unit)?;
            parts.ssim = Some(v as f64);
            // Chain the signed-to-unit conversion factor.
            dy.scaled_add(0.5 * w.lambda_ssim as f32, &g);
        }
        if stage.active.adv {
            let disc_groups = [ParamGroup::Discriminator];
            let (p_real, c_real) =
                self.model.discriminator_train(&mut state.params, x_tgt.clone())?;
            let (p_fake, c_fake) = self.model.discriminator_train(&mut state.params, y.clone())?;
            let (v_d, d_pr, d_pf) = adv_loss_d_grad(&p_real, &p_fake)?;
            let mut d_grads = GradStore::new();
            self.model.discriminator_backward(&state.params, &c_real, &d_pr, &mut d_grads);
            self.model.discriminator_backward(&state.params, &c_fake, &d_pf, &mut d_grads);
            adam_step(&mut state.params, &d_grads, &mut state.disc_opt, &hyper, &disc_groups)?;
            parts.adv_d = Some(v_d as f64);

            // Generator term, measured against the just-updated critic.
            let (p_fake2, c_fake2) =
                self.model.discriminator_train(&mut state.params, y.clone())?;
            let (v_g, d_pf2) = adv_loss_g_grad(&p_fake2)?;
            let mut sunk = GradStore::new();
            let dy_adv =
                self.model.discriminator_backward(&state.params, &c_fake2, &d_pf2, &mut sunk);
            dy.scaled_add(w.lambda_adv as f32, &dy_adv);
            parts.adv_g = Some(v_g as f64);
        }

        let gen_groups: Vec<ParamGroup> = stage
            .trainable
            .iter()
            .copied()
            .filter(|g| *g != ParamGroup::Discriminator)
            .collect();
        let mut g_grads = GradStore::new();
        self.model.generator_backward(&state.params, gen_cache, dy, &mut g_grads);
        adam_step(&mut state.params, &g_grads, &mut state.gen_opt, &hyper, &gen_groups)?;

        let breakdown = total_loss(&parts, w, stage.active)?;
        if !breakdown.total.is_finite() {
            return Err(TrainingError::NonFinite {
                step: state.cursor.step,
                total: breakdown.total,
            });
        }
        Ok(breakdown)
    }
}

fn record(
    state: &mut TrainState,
    stage: &StageSpec,
    row: LossBreakdown,
    logger: &mut Option<&mut RunLogger>,
) -> Result<(), TrainingError> {
    if let Some(lg) = logger.as_deref_mut() {
        lg.log_row(state.cursor.step, &stage.name, &row)?;
    }
    state.history.push(LossRow {
        step: state.cursor.step,
        stage: stage.name.clone(),
        breakdown: row,
    });
    state.cursor.step += 1;
    Ok(())
}
