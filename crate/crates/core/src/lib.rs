//! Person-specific face de-occlusion.
//!
//! The crate covers the full pipeline for learning to remove a synthetic
//! head-mounted-display occlusion from face images of a single person:
//!
//! - [`imaging`]: image/mask value types, PNG I/O, resize-crop, occlusion
//!   composition.
//! - [`dataset`]: session manifests, landmark detection, HMD mask synthesis,
//!   appearance-holdout splits, and deterministic batch iteration.
//! - [`nn`]: the parameter store and hand-backpropagated layers (conv,
//!   transposed conv, batch norm, linear, residual blocks).
//! - [`network`]: the attention-fused encoder-decoder generator and the
//!   DCGAN-style discriminator.
//! - [`losses`]: reconstruction, adversarial, SSIM, and masked-region loss
//!   terms with analytic gradients.
//! - [`metrics`]: SSIM/PSNR oracles, the perceptual-metric plugin interface,
//!   and the evaluation/report protocol.
//! - [`training`]: the staged two-step curriculum, Adam, checkpointing, and
//!   resume.

pub mod dataset;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod training;

pub use dataset::{DatasetSplit, HoldoutPolicy, MaskSpec, Role, Sample, SessionManifest};
pub use imaging::{BinaryMask, FaceBox, ImageTensor, RangeTag};
pub use losses::{ActiveSet, LossBreakdown, LossParts, LossWeights};
pub use metrics::{
    compare_report, evaluate, masked_psnr, psnr, ssim, ComparisonTable, EvalOptions, MetricReport,
    NetworkReconstructor, PerceptualPlugin, Reconstructor,
};
pub use network::{ForwardMode, Model, NetworkConfig};
pub use nn::{Elem, GradStore, ParamGroup, ParamKind, ParamStore};
pub use training::{
    default_schedule, load_checkpoint, save_checkpoint, scale_schedule, RunLogger, StageSpec,
    TrainConfig, TrainState, Trainer,
};
