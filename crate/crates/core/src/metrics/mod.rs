//! Evaluation protocol: PSNR, SSIM, pluggable perceptual distance, and
//! comparison reports.
//!
//! All scoring happens full-frame in the unit range; inputs in the signed
//! network range are converted first. A masked-region PSNR can be added
//! per frame for diagnosis. Aggregates are plain arithmetic means reduced
//! in frame order, so every report is recomputable and deterministic.

mod ssim;

pub(crate) use ssim::{channel_ssim, channel_ssim_backward};
pub use ssim::{SSIM_K1, SSIM_K2, SSIM_L, SSIM_SIGMA, SSIM_WINDOW};

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{load_sample, DatasetError, DatasetSplit, Role, Sample, DEFAULT_FILL};
use crate::imaging::{BinaryMask, ImageTensor, ImagingError, RangeTag};
use crate::network::{ForwardMode, Model, NetworkError};
use crate::nn::{fnv1a_update, ParamStore, FNV_OFFSET};

/// Sentinel for zero-MSE pairs; finite reports stay comparable.
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch { a: (usize, usize, usize), b: (usize, usize, usize) },
    #[error("image {h}x{w} is smaller than the {win}x{win} SSIM window")]
    TooSmall { h: usize, w: usize, win: usize },
    #[error("mask has zero area; masked PSNR is undefined")]
    EmptyMask,
    #[error("perceptual plugin '{id}' failed: {reason}")]
    Plugin { id: String, reason: String },
    #[error("test split has no frames")]
    EmptySplit,
    #[error("report '{0}' has no per-frame rows")]
    EmptyReport(String),
    #[error("aggregate {metric} is {got} but the per-frame mean is {want}")]
    AggregateMismatch { metric: &'static str, got: f64, want: f64 },
    #[error("no reports to compare")]
    NoReports,
    #[error("reports cover different splits: '{a}' vs '{b}'")]
    SplitMismatch { a: String, b: String },
    #[error("bad report JSON: {0}")]
    BadJson(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

fn check_shapes(a: &ImageTensor, b: &ImageTensor) -> Result<(), MetricsError> {
    if a.data().dim() != b.data().dim() {
        return Err(MetricsError::ShapeMismatch { a: a.data().dim(), b: b.data().dim() });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over unit-range values.
///
/// `10 log10(1 / MSE)` over all channels, capped at [`PSNR_CAP_DB`];
/// identical images hit the cap.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64, MetricsError> {
    check_shapes(a, b)?;
    let au = a.to_range(RangeTag::Unit);
    let bu = b.to_range(RangeTag::Unit);
    let mut sum = 0.0f64;
    for (&x, &y) in au.data().iter().zip(bu.data().iter()) {
        let d = x as f64 - y as f64;
        sum += d * d;
    }
    let mse = sum / au.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// PSNR restricted to mask=1 pixels (all channels), for diagnosing
/// reconstruction quality inside the occluded region.
pub fn masked_psnr(
    a: &ImageTensor,
    b: &ImageTensor,
    mask: &BinaryMask,
) -> Result<f64, MetricsError> {
    check_shapes(a, b)?;
    let (c, h, w) = a.data().dim();
    if (mask.height(), mask.width()) != (h, w) {
        return Err(MetricsError::ShapeMismatch { a: (c, h, w), b: (1, mask.height(), mask.width()) });
    }
    if mask.area() == 0 {
        return Err(MetricsError::EmptyMask);
    }
    let au = a.to_range(RangeTag::Unit);
    let bu = b.to_range(RangeTag::Unit);
    let mut sum = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            if mask.data()[[0, y, x]] == 1.0 {
                for ch in 0..c {
                    let d = au.data()[[ch, y, x]] as f64 - bu.data()[[ch, y, x]] as f64;
                    sum += d * d;
                }
            }
        }
    }
    let mse = sum / (mask.area() * c) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean SSIM and the per-channel similarity map.
///
/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5, K1 0.01,
/// K2 0.03, dynamic range 1) in the unit range, computed per channel over
/// valid window positions and averaged. The map has shape
/// `(C, H-10, W-10)`.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<(f64, Array3<f64>), MetricsError> {
    check_shapes(a, b)?;
    let (c, h, w) = a.data().dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(MetricsError::TooSmall { h, w, win: SSIM_WINDOW });
    }
    let au = a.to_range(RangeTag::Unit);
    let bu = b.to_range(RangeTag::Unit);
    let mut maps = Array3::zeros((c, h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1));
    let mut total = 0.0f64;
    for ch in 0..c {
        let x: Array2<f64> = au.data().index_axis(Axis(0), ch).map(|&v| v as f64);
        let y: Array2<f64> = bu.data().index_axis(Axis(0), ch).map(|&v| v as f64);
        let out = channel_ssim(&x.view(), &y.view());
        total += out.map.sum();
        maps.index_axis_mut(Axis(0), ch).assign(&out.map);
    }
    let mean = total / maps.len() as f64;
    Ok((mean, maps))
}

/// Learned perceptual distance, supplied by an external plugin.
///
/// No reference network ships with the crate; registering a plugin adds
/// the column to reports, and its identity is recorded in the metadata.
pub trait PerceptualPlugin: Send + Sync {
    fn id(&self) -> &str;
    fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64, String>;
}

/// Plugin delegation: absent plugin means absent value.
pub fn perceptual_distance(
    a: &ImageTensor,
    b: &ImageTensor,
    plugin: Option<&dyn PerceptualPlugin>,
) -> Result<Option<f64>, MetricsError> {
    match plugin {
        None => Ok(None),
        Some(p) => match p.distance(a, b) {
            Ok(v) => Ok(Some(v)),
            Err(reason) => Err(MetricsError::Plugin { id: p.id().to_string(), reason }),
        },
    }
}

/// Anything that can turn an occluded sample into a reconstruction.
pub trait Reconstructor {
    fn reconstruct(&self, sample: &Sample) -> Result<ImageTensor, MetricsError>;

    /// Hash of whatever configuration determines the outputs.
    fn config_hash(&self) -> String;
}

/// The trained generator.
pub struct NetworkReconstructor<'a> {
    pub model: &'a Model,
    pub params: &'a ParamStore<f32>,
    pub mode: ForwardMode,
}

impl Reconstructor for NetworkReconstructor<'_> {
    fn reconstruct(&self, sample: &Sample) -> Result<ImageTensor, MetricsError> {
        let (img, _) = self.model.generator_forward(self.params, &sample.occluded, self.mode)?;
        Ok(img)
    }

    fn config_hash(&self) -> String {
        let mut h = FNV_OFFSET;
        let cfg = serde_json::to_vec(self.model.config()).expect("config serializes");
        fnv1a_update(&mut h, &cfg);
        fnv1a_update(&mut h, &self.params.fingerprint().to_le_bytes());
        format!("{h:016x}")
    }
}

/// Test hook that returns the ground truth: the score upper bound.
pub struct OracleReconstructor;

impl Reconstructor for OracleReconstructor {
    fn reconstruct(&self, sample: &Sample) -> Result<ImageTensor, MetricsError> {
        Ok(sample.ground_truth.clone())
    }

    fn config_hash(&self) -> String {
        "oracle".to_string()
    }
}

/// Baseline that echoes the occluded input unchanged.
pub struct IdentityReconstructor;

impl Reconstructor for IdentityReconstructor {
    fn reconstruct(&self, sample: &Sample) -> Result<ImageTensor, MetricsError> {
        Ok(sample.occluded.clone())
    }

    fn config_hash(&self) -> String {
        "identity".to_string()
    }
}

/// One scored test frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub frame_id: String,
    pub ssim: f64,
    pub psnr_db: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub perceptual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub masked_psnr_db: Option<f64>,
}

/// Arithmetic means of the per-frame columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub ssim: f64,
    pub psnr_db: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub perceptual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub masked_psnr_db: Option<f64>,
}

/// Scoring constants recorded for comparability across reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    pub psnr_cap_db: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub perceptual_plugin: Option<String>,
}

impl ReportMetadata {
    fn current(perceptual_plugin: Option<String>) -> Self {
        Self {
            ssim_window: SSIM_WINDOW,
            ssim_sigma: SSIM_SIGMA,
            ssim_k1: SSIM_K1,
            ssim_k2: SSIM_K2,
            psnr_cap_db: PSNR_CAP_DB,
            perceptual_plugin,
        }
    }
}

/// Full evaluation result for one method on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method_label: String,
    pub split: String,
    pub config_hash: String,
    pub metadata: ReportMetadata,
    pub per_frame: Vec<FrameScore>,
    pub aggregate: Aggregate,
}

fn aggregate_of(rows: &[FrameScore]) -> Aggregate {
    let n = rows.len() as f64;
    let mean = |f: fn(&FrameScore) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let opt_mean = |f: fn(&FrameScore) -> Option<f64>| -> Option<f64> {
        if rows.iter().all(|r| f(r).is_some()) {
            Some(rows.iter().map(|r| f(r).unwrap()).sum::<f64>() / n)
        } else {
            None
        }
    };
    Aggregate {
        ssim: mean(|r| r.ssim),
        psnr_db: mean(|r| r.psnr_db),
        perceptual: opt_mean(|r| r.perceptual),
        masked_psnr_db: opt_mean(|r| r.masked_psnr_db),
    }
}

impl MetricReport {
    /// Recomputes the aggregate from the rows and checks it matches.
    pub fn verify(&self) -> Result<(), MetricsError> {
        if self.per_frame.is_empty() {
            return Err(MetricsError::EmptyReport(self.method_label.clone()));
        }
        let want = aggregate_of(&self.per_frame);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
        let close_opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (None, None) => true,
            (Some(x), Some(y)) => close(x, y),
            _ => false,
        };
        let checks: [(&'static str, bool, f64, f64); 2] = [
            ("ssim", close(self.aggregate.ssim, want.ssim), self.aggregate.ssim, want.ssim),
            (
                "psnr_db",
                close(self.aggregate.psnr_db, want.psnr_db),
                self.aggregate.psnr_db,
                want.psnr_db,
            ),
        ];
        for (metric, ok, got, wanted) in checks {
            if !ok {
                return Err(MetricsError::AggregateMismatch { metric, got, want: wanted });
            }
        }
        if !close_opt(self.aggregate.perceptual, want.perceptual) {
            return Err(MetricsError::AggregateMismatch {
                metric: "perceptual",
                got: self.aggregate.perceptual.unwrap_or(f64::NAN),
                want: want.perceptual.unwrap_or(f64::NAN),
            });
        }
        if !close_opt(self.aggregate.masked_psnr_db, want.masked_psnr_db) {
            return Err(MetricsError::AggregateMismatch {
                metric: "masked_psnr_db",
                got: self.aggregate.masked_psnr_db.unwrap_or(f64::NAN),
                want: want.masked_psnr_db.unwrap_or(f64::NAN),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, MetricsError> {
        serde_json::from_str(text).map_err(|e| MetricsError::BadJson(e.to_string()))
    }
}

/// Deterministic descriptor of a split's test side.
pub fn split_descriptor(split: &DatasetSplit) -> String {
    let mut h = FNV_OFFSET;
    for m in &split.test_sessions {
        fnv1a_update(&mut h, m.subject_id.as_bytes());
        fnv1a_update(&mut h, m.session_id.as_bytes());
        fnv1a_update(&mut h, m.appearance_tag.as_bytes());
        fnv1a_update(&mut h, &m.frame_count.to_le_bytes());
    }
    format!(
        "test({} sessions, {} frames, {:016x})",
        split.test_sessions.len(),
        split.frame_total(Role::Test),
        h
    )
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub method_label: String,
    /// Occlusion fill for the test samples.
    pub fill: f32,
    /// Additionally score mask-region PSNR per frame.
    pub masked_psnr: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { method_label: "deoccl".to_string(), fill: DEFAULT_FILL, masked_psnr: false }
    }
}

/// Scores every test frame of the split with `recon` and aggregates.
///
/// Frames are visited in manifest order and reduced in that fixed order,
/// so the report is deterministic given the reconstructor and split.
pub fn evaluate(
    recon: &dyn Reconstructor,
    split: &DatasetSplit,
    options: &EvalOptions,
    plugin: Option<&dyn PerceptualPlugin>,
) -> Result<MetricReport, MetricsError> {
    if split.frame_total(Role::Test) == 0 {
        return Err(MetricsError::EmptySplit);
    }
    let mut per_frame = Vec::with_capacity(split.frame_total(Role::Test));
    for manifest in split.sessions(Role::Test) {
        for i in 0..manifest.frame_count {
            let sample = load_sample(manifest, i, options.fill)?;
            let rec = recon.reconstruct(&sample)?;
            let gt = &sample.ground_truth;
            let (ssim_v, _) = ssim(&rec, gt)?;
            let psnr_v = psnr(&rec, gt)?;
            let masked = if options.masked_psnr {
                Some(masked_psnr(&rec, gt, &sample.mask)?)
            } else {
                None
            };
            let perceptual = perceptual_distance(&rec, gt, plugin)?;
            per_frame.push(FrameScore {
                frame_id: sample.frame_id,
                ssim: ssim_v,
                psnr_db: psnr_v,
                perceptual,
                masked_psnr_db: masked,
            });
        }
    }
    let aggregate = aggregate_of(&per_frame);
    Ok(MetricReport {
        method_label: options.method_label.clone(),
        split: split_descriptor(split),
        config_hash: recon.config_hash(),
        metadata: ReportMetadata::current(plugin.map(|p| p.id().to_string())),
        per_frame,
        aggregate,
    })
}

/// One method row of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub ssim: f64,
    pub psnr_db: f64,
    pub perceptual: Option<f64>,
}

/// Methods side by side on one split; renders as text or CSV with the
/// fixed column order method, SSIM, PSNR, LPIPS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub split: String,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    /// Adds an externally sourced row (published numbers, baselines).
    pub fn push_reference(
        &mut self,
        method: impl Into<String>,
        ssim: f64,
        psnr_db: f64,
        perceptual: Option<f64>,
    ) {
        self.rows.push(ComparisonRow { method: method.into(), ssim, psnr_db, perceptual });
    }

    fn has_perceptual(&self) -> bool {
        self.rows.iter().any(|r| r.perceptual.is_some())
    }

    /// The perceptual column appears only when some row carries a value.
    pub fn to_csv(&self) -> String {
        let lpips = self.has_perceptual();
        let mut out = String::from(if lpips { "method,ssim,psnr_db,lpips\n" } else { "method,ssim,psnr_db\n" });
        for r in &self.rows {
            out.push_str(&format!("{},{},{}", r.method, r.ssim, r.psnr_db));
            if lpips {
                match r.perceptual {
                    Some(v) => out.push_str(&format!(",{v}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let lpips = self.has_perceptual();
        let width = self.rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max("method".len());
        let mut out = format!("{:<width$}  {:>8}  {:>9}", "method", "ssim", "psnr_db");
        if lpips {
            out.push_str(&format!("  {:>8}", "lpips"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{:<width$}  {:>8.3}  {:>9.3}", r.method, r.ssim, r.psnr_db));
            if lpips {
                match r.perceptual {
                    Some(v) => out.push_str(&format!("  {:>8.3}", v)),
                    None => out.push_str(&format!("  {:>8}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Collects verified reports from one split into a comparison table.
pub fn compare_report(reports: &[MetricReport]) -> Result<ComparisonTable, MetricsError> {
    let first = reports.first().ok_or(MetricsError::NoReports)?;
    let mut table = ComparisonTable { split: first.split.clone(), rows: Vec::new() };
    for r in reports {
        r.verify()?;
        if r.split != first.split {
            return Err(MetricsError::SplitMismatch {
                a: first.split.clone(),
                b: r.split.clone(),
            });
        }
        table.rows.push(ComparisonRow {
            method: r.method_label.clone(),
            ssim: r.aggregate.ssim,
            psnr_db: r.aggregate.psnr_db,
            perceptual: r.aggregate.perceptual,
        });
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{
        generate_masks, ingest_session, split_sessions, HoldoutPolicy, LandmarkEngine, MaskSpec,
        SessionManifest, SyntheticLandmarks,
    };
    use crate::imaging::save_image;
    use crate::network::NetworkConfig;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use std::fs;
    use tempfile::TempDir;

    fn unit_image(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> ImageTensor {
        let data = Array3::from_shape_fn((3, h, w), |(c, y, x)| f(c, y, x).clamp(0.0, 1.0));
        ImageTensor::new(data, RangeTag::Unit).unwrap()
    }

    fn random_unit(rng: &mut ChaCha20Rng, h: usize, w: usize) -> ImageTensor {
        unit_image(h, w, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn psnr_hits_the_closed_forms() {
        let a = unit_image(16, 16, |_, _, _| 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);

        let b = unit_image(16, 16, |_, _, _| 0.4);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-4);

        let zero = unit_image(16, 16, |_, _, _| 0.0);
        let one = unit_image(16, 16, |_, _, _| 1.0);
        assert!(psnr(&zero, &one).unwrap().abs() < 1e-12);

        let small = unit_image(8, 8, |_, _, _| 0.0);
        assert!(matches!(psnr(&a, &small), Err(MetricsError::ShapeMismatch { .. })));
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let base = unit_image(16, 16, |_, _, _| rng.random_range(0.0..0.5));
        let mut last = f64::INFINITY;
        for step in 1..=8 {
            let amp = step as f32 * 0.05;
            let noisy = unit_image(16, 16, |c, y, x| base.data()[[c, y, x]] + amp);
            let v = psnr(&base, &noisy).unwrap();
            assert!(v < last, "amp {amp}: {v} !< {last}");
            last = v;
        }
    }

    #[test]
    fn psnr_converts_signed_inputs() {
        let a = unit_image(16, 16, |c, y, x| ((c + y + x) % 7) as f32 / 7.0);
        let b = unit_image(16, 16, |c, y, x| ((c + y + x) % 5) as f32 / 5.0);
        let direct = psnr(&a, &b).unwrap();
        let signed = psnr(&a.to_range(RangeTag::Signed), &b).unwrap();
        assert!((direct - signed).abs() < 1e-5);
    }

    #[test]
    fn ssim_self_similarity_and_symmetry() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let a = random_unit(&mut rng, 20, 24);
        let (mean, map) = ssim(&a, &a).unwrap();
        assert_eq!(mean, 1.0);
        assert_eq!(map.dim(), (3, 10, 14));
        assert!(map.iter().all(|&v| v == 1.0));

        let b = random_unit(&mut rng, 20, 24);
        let ab = ssim(&a, &b).unwrap().0;
        let ba = ssim(&b, &a).unwrap().0;
        assert!((ab - ba).abs() < 1e-9);
        assert!((-1.0..1.0).contains(&ab));

        let tiny = random_unit(&mut rng, 8, 8);
        assert!(matches!(ssim(&tiny, &tiny), Err(MetricsError::TooSmall { .. })));
    }

    #[test]
    fn masked_psnr_scores_only_the_masked_region() {
        let a = unit_image(16, 16, |_, _, _| 0.2);
        // Differs by 0.1 outside the mask, 0.3 inside.
        let b = unit_image(16, 16, |_, y, x| if y < 8 && x < 8 { 0.5 } else { 0.3 });
        let mut m = Array3::zeros((1, 16, 16));
        for y in 0..8 {
            for x in 0..8 {
                m[[0, y, x]] = 1.0;
            }
        }
        let mask = BinaryMask::new(m).unwrap();
        let got = masked_psnr(&a, &b, &mask).unwrap();
        let want = 10.0 * (1.0f64 / (0.3f64 * 0.3)).log10();
        assert!((got - want).abs() < 1e-4, "{got} vs {want}");

        // Differences outside the mask are invisible to it.
        let c = unit_image(16, 16, |_, y, x| if y < 8 && x < 8 { 0.2 } else { 0.9 });
        assert_eq!(masked_psnr(&a, &c, &mask).unwrap(), PSNR_CAP_DB);

        assert!(matches!(
            masked_psnr(&a, &b, &BinaryMask::zeros(16, 16)),
            Err(MetricsError::EmptyMask)
        ));
    }

    struct MeanDiffPlugin;

    impl PerceptualPlugin for MeanDiffPlugin {
        fn id(&self) -> &str {
            "mean-diff-v0"
        }
        fn distance(&self, a: &ImageTensor, b: &ImageTensor) -> Result<f64, String> {
            let au = a.to_range(RangeTag::Unit);
            let bu = b.to_range(RangeTag::Unit);
            let sum: f64 = au
                .data()
                .iter()
                .zip(bu.data().iter())
                .map(|(&x, &y)| (x as f64 - y as f64).abs())
                .sum();
            Ok(sum / au.data().len() as f64)
        }
    }

    #[test]
    fn perceptual_distance_delegates_or_stays_absent() {
        let a = unit_image(16, 16, |_, _, _| 0.2);
        let b = unit_image(16, 16, |_, _, _| 0.5);
        assert_eq!(perceptual_distance(&a, &b, None).unwrap(), None);
        let plugin = MeanDiffPlugin;
        let d = perceptual_distance(&a, &b, Some(&plugin)).unwrap().unwrap();
        assert!((d - 0.3).abs() < 1e-6);
        assert_eq!(perceptual_distance(&a, &a, Some(&plugin)).unwrap(), Some(0.0));

        struct Broken;
        impl PerceptualPlugin for Broken {
            fn id(&self) -> &str {
                "broken"
            }
            fn distance(&self, _: &ImageTensor, _: &ImageTensor) -> Result<f64, String> {
                Err("weights missing".to_string())
            }
        }
        match perceptual_distance(&a, &b, Some(&Broken)) {
            Err(MetricsError::Plugin { id, reason }) => {
                assert_eq!(id, "broken");
                assert!(reason.contains("weights missing"));
            }
            other => panic!("expected a plugin error, got {other:?}"),
        }
    }

    fn gradient_image(h: usize, w: usize, phase: f32) -> ImageTensor {
        unit_image(h, w, |c, y, x| {
            0.5 + 0.5 * (((x * 3 + y * 7 + c * 11) as f32 * 0.11 + phase).sin())
        })
    }

    fn ingest_fixture(
        tmp: &TempDir,
        subject: &str,
        session: &str,
        tag: &str,
        n: usize,
        size: usize,
    ) -> SessionManifest {
        let src = tmp.path().join("src").join(subject).join(session);
        fs::create_dir_all(&src).unwrap();
        for i in 0..n {
            save_image(&gradient_image(size, size, i as f32), &src.join(format!("f{i:03}.png")))
                .unwrap();
        }
        let root = tmp.path().join("root");
        ingest_session(&root, &src, subject, session, tag, size).unwrap()
    }

    fn eval_split(tmp: &TempDir, size: usize) -> DatasetSplit {
        let m1 = ingest_fixture(tmp, "alice", "a1", "plain", 3, size);
        let m2 = ingest_fixture(tmp, "alice", "a2", "zzz", 2, size);
        let engine = LandmarkEngine::new(Box::new(SyntheticLandmarks));
        for m in [&m1, &m2] {
            generate_masks(m, &engine, &MaskSpec::default()).unwrap();
        }
        split_sessions(vec![m1, m2], &HoldoutPolicy::LastTag).unwrap()
    }

    #[test]
    fn oracle_evaluation_attains_the_upper_bounds() {
        let tmp = TempDir::new().unwrap();
        let split = eval_split(&tmp, 16);
        let opts = EvalOptions { masked_psnr: true, ..Default::default() };
        let report = evaluate(&OracleReconstructor, &split, &opts, None).unwrap();
        assert_eq!(report.per_frame.len(), 2);
        assert_eq!(report.aggregate.ssim, 1.0);
        assert_eq!(report.aggregate.psnr_db, PSNR_CAP_DB);
        assert_eq!(report.aggregate.masked_psnr_db, Some(PSNR_CAP_DB));
        assert_eq!(report.aggregate.perceptual, None);
        assert_eq!(report.config_hash, "oracle");
        report.verify().unwrap();
    }

    #[test]
    fn identity_evaluation_scores_below_the_bounds() {
        let tmp = TempDir::new().unwrap();
        let split = eval_split(&tmp, 16);
        let report =
            evaluate(&IdentityReconstructor, &split, &EvalOptions::default(), None).unwrap();
        assert!(report.aggregate.ssim < 1.0);
        assert!(report.aggregate.psnr_db < PSNR_CAP_DB);
        report.verify().unwrap();
    }

    #[test]
    fn network_evaluation_is_deterministic() {
        let tmp = TempDir::new().unwrap();
        let split = eval_split(&tmp, 16);
        let cfg = NetworkConfig {
            image_size: 16,
            base_filters: 4,
            bottleneck_dim: 8,
            encoder_depth: 2,
            attention_site_size: 4,
            batch_norm: false,
            mask_input_channel: false,
        };
        let (model, params) = crate::network::init_network::<f32>(cfg, 33).unwrap();
        let recon =
            NetworkReconstructor { model: &model, params: &params, mode: ForwardMode::Attention };
        let plugin = MeanDiffPlugin;
        let a = evaluate(&recon, &split, &EvalOptions::default(), Some(&plugin)).unwrap();
        let b = evaluate(&recon, &split, &EvalOptions::default(), Some(&plugin)).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.metadata.perceptual_plugin.as_deref(), Some("mean-diff-v0"));
        assert!(a.aggregate.perceptual.is_some());
        assert_eq!(a.per_frame.len(), 2);
        a.verify().unwrap();

        let round = MetricReport::from_json(&a.to_json()).unwrap();
        assert_eq!(round, a);
    }

    #[test]
    fn empty_test_split_is_an_error() {
        let split = DatasetSplit { train_sessions: vec![], test_sessions: vec![] };
        assert!(matches!(
            evaluate(&OracleReconstructor, &split, &EvalOptions::default(), None),
            Err(MetricsError::EmptySplit)
        ));
    }

    fn toy_report(label: &str, split: &str, ssim: f64) -> MetricReport {
        let per_frame = vec![
            FrameScore {
                frame_id: "a/0/000000".into(),
                ssim,
                psnr_db: 30.0,
                perceptual: None,
                masked_psnr_db: None,
            },
            FrameScore {
                frame_id: "a/0/000001".into(),
                ssim,
                psnr_db: 34.0,
                perceptual: None,
                masked_psnr_db: None,
            },
        ];
        let aggregate = aggregate_of(&per_frame);
        MetricReport {
            method_label: label.to_string(),
            split: split.to_string(),
            config_hash: "test".to_string(),
            metadata: ReportMetadata::current(None),
            per_frame,
            aggregate,
        }
    }

    #[test]
    fn comparison_tables_round_numbers_and_columns() {
        let a = toy_report("full", "split-x", 0.91);
        let b = toy_report("ablation", "split-x", 0.87);
        let mut table = compare_report(&[a.clone(), b]).unwrap();
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.rows[0].method, "full");
        assert!((table.rows[0].psnr_db - 32.0).abs() < 1e-12);

        // Published numbers ride along as reference rows.
        table.push_reference("reference-full", 0.918, 29.025, Some(0.042));
        table.push_reference("reference-rec-only", 0.920, 29.249, Some(0.072));
        let csv = table.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "method,ssim,psnr_db,lpips");
        assert_eq!(lines.next().unwrap(), "full,0.91,32,");
        let text = table.to_text();
        assert!(text.contains("reference-full"));
        assert!(text.contains("29.025"));
        assert!(text.contains("0.042"));

        // Without any perceptual values the column disappears.
        let plain = compare_report(&[a]).unwrap();
        assert_eq!(plain.to_csv().lines().next().unwrap(), "method,ssim,psnr_db");
        assert!(!plain.to_text().contains("lpips"));

        let mismatched = [toy_report("x", "split-x", 0.9), toy_report("y", "split-y", 0.9)];
        assert!(matches!(
            compare_report(&mismatched),
            Err(MetricsError::SplitMismatch { .. })
        ));
        assert!(matches!(compare_report(&[]), Err(MetricsError::NoReports)));
    }

    #[test]
    fn verify_catches_tampered_aggregates() {
        let mut r = toy_report("full", "s", 0.9);
        r.aggregate.ssim += 0.01;
        assert!(matches!(
            r.verify(),
            Err(MetricsError::AggregateMismatch { metric: "ssim", .. })
        ));
        let mut empty = toy_report("full", "s", 0.9);
        empty.per_frame.clear();
        assert!(matches!(empty.verify(), Err(MetricsError::EmptyReport(_))));
    }

    #[test]
    fn split_descriptor_tracks_test_content() {
        let tmp = TempDir::new().unwrap();
        let split = eval_split(&tmp, 16);
        let d1 = split_descriptor(&split);
        assert!(d1.contains("1 sessions") && d1.contains("2 frames"));
        let mut other = split.clone();
        other.test_sessions[0].frame_count = 1;
        other.test_sessions[0].frame_paths.pop();
        assert_ne!(split_descriptor(&other), d1);
    }
}
