//! Session ingestion, synthetic occlusions, splits, and batch streams.
//!
//! A dataset root holds one directory per subject and one per session
//! underneath, with normalized frames, their persisted masks, and a
//! line-oriented manifest:
//!
//! ```text
//! <root>/<subject>/<session>/frames/000000.png
//! <root>/<subject>/<session>/masks/000000.png
//! <root>/<subject>/<session>/manifest.txt
//! ```
//!
//! Training pairs are self-supervised: the target is the ingested frame,
//! the input is the same frame with a landmark-guided eye-region mask
//! filled in. Splits hold out whole sessions by appearance tag, so test
//! frames always show the subject in an appearance never trained on.

mod landmarks;
mod mask;

pub use landmarks::{
    LandmarkEngine, LandmarkProvider, LandmarkSet, SyntheticLandmarks, SYNTHETIC_SCHEMA,
};
pub use mask::{synthesize_hmd_mask, MaskShape, MaskSpec};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::imaging::{
    apply_occlusion, load_image, resize_crop, save_image, save_mask, BinaryMask, ImageTensor,
    ImagingError, RangeTag,
};

pub const MANIFEST_HEADER: &str = "deoccl-manifest v1";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Fill value for occluded pixels of signed network inputs.
pub const DEFAULT_FILL: f32 = -1.0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("cannot access '{path}': {reason}")]
    Io { path: String, reason: String },
    #[error("no PNG frames in '{0}'")]
    EmptySession(String),
    #[error("no session manifests under '{0}'")]
    EmptyRoot(String),
    #[error("manifest '{path}': {reason}")]
    BadManifest { path: String, reason: String },
    #[error("eye_indices is empty")]
    NoEyeIndices,
    #[error("eye index {index} out of range for {len} points")]
    EyeIndexOutOfRange { index: usize, len: usize },
    #[error("landmark ({x}, {y}) outside {width}x{height} image")]
    PointOutOfBounds { x: f32, y: f32, width: usize, height: usize },
    #[error("mask margin {0} outside [0, 1.5]")]
    BadMargin(f32),
    #[error("degenerate eye region: {width}x{height} bounding box")]
    DegenerateEyeRegion { width: f32, height: f32 },
    #[error("landmark provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("subject '{0}' has a single appearance tag; an unseen-appearance test needs two")]
    SingleAppearance(String),
    #[error("subject '{subject}' has no session tagged '{tag}'")]
    TagNotFound { subject: String, tag: String },
    #[error("no frames in the {0:?} role")]
    EmptyRole(Role),
    #[error("batch size must be >= 1")]
    ZeroBatch,
    #[error("missing mask for frame '{0}'; generate masks before sampling")]
    MissingMask(String),
}

fn io_err(path: &Path, e: std::io::Error) -> DatasetError {
    DatasetError::Io { path: path.display().to_string(), reason: e.to_string() }
}

/// One ingested video session: the ordered frames of a single subject in
/// a single appearance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionManifest {
    pub subject_id: String,
    pub session_id: String,
    pub appearance_tag: String,
    pub frame_count: usize,
    /// Paths relative to `session_dir`, in frame order.
    pub frame_paths: Vec<String>,
    /// Where the session lives on disk; derived, not serialized.
    pub session_dir: PathBuf,
}

impl SessionManifest {
    pub fn frame_path(&self, index: usize) -> PathBuf {
        self.session_dir.join(&self.frame_paths[index])
    }

    /// The mask sits under `masks/` with the frame's file name.
    pub fn mask_path(&self, index: usize) -> PathBuf {
        let name = Path::new(&self.frame_paths[index])
            .file_name()
            .expect("frame paths carry file names");
        self.session_dir.join("masks").join(name)
    }

    /// Stable identifier: `<subject>/<session>/<frame index>`.
    pub fn frame_id(&self, index: usize) -> String {
        format!("{}/{}/{:06}", self.subject_id, self.session_id, index)
    }
}

/// Writes `manifest.txt` into the session directory.
pub fn write_manifest(manifest: &SessionManifest) -> Result<PathBuf, DatasetError> {
    let mut text = String::new();
    let _ = writeln!(text, "{MANIFEST_HEADER}");
    let _ = writeln!(text, "subject_id={}", manifest.subject_id);
    let _ = writeln!(text, "session_id={}", manifest.session_id);
    let _ = writeln!(text, "appearance_tag={}", manifest.appearance_tag);
    let _ = writeln!(text, "frame_count={}", manifest.frame_count);
    for p in &manifest.frame_paths {
        let _ = writeln!(text, "{p}");
    }
    let path = manifest.session_dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

fn manifest_err(path: &Path, reason: impl Into<String>) -> DatasetError {
    DatasetError::BadManifest { path: path.display().to_string(), reason: reason.into() }
}

/// Reads and validates a session manifest.
///
/// Validation covers the header, the field lines, the frame-count
/// agreement, and the existence of every listed frame file.
pub fn read_manifest(path: &Path) -> Result<SessionManifest, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == MANIFEST_HEADER => {}
        other => {
            return Err(manifest_err(
                path,
                format!("expected header '{MANIFEST_HEADER}', found {other:?}"),
            ))
        }
    }
    let mut field = |key: &str| -> Result<String, DatasetError> {
        let line = lines
            .next()
            .ok_or_else(|| manifest_err(path, format!("missing '{key}' line")))?;
        line.strip_prefix(&format!("{key}="))
            .map(str::to_string)
            .ok_or_else(|| manifest_err(path, format!("expected '{key}=...', found '{line}'")))
    };
    let subject_id = field("subject_id")?;
    let session_id = field("session_id")?;
    let appearance_tag = field("appearance_tag")?;
    let count_text = field("frame_count")?;
    let frame_count: usize = count_text
        .parse()
        .map_err(|_| manifest_err(path, format!("bad frame_count '{count_text}'")))?;
    let frame_paths: Vec<String> =
        lines.filter(|l| !l.is_empty()).map(str::to_string).collect();
    if frame_paths.len() != frame_count {
        return Err(manifest_err(
            path,
            format!("frame_count={} but {} paths listed", frame_count, frame_paths.len()),
        ));
    }
    let session_dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    for p in &frame_paths {
        if Path::new(p).is_absolute() {
            return Err(manifest_err(path, format!("frame path '{p}' must be relative")));
        }
        if !session_dir.join(p).is_file() {
            return Err(manifest_err(path, format!("listed frame '{p}' does not exist")));
        }
    }
    Ok(SessionManifest {
        subject_id,
        session_id,
        appearance_tag,
        frame_count,
        frame_paths,
        session_dir,
    })
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .map(|ext| ext.eq_ignore_ascii_case("png"))
                    .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Ingests a directory of PNG frames as one session.
///
/// Frames are taken in filename order, center-cropped to a square,
/// resized to `target_size` (small sources are upscaled), and written
/// under `<root>/<subject>/<session>/frames/` with zero-padded names.
/// Re-running over the same inputs reproduces every output byte for byte.
/// One undecodable frame aborts the whole ingestion.
pub fn ingest_session(
    root: &Path,
    frames_dir: &Path,
    subject_id: &str,
    session_id: &str,
    appearance_tag: &str,
    target_size: usize,
) -> Result<SessionManifest, DatasetError> {
    let sources = list_pngs(frames_dir)?;
    if sources.is_empty() {
        return Err(DatasetError::EmptySession(frames_dir.display().to_string()));
    }
    let session_dir = root.join(subject_id).join(session_id);
    let frames_out = session_dir.join("frames");
    fs::create_dir_all(&frames_out).map_err(|e| io_err(&frames_out, e))?;

    let mut frame_paths = Vec::with_capacity(sources.len());
    for (i, src) in sources.iter().enumerate() {
        let img = load_image(src, RangeTag::Unit)?;
        let img = resize_crop(&img, target_size, None, true)?;
        let rel = format!("frames/{i:06}.png");
        save_image(&img, &session_dir.join(&rel))?;
        frame_paths.push(rel);
    }
    let manifest = SessionManifest {
        subject_id: subject_id.to_string(),
        session_id: session_id.to_string(),
        appearance_tag: appearance_tag.to_string(),
        frame_count: frame_paths.len(),
        frame_paths,
        session_dir,
    };
    write_manifest(&manifest)?;
    Ok(manifest)
}

/// Outcome of mask generation over one session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MaskReport {
    pub written: usize,
    pub skipped: usize,
}

/// Synthesizes and persists one eye-region mask per frame.
///
/// Frames where the provider finds no face, or whose eye box is
/// degenerate, are skipped and counted; any other failure aborts.
/// Deterministic providers make this idempotent.
pub fn generate_masks(
    manifest: &SessionManifest,
    engine: &LandmarkEngine,
    spec: &MaskSpec,
) -> Result<MaskReport, DatasetError> {
    spec.validate()?;
    let masks_dir = manifest.session_dir.join("masks");
    fs::create_dir_all(&masks_dir).map_err(|e| io_err(&masks_dir, e))?;
    let mut report = MaskReport::default();
    for i in 0..manifest.frame_count {
        let img = load_image(&manifest.frame_path(i), RangeTag::Unit)?;
        let set = match engine.detect(&manifest.frame_id(i), &img)? {
            Some(set) => set,
            None => {
                report.skipped += 1;
                continue;
            }
        };
        let mask = match synthesize_hmd_mask(&set, spec, img.height(), img.width()) {
            Ok(mask) => mask,
            Err(DatasetError::DegenerateEyeRegion { .. }) => {
                report.skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        save_mask(&mask, &manifest.mask_path(i))?;
        report.written += 1;
    }
    Ok(report)
}

/// One training or evaluation example.
#[derive(Debug, Clone)]
pub struct Sample {
    pub frame_id: String,
    pub session_id: String,
    pub subject_id: String,
    /// Unoccluded target, signed range.
    pub ground_truth: ImageTensor,
    /// The same frame with the mask region filled, signed range.
    pub occluded: ImageTensor,
    pub mask: BinaryMask,
}

/// Pairs a ground-truth frame with its occluded counterpart.
pub fn make_sample(
    ground_truth: ImageTensor,
    mask: BinaryMask,
    fill: f32,
    frame_id: impl Into<String>,
    session_id: impl Into<String>,
    subject_id: impl Into<String>,
) -> Result<Sample, DatasetError> {
    let occluded = apply_occlusion(&ground_truth, &mask, fill)?;
    Ok(Sample {
        frame_id: frame_id.into(),
        session_id: session_id.into(),
        subject_id: subject_id.into(),
        ground_truth,
        occluded,
        mask,
    })
}

/// Loads one frame of a session as a signed-range sample.
pub fn load_sample(
    manifest: &SessionManifest,
    index: usize,
    fill: f32,
) -> Result<Sample, DatasetError> {
    let gt = load_image(&manifest.frame_path(index), RangeTag::Unit)?.to_range(RangeTag::Signed);
    let mask_path = manifest.mask_path(index);
    if !mask_path.is_file() {
        return Err(DatasetError::MissingMask(manifest.frame_id(index)));
    }
    let mask = BinaryMask::load(&mask_path)?;
    make_sample(
        gt,
        mask,
        fill,
        manifest.frame_id(index),
        manifest.session_id.clone(),
        manifest.subject_id.clone(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Train,
    Test,
}

/// Which appearance tag of each subject is held out for testing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HoldoutPolicy {
    /// Hold out each subject's lexicographically greatest tag.
    LastTag,
    /// Hold out the named tag for every subject.
    Tag(String),
}

/// Disjoint train/test sessions; test appearances are unseen in training.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train_sessions: Vec<SessionManifest>,
    pub test_sessions: Vec<SessionManifest>,
}

impl DatasetSplit {
    pub fn sessions(&self, role: Role) -> &[SessionManifest] {
        match role {
            Role::Train => &self.train_sessions,
            Role::Test => &self.test_sessions,
        }
    }

    pub fn frame_total(&self, role: Role) -> usize {
        self.sessions(role).iter().map(|m| m.frame_count).sum()
    }
}

/// Partitions sessions per subject by held-out appearance tag.
pub fn split_sessions(
    manifests: Vec<SessionManifest>,
    policy: &HoldoutPolicy,
) -> Result<DatasetSplit, DatasetError> {
    let mut tags: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for m in &manifests {
        tags.entry(m.subject_id.clone()).or_default().insert(m.appearance_tag.clone());
    }
    let mut holdout: BTreeMap<String, String> = BTreeMap::new();
    for (subject, set) in &tags {
        if set.len() < 2 {
            return Err(DatasetError::SingleAppearance(subject.clone()));
        }
        let tag = match policy {
            HoldoutPolicy::LastTag => set.iter().next_back().unwrap().clone(),
            HoldoutPolicy::Tag(t) => {
                if !set.contains(t) {
                    return Err(DatasetError::TagNotFound {
                        subject: subject.clone(),
                        tag: t.clone(),
                    });
                }
                t.clone()
            }
        };
        holdout.insert(subject.clone(), tag);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for m in manifests {
        if holdout[&m.subject_id] == m.appearance_tag {
            test.push(m);
        } else {
            train.push(m);
        }
    }
    Ok(DatasetSplit { train_sessions: train, test_sessions: test })
}

/// Reads every session manifest under a dataset root.
///
/// Scan order is deterministic: subjects, then sessions, lexicographically.
pub fn scan_root(root: &Path) -> Result<Vec<SessionManifest>, DatasetError> {
    let mut dirs: Vec<PathBuf> = Vec::new();
    let subjects = fs::read_dir(root).map_err(|e| io_err(root, e))?;
    let mut subject_dirs: Vec<PathBuf> =
        subjects.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    subject_dirs.sort();
    for subject in subject_dirs {
        let sessions = fs::read_dir(&subject).map_err(|e| io_err(&subject, e))?;
        let mut session_dirs: Vec<PathBuf> =
            sessions.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
        session_dirs.sort();
        dirs.extend(session_dirs);
    }
    let mut manifests = Vec::new();
    for dir in dirs {
        let path = dir.join(MANIFEST_FILE);
        if path.is_file() {
            manifests.push(read_manifest(&path)?);
        }
    }
    if manifests.is_empty() {
        return Err(DatasetError::EmptyRoot(root.display().to_string()));
    }
    Ok(manifests)
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&epoch.to_le_bytes());
    ChaCha20Rng::from_seed(key)
}

/// Fisher-Yates driven by the seed+epoch stream.
fn shuffle<T>(items: &mut [T], seed: u64, epoch: u64) {
    let mut rng = epoch_rng(seed, epoch);
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// One epoch of sample batches over a split role.
///
/// Every frame appears exactly once per epoch. The train order is a
/// seed+epoch-determined permutation across all train sessions; the test
/// order follows the manifests. A final partial batch is yielded.
pub struct BatchIter<'a> {
    sessions: &'a [SessionManifest],
    order: Vec<(usize, usize)>,
    cursor: usize,
    batch_size: usize,
    fill: f32,
}

pub fn batch_iter(
    split: &DatasetSplit,
    role: Role,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    fill: f32,
) -> Result<BatchIter<'_>, DatasetError> {
    if batch_size == 0 {
        return Err(DatasetError::ZeroBatch);
    }
    let sessions = split.sessions(role);
    let mut order = Vec::with_capacity(split.frame_total(role));
    for (si, m) in sessions.iter().enumerate() {
        for fi in 0..m.frame_count {
            order.push((si, fi));
        }
    }
    if order.is_empty() {
        return Err(DatasetError::EmptyRole(role));
    }
    if role == Role::Train {
        shuffle(&mut order, seed, epoch);
    }
    Ok(BatchIter { sessions, order, cursor: 0, batch_size, fill })
}

impl BatchIter<'_> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn num_frames(&self) -> usize {
        self.order.len()
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<Vec<Sample>, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let mut batch = Vec::with_capacity(end - self.cursor);
        for &(si, fi) in &self.order[self.cursor..end] {
            match load_sample(&self.sessions[si], fi, self.fill) {
                Ok(sample) => batch.push(sample),
                Err(e) => {
                    self.cursor = self.order.len();
                    return Some(Err(e));
                }
            }
        }
        self.cursor = end;
        Some(Ok(batch))
    }
}

/// Lists the PNG images of a flat pretraining corpus in filename order.
pub fn list_corpus(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let files = list_pngs(dir)?;
    if files.is_empty() {
        return Err(DatasetError::EmptySession(dir.display().to_string()));
    }
    Ok(files)
}

/// One epoch of image batches over a flat corpus, for generic
/// autoencoder pretraining.
///
/// Images are center-cropped square, resized to `target_size` (small
/// sources upscaled), and returned in the signed network range. Order is
/// a seed+epoch-determined permutation, like the train role.
pub struct CorpusIter {
    paths: Vec<PathBuf>,
    target_size: usize,
    cursor: usize,
    batch_size: usize,
}

pub fn corpus_batches(
    paths: &[PathBuf],
    target_size: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<CorpusIter, DatasetError> {
    if batch_size == 0 {
        return Err(DatasetError::ZeroBatch);
    }
    if paths.is_empty() {
        return Err(DatasetError::EmptyRole(Role::Train));
    }
    let mut paths = paths.to_vec();
    shuffle(&mut paths, seed, epoch);
    Ok(CorpusIter { paths, target_size, cursor: 0, batch_size })
}

impl CorpusIter {
    pub fn num_batches(&self) -> usize {
        self.paths.len().div_ceil(self.batch_size)
    }
}

impl Iterator for CorpusIter {
    type Item = Result<Vec<ImageTensor>, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.paths.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.paths.len());
        let mut batch = Vec::with_capacity(end - self.cursor);
        for path in &self.paths[self.cursor..end] {
            let load = load_image(path, RangeTag::Unit)
                .and_then(|img| resize_crop(&img, self.target_size, None, true));
            match load {
                Ok(img) => batch.push(img.to_range(RangeTag::Signed)),
                Err(e) => {
                    self.cursor = self.paths.len();
                    return Some(Err(e.into()));
                }
            }
        }
        self.cursor = end;
        Some(Ok(batch))
    }
}
