//! Facial landmark types and providers.
//!
//! Mask synthesis needs only a handful of eye-region points, so the schema
//! stays open: each provider declares its own point convention via
//! `schema_id`, and every [`LandmarkSet`] carries `eye_indices` naming the
//! points that outline the eyes.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::imaging::ImageTensor;

use super::DatasetError;

/// Detected 2D facial landmarks in pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    pub points: Vec<(f32, f32)>,
    pub schema_id: String,
    pub eye_indices: Vec<usize>,
}

impl LandmarkSet {
    pub fn new(
        points: Vec<(f32, f32)>,
        schema_id: impl Into<String>,
        eye_indices: Vec<usize>,
    ) -> Result<Self, DatasetError> {
        if eye_indices.is_empty() {
            return Err(DatasetError::NoEyeIndices);
        }
        if let Some(&bad) = eye_indices.iter().find(|&&i| i >= points.len()) {
            return Err(DatasetError::EyeIndexOutOfRange { index: bad, len: points.len() });
        }
        Ok(Self { points, schema_id: schema_id.into(), eye_indices })
    }

    /// Checks that every point lies inside a `height` x `width` image.
    pub fn validate_bounds(&self, height: usize, width: usize) -> Result<(), DatasetError> {
        for &(x, y) in &self.points {
            if !(x >= 0.0 && x < width as f32 && y >= 0.0 && y < height as f32) {
                return Err(DatasetError::PointOutOfBounds { x, y, width, height });
            }
        }
        Ok(())
    }

    /// Eye-region points, in `eye_indices` order.
    pub fn eye_points(&self) -> impl Iterator<Item = (f32, f32)> + '_ {
        self.eye_indices.iter().map(|&i| self.points[i])
    }
}

/// Source of landmarks for a face image.
///
/// `Ok(None)` means no face was found in the frame; callers skip it and
/// keep going. `Err` means the provider itself is unusable.
pub trait LandmarkProvider: Send + Sync {
    fn schema_id(&self) -> &str;
    fn detect(&self, img: &ImageTensor) -> Result<Option<LandmarkSet>, DatasetError>;
}

pub const SYNTHETIC_SCHEMA: &str = "synthetic-eyes-v1";

/// Four points per eye at fixed fractions of the frame: the corners and
/// lids of a face framed the way [`resize_crop`](crate::imaging::resize_crop)
/// leaves portrait crops. Points 0-3 are the left eye, 4-7 the right.
const EYE_FRACTIONS: [(f32, f32); 8] = [
    (0.28, 0.40),
    (0.36, 0.36),
    (0.44, 0.40),
    (0.36, 0.44),
    (0.56, 0.40),
    (0.64, 0.36),
    (0.72, 0.40),
    (0.64, 0.44),
];

/// Deterministic provider that always "finds" a face.
///
/// Serves corpora without landmark annotations and keeps tests hermetic.
#[derive(Debug, Default, Clone, Copy)]
pub struct SyntheticLandmarks;

impl LandmarkProvider for SyntheticLandmarks {
    fn schema_id(&self) -> &str {
        SYNTHETIC_SCHEMA
    }

    fn detect(&self, img: &ImageTensor) -> Result<Option<LandmarkSet>, DatasetError> {
        let (h, w) = (img.height(), img.width());
        let points = EYE_FRACTIONS
            .iter()
            .map(|&(fx, fy)| (fx * (w - 1) as f32, fy * (h - 1) as f32))
            .collect();
        Ok(Some(LandmarkSet::new(points, SYNTHETIC_SCHEMA, (0..8).collect())?))
    }
}

/// Caching front-end over a [`LandmarkProvider`].
///
/// Results are cached per `frame_id`, so repeated queries for the same
/// frame hit the provider once. Frames without a face are not cached; they
/// bump a skip counter instead.
pub struct LandmarkEngine {
    provider: Box<dyn LandmarkProvider>,
    cache: Mutex<HashMap<String, LandmarkSet>>,
    skipped: AtomicUsize,
}

impl LandmarkEngine {
    pub fn new(provider: Box<dyn LandmarkProvider>) -> Self {
        Self { provider, cache: Mutex::new(HashMap::new()), skipped: AtomicUsize::new(0) }
    }

    pub fn schema_id(&self) -> &str {
        self.provider.schema_id()
    }

    /// Landmarks for `frame_id`, or `None` when no face is found.
    ///
    /// Provider output is validated against the frame bounds before it
    /// enters the cache.
    pub fn detect(
        &self,
        frame_id: &str,
        img: &ImageTensor,
    ) -> Result<Option<LandmarkSet>, DatasetError> {
        if let Some(hit) = self.cache.lock().unwrap().get(frame_id) {
            return Ok(Some(hit.clone()));
        }
        match self.provider.detect(img)? {
            Some(set) => {
                set.validate_bounds(img.height(), img.width())?;
                self.cache.lock().unwrap().insert(frame_id.to_string(), set.clone());
                Ok(Some(set))
            }
            None => {
                self.skipped.fetch_add(1, Ordering::Relaxed);
                Ok(None)
            }
        }
    }

    /// Number of no-face frames seen so far.
    pub fn skipped(&self) -> usize {
        self.skipped.load(Ordering::Relaxed)
    }
}
