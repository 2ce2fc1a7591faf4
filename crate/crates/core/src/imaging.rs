//! Image and mask value types, PNG I/O, geometric preprocessing, and
//! occlusion composition.
//!
//! All pixel data lives in channel-major `Array3<f32>` tensors tagged with
//! the value range they use: network tensors are signed `[-1, 1]`, metric
//! inputs are unit `[0, 1]`. Conversions between the two are explicit.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use ndarray::Array3;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("file not found: {0}")]
    MissingFile(String),
    #[error("cannot decode '{path}': {reason}")]
    Decode { path: String, reason: String },
    #[error("unsupported pixel format in '{path}': {format} (8-bit RGB or grayscale PNG required)")]
    UnsupportedFormat { path: String, format: String },
    #[error("bad image dimensions {width}x{height}: sides must be >= 8 and divisible by 4")]
    BadDimensions { width: usize, height: usize },
    #[error("channel count {0} unsupported (1 or 3)")]
    BadChannels(usize),
    #[error("value {value} outside {range:?} range")]
    OutOfRange { value: f32, range: RangeTag },
    #[error("mask pixel at ({x},{y}) has value {value}; masks must be exactly 0 or 1")]
    BadMaskValue { x: usize, y: usize, value: f32 },
    #[error("mask file '{path}' has pixel value {value}; mask PNGs must be pure 0 or 255")]
    BadMaskPixel { path: String, value: u8 },
    #[error("cannot write '{path}': {reason}")]
    Unwritable { path: String, reason: String },
    #[error("face box {x0},{y0} {w}x{h} exceeds source image {width}x{height}")]
    FaceBoxOutOfBounds { x0: usize, y0: usize, w: usize, h: usize, width: usize, height: usize },
    #[error("target size {0} must be >= 8 and divisible by 4")]
    BadTarget(usize),
    #[error("target size {target} exceeds crop extent {extent} and upscaling is disabled")]
    UpscaleDisabled { target: usize, extent: usize },
    #[error("shape mismatch: image is {img:?}, mask is {mask:?}")]
    MaskShapeMismatch { img: (usize, usize, usize), mask: (usize, usize) },
}

/// Value range an [`ImageTensor`] is expressed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RangeTag {
    /// `[0, 1]`, used by metrics.
    Unit,
    /// `[-1, 1]`, used by the networks.
    Signed,
}

impl RangeTag {
    pub fn bounds(self) -> (f32, f32) {
        match self {
            RangeTag::Unit => (0.0, 1.0),
            RangeTag::Signed => (-1.0, 1.0),
        }
    }
}

/// Channel-major (`C x H x W`) float image with a declared value range.
///
/// Construction validates the invariants once; the fields stay private so
/// every `ImageTensor` in circulation satisfies them: 1 or 3 channels, both
/// sides at least 8 and divisible by 4, every value inside the tagged range.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f32>,
    range: RangeTag,
}

impl ImageTensor {
    pub fn new(data: Array3<f32>, range: RangeTag) -> Result<Self, ImagingError> {
        let (c, h, w) = data.dim();
        if c != 1 && c != 3 {
            return Err(ImagingError::BadChannels(c));
        }
        check_dims(w, h)?;
        let (lo, hi) = range.bounds();
        for &v in data.iter() {
            if !(lo..=hi).contains(&v) {
                return Err(ImagingError::OutOfRange { value: v, range });
            }
        }
        Ok(Self { data, range })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn range(&self) -> RangeTag {
        self.range
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// Re-expresses the image in `target` range (affine map between `[0,1]`
    /// and `[-1,1]`). Returns a clone when the range already matches.
    pub fn to_range(&self, target: RangeTag) -> ImageTensor {
        if self.range == target {
            return self.clone();
        }
        let data = match (self.range, target) {
            (RangeTag::Unit, RangeTag::Signed) => self.data.mapv(|v| 2.0 * v - 1.0),
            (RangeTag::Signed, RangeTag::Unit) => self.data.mapv(|v| (v + 1.0) * 0.5),
            _ => unreachable!(),
        };
        let data = clamp_to_range(data, target);
        ImageTensor { data, range: target }
    }
}

/// Single-channel `1 x H x W` mask whose values are exactly 0.0 or 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    data: Array3<f32>,
}

impl BinaryMask {
    pub fn new(data: Array3<f32>) -> Result<Self, ImagingError> {
        let (c, _, _) = data.dim();
        if c != 1 {
            return Err(ImagingError::BadChannels(c));
        }
        for ((_, y, x), &v) in data.indexed_iter() {
            if v != 0.0 && v != 1.0 {
                return Err(ImagingError::BadMaskValue { x, y, value: v });
            }
        }
        Ok(Self { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { data: Array3::zeros((1, height, width)) }
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    /// Number of pixels set to 1.
    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1.0).count()
    }

    /// Loads a mask PNG written by [`save_mask`]: 8-bit grayscale with pixel
    /// values restricted to 0 and 255.
    pub fn load(path: &Path) -> Result<Self, ImagingError> {
        let img = decode_png(path)?;
        let gray = match img {
            DynamicImage::ImageLuma8(g) => g,
            other => {
                return Err(ImagingError::UnsupportedFormat {
                    path: path.display().to_string(),
                    format: format_name(&other),
                })
            }
        };
        let (w, h) = (gray.width() as usize, gray.height() as usize);
        let mut data = Array3::zeros((1, h, w));
        for (x, y, p) in gray.enumerate_pixels() {
            data[[0, y as usize, x as usize]] = match p.0[0] {
                0 => 0.0,
                255 => 1.0,
                v => {
                    return Err(ImagingError::BadMaskPixel {
                        path: path.display().to_string(),
                        value: v,
                    })
                }
            };
        }
        Ok(Self { data })
    }
}

/// Writes a mask as an 8-bit grayscale PNG with values 0 and 255.
pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<(), ImagingError> {
    let (h, w) = (mask.height(), mask.width());
    let mut img = GrayImage::new(w as u32, h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        p.0[0] = if mask.data[[0, y as usize, x as usize]] == 1.0 { 255 } else { 0 };
    }
    img.save_with_format(path, ImageFormat::Png).map_err(|e| ImagingError::Unwritable {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Axis-aligned crop rectangle in source pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaceBox {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

fn check_dims(width: usize, height: usize) -> Result<(), ImagingError> {
    if width < 8 || height < 8 || width % 4 != 0 || height % 4 != 0 {
        return Err(ImagingError::BadDimensions { width, height });
    }
    Ok(())
}

fn clamp_to_range(mut data: Array3<f32>, range: RangeTag) -> Array3<f32> {
    let (lo, hi) = range.bounds();
    data.mapv_inplace(|v| v.clamp(lo, hi));
    data
}

fn format_name(img: &DynamicImage) -> String {
    format!("{:?}", img.color())
}

fn decode_png(path: &Path) -> Result<DynamicImage, ImagingError> {
    if !path.exists() {
        return Err(ImagingError::MissingFile(path.display().to_string()));
    }
    image::ImageReader::open(path)
        .and_then(|r| Ok(r.with_guessed_format()?))
        .map_err(|e| ImagingError::Decode { path: path.display().to_string(), reason: e.to_string() })?
        .decode()
        .map_err(|e| ImagingError::Decode { path: path.display().to_string(), reason: e.to_string() })
}

/// Loads an 8-bit RGB or grayscale PNG into the requested value range.
///
/// A byte value `v` maps to `v/255` in unit range and `2 v/255 - 1` in
/// signed range, so 0 maps to the range floor and 255 to the ceiling.
pub fn load_image(path: &Path, range: RangeTag) -> Result<ImageTensor, ImagingError> {
    let img = decode_png(path)?;
    let (c, h, w, bytes): (usize, usize, usize, Vec<u8>) = match img {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            (1, h, w, g.into_raw())
        }
        DynamicImage::ImageRgb8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            (3, h, w, g.into_raw())
        }
        other => {
            return Err(ImagingError::UnsupportedFormat {
                path: path.display().to_string(),
                format: format_name(&other),
            })
        }
    };
    check_dims(w, h)?;
    let mut data = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = bytes[(y * w + x) * c + ch] as f32 / 255.0;
                data[[ch, y, x]] = match range {
                    RangeTag::Unit => v,
                    RangeTag::Signed => 2.0 * v - 1.0,
                };
            }
        }
    }
    Ok(ImageTensor { data, range })
}

/// Writes an image as an 8-bit PNG, quantizing with round-to-nearest.
///
/// Loading the written file back reproduces each channel value within
/// 1/255 absolute error.
pub fn save_image(img: &ImageTensor, path: &Path) -> Result<(), ImagingError> {
    let (c, h, w) = img.data.dim();
    let quant = |v: f32| -> u8 {
        let unit = match img.range {
            RangeTag::Unit => v,
            RangeTag::Signed => (v + 1.0) * 0.5,
        };
        (unit * 255.0).round().clamp(0.0, 255.0) as u8
    };
    let res = if c == 1 {
        let mut out = GrayImage::new(w as u32, h as u32);
        for (x, y, p) in out.enumerate_pixels_mut() {
            p.0[0] = quant(img.data[[0, y as usize, x as usize]]);
        }
        out.save_with_format(path, ImageFormat::Png)
    } else {
        let mut out = RgbImage::new(w as u32, h as u32);
        for (x, y, p) in out.enumerate_pixels_mut() {
            for ch in 0..3 {
                p.0[ch] = quant(img.data[[ch, y as usize, x as usize]]);
            }
        }
        out.save_with_format(path, ImageFormat::Png)
    };
    res.map_err(|e| ImagingError::Unwritable {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Crops to `face_box` (or the centered largest square) and rescales to
/// `target x target` with corner-aligned bilinear interpolation.
///
/// When the crop extent already equals `target` on both axes the pixels are
/// copied through bitwise. Upscaling beyond the crop extent is refused
/// unless `allow_upscale` is set.
pub fn resize_crop(
    img: &ImageTensor,
    target: usize,
    face_box: Option<FaceBox>,
    allow_upscale: bool,
) -> Result<ImageTensor, ImagingError> {
    if target < 8 || target % 4 != 0 {
        return Err(ImagingError::BadTarget(target));
    }
    let (c, h, w) = img.data.dim();
    let (x0, y0, cw, ch) = match face_box {
        Some(b) => {
            if b.width == 0 || b.height == 0 || b.x0 + b.width > w || b.y0 + b.height > h {
                return Err(ImagingError::FaceBoxOutOfBounds {
                    x0: b.x0,
                    y0: b.y0,
                    w: b.width,
                    h: b.height,
                    width: w,
                    height: h,
                });
            }
            (b.x0, b.y0, b.width, b.height)
        }
        None => {
            let side = w.min(h);
            ((w - side) / 2, (h - side) / 2, side, side)
        }
    };
    if !allow_upscale && (target > cw || target > ch) {
        return Err(ImagingError::UpscaleDisabled { target, extent: cw.min(ch) });
    }
    let mut out = Array3::zeros((c, target, target));
    let sy_step = (ch - 1) as f64 / (target - 1) as f64;
    let sx_step = (cw - 1) as f64 / (target - 1) as f64;
    for ty in 0..target {
        let sy = ty as f64 * sy_step;
        let iy = (sy.floor() as usize).min(ch - 1);
        let iy1 = (iy + 1).min(ch - 1);
        let fy = (sy - iy as f64) as f32;
        for tx in 0..target {
            let sx = tx as f64 * sx_step;
            let ix = (sx.floor() as usize).min(cw - 1);
            let ix1 = (ix + 1).min(cw - 1);
            let fx = (sx - ix as f64) as f32;
            for chn in 0..c {
                let p00 = img.data[[chn, y0 + iy, x0 + ix]];
                let p01 = img.data[[chn, y0 + iy, x0 + ix1]];
                let p10 = img.data[[chn, y0 + iy1, x0 + ix]];
                let p11 = img.data[[chn, y0 + iy1, x0 + ix1]];
                let top = p00 + (p01 - p00) * fx;
                let bot = p10 + (p11 - p10) * fx;
                out[[chn, ty, tx]] = top + (bot - top) * fy;
            }
        }
    }
    Ok(ImageTensor { data: clamp_to_range(out, img.range), range: img.range })
}

/// Replaces masked pixels with `fill` across all channels.
///
/// `fill` must lie inside the image's value range; the default occlusion
/// fill for signed network inputs is -1 (black). Applying the same mask
/// twice is a no-op after the first application.
pub fn apply_occlusion(
    img: &ImageTensor,
    mask: &BinaryMask,
    fill: f32,
) -> Result<ImageTensor, ImagingError> {
    let (c, h, w) = img.data.dim();
    if mask.height() != h || mask.width() != w {
        return Err(ImagingError::MaskShapeMismatch {
            img: (c, h, w),
            mask: (mask.height(), mask.width()),
        });
    }
    let (lo, hi) = img.range.bounds();
    if !(lo..=hi).contains(&fill) {
        return Err(ImagingError::OutOfRange { value: fill, range: img.range });
    }
    let mut data = img.data.clone();
    for y in 0..h {
        for x in 0..w {
            if mask.data[[0, y, x]] == 1.0 {
                for chn in 0..c {
                    data[[chn, y, x]] = fill;
                }
            }
        }
    }
    Ok(ImageTensor { data, range: img.range })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn temp_png(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("deoccl-imaging-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn random_image(rng: &mut ChaCha20Rng, c: usize, h: usize, w: usize, range: RangeTag) -> ImageTensor {
        let (lo, hi) = range.bounds();
        let data = Array3::from_shape_fn((c, h, w), |_| rng.random_range(lo..=hi));
        ImageTensor::new(data, range).unwrap()
    }

    #[test]
    fn construction_rejects_bad_shapes() {
        assert!(matches!(
            ImageTensor::new(Array3::zeros((2, 16, 16)), RangeTag::Unit),
            Err(ImagingError::BadChannels(2))
        ));
        assert!(matches!(
            ImageTensor::new(Array3::zeros((3, 16, 18)), RangeTag::Unit),
            Err(ImagingError::BadDimensions { .. })
        ));
        assert!(matches!(
            ImageTensor::new(Array3::zeros((3, 4, 4)), RangeTag::Unit),
            Err(ImagingError::BadDimensions { .. })
        ));
        let mut bad = Array3::zeros((3, 16, 16));
        bad[[0, 0, 0]] = 1.5;
        assert!(matches!(
            ImageTensor::new(bad, RangeTag::Unit),
            Err(ImagingError::OutOfRange { .. })
        ));
    }

    #[test]
    fn load_maps_byte_128_exactly() {
        let path = temp_png("gray128.png");
        let img = GrayImage::from_pixel(16, 16, image::Luma([128]));
        img.save_with_format(&path, ImageFormat::Png).unwrap();

        let unit = load_image(&path, RangeTag::Unit).unwrap();
        assert_eq!(unit.data()[[0, 0, 0]], 128.0 / 255.0);
        let signed = load_image(&path, RangeTag::Signed).unwrap();
        assert_eq!(signed.data()[[0, 0, 0]], 2.0 * 128.0 / 255.0 - 1.0);
    }

    #[test]
    fn load_rejects_missing_and_undecodable() {
        let missing = temp_png("does-not-exist.png");
        assert!(matches!(
            load_image(&missing, RangeTag::Unit),
            Err(ImagingError::MissingFile(_))
        ));

        let junk = temp_png("junk.png");
        std::fs::write(&junk, b"not a png at all").unwrap();
        assert!(matches!(load_image(&junk, RangeTag::Unit), Err(ImagingError::Decode { .. })));
    }

    #[test]
    fn load_rejects_rgba_and_16bit() {
        let rgba_path = temp_png("rgba.png");
        let rgba = image::RgbaImage::from_pixel(16, 16, image::Rgba([1, 2, 3, 4]));
        rgba.save_with_format(&rgba_path, ImageFormat::Png).unwrap();
        assert!(matches!(
            load_image(&rgba_path, RangeTag::Unit),
            Err(ImagingError::UnsupportedFormat { .. })
        ));

        let deep_path = temp_png("gray16.png");
        let deep = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_pixel(16, 16, image::Luma([1000]));
        deep.save_with_format(&deep_path, ImageFormat::Png).unwrap();
        assert!(matches!(
            load_image(&deep_path, RangeTag::Unit),
            Err(ImagingError::UnsupportedFormat { .. })
        ));
    }

    #[test]
    fn save_load_round_trip_within_one_step() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for &range in &[RangeTag::Unit, RangeTag::Signed] {
            for &c in &[1usize, 3] {
                let img = random_image(&mut rng, c, 16, 24, range);
                let path = temp_png(&format!("round-{c}-{range:?}.png"));
                save_image(&img, &path).unwrap();
                let back = load_image(&path, range).unwrap();
                let step = match range {
                    RangeTag::Unit => 1.0 / 255.0,
                    RangeTag::Signed => 2.0 / 255.0,
                };
                let worst = img
                    .data()
                    .iter()
                    .zip(back.data().iter())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f32, f32::max);
                assert!(worst <= step / 2.0 + 1e-6, "round trip error {worst} for {range:?}");
            }
        }
    }

    #[test]
    fn range_conversion_round_trips() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 3, 16, 16, RangeTag::Unit);
        let back = img.to_range(RangeTag::Signed).to_range(RangeTag::Unit);
        let worst = img
            .data()
            .iter()
            .zip(back.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst <= 1e-6);
    }

    #[test]
    fn resize_identity_is_bitwise() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let img = random_image(&mut rng, 3, 32, 32, RangeTag::Signed);
        let out = resize_crop(&img, 32, None, false).unwrap();
        assert_eq!(img.data(), out.data());
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = ImageTensor::new(
            Array3::from_elem((3, 48, 64), 0.25f32),
            RangeTag::Unit,
        )
        .unwrap();
        let out = resize_crop(&img, 16, None, false).unwrap();
        for &v in out.data().iter() {
            assert!((v - 0.25).abs() <= 1e-6);
        }
    }

    #[test]
    fn resize_crops_centered_square() {
        // 3 channels, 16 rows, 32 cols: the centered square is cols 8..24.
        let mut data = Array3::zeros((1, 16, 32));
        for y in 0..16 {
            for x in 8..24 {
                data[[0, y, x]] = 1.0;
            }
        }
        let img = ImageTensor::new(data, RangeTag::Unit).unwrap();
        let out = resize_crop(&img, 16, None, false).unwrap();
        for &v in out.data().iter() {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn resize_respects_face_box() {
        let mut data = Array3::zeros((1, 32, 32));
        for y in 4..20 {
            for x in 8..24 {
                data[[0, y, x]] = 1.0;
            }
        }
        let img = ImageTensor::new(data, RangeTag::Unit).unwrap();
        let fb = FaceBox { x0: 8, y0: 4, width: 16, height: 16 };
        let out = resize_crop(&img, 16, Some(fb), false).unwrap();
        for &v in out.data().iter() {
            assert_eq!(v, 1.0);
        }

        let oob = FaceBox { x0: 20, y0: 20, width: 16, height: 16 };
        assert!(matches!(
            resize_crop(&img, 16, Some(oob), false),
            Err(ImagingError::FaceBoxOutOfBounds { .. })
        ));
    }

    #[test]
    fn resize_upscale_guard() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let img = random_image(&mut rng, 3, 16, 16, RangeTag::Unit);
        assert!(matches!(
            resize_crop(&img, 32, None, false),
            Err(ImagingError::UpscaleDisabled { .. })
        ));
        let up = resize_crop(&img, 32, None, true).unwrap();
        assert_eq!(up.data().dim(), (3, 32, 32));
    }

    #[test]
    fn resize_rejects_bad_target() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let img = random_image(&mut rng, 3, 32, 32, RangeTag::Unit);
        assert!(matches!(resize_crop(&img, 18, None, false), Err(ImagingError::BadTarget(18))));
        assert!(matches!(resize_crop(&img, 4, None, false), Err(ImagingError::BadTarget(4))));
    }

    #[test]
    fn occlusion_matches_pixel_oracle_and_is_idempotent() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let img = random_image(&mut rng, 3, 16, 16, RangeTag::Signed);
        let mask_data = Array3::from_shape_fn((1, 16, 16), |_| {
            if rng.random_bool(0.3) { 1.0 } else { 0.0 }
        });
        let mask = BinaryMask::new(mask_data).unwrap();

        let occ = apply_occlusion(&img, &mask, -1.0).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                for c in 0..3 {
                    let expect = if mask.data()[[0, y, x]] == 1.0 {
                        -1.0
                    } else {
                        img.data()[[c, y, x]]
                    };
                    assert_eq!(occ.data()[[c, y, x]], expect);
                }
            }
        }

        let twice = apply_occlusion(&occ, &mask, -1.0).unwrap();
        assert_eq!(occ.data(), twice.data());
    }

    #[test]
    fn occlusion_rejects_bad_fill_and_shape() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let img = random_image(&mut rng, 3, 16, 16, RangeTag::Unit);
        let mask = BinaryMask::zeros(16, 16);
        assert!(matches!(
            apply_occlusion(&img, &mask, -1.0),
            Err(ImagingError::OutOfRange { .. })
        ));
        let small = BinaryMask::zeros(8, 8);
        assert!(matches!(
            apply_occlusion(&img, &small, 0.5),
            Err(ImagingError::MaskShapeMismatch { .. })
        ));
    }

    #[test]
    fn mask_round_trip_and_validation() {
        let mut data = Array3::zeros((1, 16, 16));
        data[[0, 3, 4]] = 1.0;
        data[[0, 8, 2]] = 1.0;
        let mask = BinaryMask::new(data).unwrap();
        let path = temp_png("mask.png");
        save_mask(&mask, &path).unwrap();
        let back = BinaryMask::load(&path).unwrap();
        assert_eq!(mask.data(), back.data());
        assert_eq!(back.area(), 2);

        let mut bad = Array3::zeros((1, 8, 8));
        bad[[0, 0, 0]] = 0.5;
        assert!(matches!(BinaryMask::new(bad), Err(ImagingError::BadMaskValue { .. })));

        let gray_path = temp_png("graymask.png");
        let gray = GrayImage::from_pixel(8, 8, image::Luma([7]));
        gray.save_with_format(&gray_path, ImageFormat::Png).unwrap();
        assert!(matches!(BinaryMask::load(&gray_path), Err(ImagingError::BadMaskPixel { .. })));
    }
}
