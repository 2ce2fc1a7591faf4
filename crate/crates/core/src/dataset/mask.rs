//! Synthetic HMD occluders derived from eye landmarks.

use ndarray::{s, Array3};

use crate::imaging::BinaryMask;

use super::landmarks::LandmarkSet;
use super::DatasetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskShape {
    Rectangle,
    RoundedRectangle,
}

/// Geometry of the synthetic occluder, relative to the eye bounding box.
///
/// Margins are fractions of the eye box's own width and height added on
/// each side; the defaults give a visor-like slab that covers the brows
/// and the top of the nose bridge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskSpec {
    pub horizontal_margin: f32,
    pub vertical_margin: f32,
    pub shape: MaskShape,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self { horizontal_margin: 0.15, vertical_margin: 0.60, shape: MaskShape::Rectangle }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        for m in [self.horizontal_margin, self.vertical_margin] {
            if !(0.0..=1.5).contains(&m) {
                return Err(DatasetError::BadMargin(m));
            }
        }
        Ok(())
    }
}

/// Builds the occluder mask for one frame.
///
/// The axis-aligned bounding box of the eye points is expanded by
/// `horizontal_margin` times its width on the left and right and
/// `vertical_margin` times its height above and below; both ends are then
/// floored to pixel indices, taken inclusive, and clamped to the image.
/// Rounded corners are carved no deeper than the expansion band, so every
/// eye landmark's pixel always stays inside the mask.
pub fn synthesize_hmd_mask(
    landmarks: &LandmarkSet,
    spec: &MaskSpec,
    height: usize,
    width: usize,
) -> Result<BinaryMask, DatasetError> {
    spec.validate()?;
    landmarks.validate_bounds(height, width)?;

    let (mut x_min, mut y_min) = (f32::INFINITY, f32::INFINITY);
    let (mut x_max, mut y_max) = (f32::NEG_INFINITY, f32::NEG_INFINITY);
    for (x, y) in landmarks.eye_points() {
        x_min = x_min.min(x);
        x_max = x_max.max(x);
        y_min = y_min.min(y);
        y_max = y_max.max(y);
    }
    let (ew, eh) = (x_max - x_min, y_max - y_min);
    if ew <= 0.0 || eh <= 0.0 {
        return Err(DatasetError::DegenerateEyeRegion { width: ew, height: eh });
    }

    let ex = spec.horizontal_margin * ew;
    let ey = spec.vertical_margin * eh;
    let x0 = (x_min - ex).floor().max(0.0) as usize;
    let y0 = (y_min - ey).floor().max(0.0) as usize;
    let x1 = ((x_max + ex).floor() as usize).min(width - 1);
    let y1 = ((y_max + ey).floor() as usize).min(height - 1);

    let mut data = Array3::zeros((1, height, width));
    data.slice_mut(s![0, y0..=y1, x0..=x1]).fill(1.0);

    if spec.shape == MaskShape::RoundedRectangle {
        // The radius may not exceed the narrowest strip between the box
        // edge and the floored eye box, or carving could evict a landmark.
        let guard = (x_min.floor() as usize - x0)
            .min(x1 - x_max.floor() as usize)
            .min(y_min.floor() as usize - y0)
            .min(y1 - y_max.floor() as usize);
        let (bw, bh) = ((x1 - x0 + 1) as f32, (y1 - y0 + 1) as f32);
        let r = (0.2 * bw.min(bh)).min(guard as f32).floor();
        if r >= 1.0 {
            let cx0 = x0 as f32 + r;
            let cx1 = x1 as f32 - r;
            let cy0 = y0 as f32 + r;
            let cy1 = y1 as f32 - r;
            for py in y0..=y1 {
                for px in x0..=x1 {
                    let dx = (cx0 - px as f32).max(px as f32 - cx1).max(0.0);
                    let dy = (cy0 - py as f32).max(py as f32 - cy1).max(0.0);
                    if dx * dx + dy * dy > r * r {
                        data[[0, py, px]] = 0.0;
                    }
                }
            }
        }
    }

    Ok(BinaryMask::new(data).expect("synthesized masks are binary"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn eyes(points: Vec<(f32, f32)>) -> LandmarkSet {
        let n = points.len();
        LandmarkSet::new(points, "test", (0..n).collect()).unwrap()
    }

    #[test]
    fn rectangle_matches_the_box_formula_pixelwise() {
        // Eye box (60,90)-(196,120) with margins 0.1/0.5 expands to
        // (46,75)-(209,135); brute-force every pixel against that box.
        let set = LandmarkSet::new(
            vec![(60.0, 90.0), (196.0, 120.0), (5.0, 5.0)],
            "test",
            vec![0, 1],
        )
        .unwrap();
        let spec =
            MaskSpec { horizontal_margin: 0.1, vertical_margin: 0.5, shape: MaskShape::Rectangle };
        let mask = synthesize_hmd_mask(&set, &spec, 256, 256).unwrap();
        for y in 0..256 {
            for x in 0..256 {
                let inside = (46..=209).contains(&x) && (75..=135).contains(&y);
                let want = if inside { 1.0 } else { 0.0 };
                assert_eq!(mask.data()[[0, y, x]], want, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn degenerate_eye_region_is_an_error() {
        let set = eyes(vec![(60.0, 100.0), (196.0, 100.0)]);
        let spec = MaskSpec { horizontal_margin: 0.0, vertical_margin: 0.0, ..Default::default() };
        assert!(matches!(
            synthesize_hmd_mask(&set, &spec, 256, 256),
            Err(DatasetError::DegenerateEyeRegion { .. })
        ));
    }

    #[test]
    fn margins_outside_the_allowed_band_are_rejected() {
        let set = eyes(vec![(10.0, 10.0), (30.0, 20.0)]);
        for bad in [
            MaskSpec { horizontal_margin: -0.1, ..Default::default() },
            MaskSpec { vertical_margin: 1.6, ..Default::default() },
        ] {
            assert!(matches!(
                synthesize_hmd_mask(&set, &bad, 64, 64),
                Err(DatasetError::BadMargin(_))
            ));
        }
    }

    #[test]
    fn rounded_corners_carve_strictly_inside_the_rectangle() {
        let set = eyes(vec![(18.0, 25.0), (45.0, 25.0), (31.0, 29.0), (31.0, 21.0)]);
        let rect =
            MaskSpec { horizontal_margin: 0.5, vertical_margin: 1.2, shape: MaskShape::Rectangle };
        let round = MaskSpec { shape: MaskShape::RoundedRectangle, ..rect };
        let a = synthesize_hmd_mask(&set, &rect, 64, 64).unwrap();
        let b = synthesize_hmd_mask(&set, &round, 64, 64).unwrap();
        assert!(b.area() < a.area());
        for ((c, y, x), &v) in b.data().indexed_iter() {
            assert!(v <= a.data()[[c, y, x]]);
        }
        for (x, y) in set.eye_points() {
            assert_eq!(b.data()[[0, y.floor() as usize, x.floor() as usize]], 1.0);
        }
    }

    #[test]
    fn tiny_radius_degrades_to_the_plain_rectangle() {
        let set = eyes(vec![(18.0, 25.0), (45.0, 25.0), (31.0, 29.0), (31.0, 21.0)]);
        let rect = MaskSpec {
            horizontal_margin: 0.01,
            vertical_margin: 0.01,
            shape: MaskShape::Rectangle,
        };
        let round = MaskSpec { shape: MaskShape::RoundedRectangle, ..rect };
        let a = synthesize_hmd_mask(&set, &rect, 64, 64).unwrap();
        let b = synthesize_hmd_mask(&set, &round, 64, 64).unwrap();
        assert_eq!(a.data(), b.data());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn mask_contains_every_eye_landmark(
            pts in prop::collection::vec((0.0f32..47.9, 0.0f32..47.9), 2..8),
            hm in 0.0f32..1.5,
            vm in 0.0f32..1.5,
            rounded in any::<bool>(),
        ) {
            let (mut ew, mut eh) = (0.0f32, 0.0f32);
            for &(x, y) in &pts {
                for &(x2, y2) in &pts {
                    ew = ew.max(x - x2);
                    eh = eh.max(y - y2);
                }
            }
            prop_assume!(ew > 0.0 && eh > 0.0);
            let shape = if rounded { MaskShape::RoundedRectangle } else { MaskShape::Rectangle };
            let spec = MaskSpec { horizontal_margin: hm, vertical_margin: vm, shape };
            let mask = synthesize_hmd_mask(&eyes(pts.clone()), &spec, 48, 48).unwrap();
            for (x, y) in pts {
                prop_assert_eq!(mask.data()[[0, y.floor() as usize, x.floor() as usize]], 1.0);
            }
        }

        #[test]
        fn mask_depends_only_on_the_eye_point_set(
            pts in prop::collection::vec((0.0f32..31.9, 0.0f32..31.9), 2..8),
            hm in 0.0f32..1.5,
            vm in 0.0f32..1.5,
        ) {
            let (mut ew, mut eh) = (0.0f32, 0.0f32);
            for &(x, y) in &pts {
                for &(x2, y2) in &pts {
                    ew = ew.max(x - x2);
                    eh = eh.max(y - y2);
                }
            }
            prop_assume!(ew > 0.0 && eh > 0.0);
            let spec = MaskSpec { horizontal_margin: hm, vertical_margin: vm, ..Default::default() };
            let fwd = synthesize_hmd_mask(&eyes(pts.clone()), &spec, 32, 32).unwrap();
            let mut rev = pts;
            rev.reverse();
            let bwd = synthesize_hmd_mask(&eyes(rev), &spec, 32, 32).unwrap();
            prop_assert_eq!(fwd.data(), bwd.data());
        }
    }
}
