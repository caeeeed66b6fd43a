//! Box and mask geometry.

mod bitmap;
pub mod matching;
pub mod morphology;
pub mod polygon;

pub use bitmap::Bitmap;
pub use matching::{greedy_match, match_by_iou, optimal_match, Matching};
pub use morphology::{connected_components, dilate, distance_to_background, erode, largest_component};
pub use polygon::{mask_to_polygons, merge_rings, rasterize_polygons};

use crate::error::{Error, Result};
use crate::types::{BBox, ImageRecord, MaskInstance};

/// Smallest box containing every foreground cell.
pub fn minimum_bounding_box(mask: &Bitmap) -> Result<BBox> {
    let mut it = mask.foreground();
    let (x0, y0) = it
        .next()
        .ok_or_else(|| Error::EmptyRegion("mask has no foreground pixel".into()))?;
    let (mut xmin, mut ymin, mut xmax, mut ymax) = (x0, y0, x0, y0);
    for (x, y) in it {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    Ok(BBox::new(
        xmin as f64,
        ymin as f64,
        xmax as f64 + 1.0,
        ymax as f64 + 1.0,
    ))
}

pub fn instance_bounding_box(inst: &MaskInstance, img: &ImageRecord) -> Result<BBox> {
    minimum_bounding_box(&inst.decode_for(img)?)
}

/// Scale width and height by `1 + fraction` about the center, then clamp to the image.
pub fn expand_box(b: &BBox, fraction: f64, img: &ImageRecord) -> Result<BBox> {
    if !(fraction >= 0.0) || !fraction.is_finite() {
        return Err(Error::Domain(format!(
            "expansion fraction must be finite and >= 0, got {fraction}"
        )));
    }
    let (cx, cy) = b.center();
    let hw = 0.5 * b.width() * (1.0 + fraction);
    let hh = 0.5 * b.height() * (1.0 + fraction);
    let (w, h) = (img.width as f64, img.height as f64);
    Ok(BBox {
        x_min: (cx - hw).clamp(0.0, w),
        y_min: (cy - hh).clamp(0.0, h),
        x_max: (cx + hw).clamp(0.0, w),
        y_max: (cy + hh).clamp(0.0, h),
        confidence: b.confidence,
    })
}

pub fn clamp_box(b: &BBox, width: u32, height: u32) -> BBox {
    let (w, h) = (width as f64, height as f64);
    BBox {
        x_min: b.x_min.clamp(0.0, w),
        y_min: b.y_min.clamp(0.0, h),
        x_max: b.x_max.clamp(0.0, w),
        y_max: b.y_max.clamp(0.0, h),
        confidence: b.confidence,
    }
}

pub fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let w = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let h = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h
    }
}

/// Area IoU. Two degenerate boxes count as identical only when their corners match.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return if a.same_corners(b) { 1.0 } else { 0.0 };
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Pixel IoU. Two empty masks are identical regions and score 1.
pub fn mask_iou(a: &Bitmap, b: &Bitmap) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::Domain(format!(
            "mask dimensions differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let union = a.union_count(b);
    if union == 0 {
        return Ok(1.0);
    }
    Ok(a.intersection_count(b) as f64 / union as f64)
}

pub fn instance_iou(a: &MaskInstance, b: &MaskInstance, img: &ImageRecord) -> Result<f64> {
    mask_iou(&a.decode_for(img)?, &b.decode_for(img)?)
}

/// Pixels whose cell center lies inside the box.
pub fn box_to_bitmap(b: &BBox, width: u32, height: u32) -> Bitmap {
    let mut bm = Bitmap::new(width, height);
    let (x0, x1) = center_span(b.x_min, b.x_max, width);
    let (y0, y1) = center_span(b.y_min, b.y_max, height);
    for y in y0..y1 {
        for x in x0..x1 {
            bm.set(x, y, true);
        }
    }
    bm
}

/// Half-open pixel index range whose centers `i + 0.5` fall in `[lo, hi)`.
pub(crate) fn center_span(lo: f64, hi: f64, limit: u32) -> (u32, u32) {
    let a = (lo - 0.5).ceil().max(0.0);
    let b = (hi - 0.5).ceil().max(0.0);
    let a = (a as u64).min(limit as u64) as u32;
    let b = (b as u64).min(limit as u64) as u32;
    (a, b.max(a))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bm_from(w: u32, h: u32, pts: &[(u32, u32)]) -> Bitmap {
        let mut b = Bitmap::new(w, h);
        for &(x, y) in pts {
            b.set(x, y, true);
        }
        b
    }

    #[test]
    fn mbb_of_two_pixels() {
        let b = minimum_bounding_box(&bm_from(10, 10, &[(2, 3), (5, 7)])).unwrap();
        assert_eq!(b, BBox::new(2.0, 3.0, 6.0, 8.0));
    }

    #[test]
    fn mbb_of_single_pixel_has_unit_area() {
        let b = minimum_bounding_box(&bm_from(10, 10, &[(4, 4)])).unwrap();
        assert_eq!(b, BBox::new(4.0, 4.0, 5.0, 5.0));
        assert_eq!(b.area(), 1.0);
    }

    #[test]
    fn mbb_of_empty_mask_fails() {
        assert!(matches!(
            minimum_bounding_box(&Bitmap::new(3, 3)),
            Err(Error::EmptyRegion(_))
        ));
    }

    #[test]
    fn mbb_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let bm = Bitmap::from_fn(32, 32, |_, _| rng.random_bool(0.05));
            if bm.is_empty() {
                continue;
            }
            // independent scan over every pixel
            let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
            for y in 0..32 {
                for x in 0..32 {
                    if bm.get(x, y) {
                        x0 = x0.min(x);
                        y0 = y0.min(y);
                        x1 = x1.max(x + 1);
                        y1 = y1.max(y + 1);
                    }
                }
            }
            let expected = BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64);
            assert_eq!(minimum_bounding_box(&bm).unwrap(), expected);
        }
    }

    #[test]
    fn expand_box_examples() {
        let img = ImageRecord::new("i", 100, 100);
        let b = BBox::new(10.0, 10.0, 30.0, 50.0);
        assert_eq!(expand_box(&b, 0.2, &img).unwrap(), BBox::new(8.0, 6.0, 32.0, 54.0));
        assert_eq!(expand_box(&b, 0.0, &img).unwrap(), b);
        let small = ImageRecord::new("s", 12, 12);
        assert_eq!(
            expand_box(&BBox::new(0.0, 0.0, 10.0, 10.0), 0.5, &small).unwrap(),
            BBox::new(0.0, 0.0, 12.0, 12.0)
        );
        assert!(matches!(expand_box(&b, -0.1, &img), Err(Error::Domain(_))));
    }

    #[test]
    fn box_iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &BBox::new(5.0, 5.0, 6.0, 6.0)), 0.0);
        let b = BBox::new(1.0, 0.0, 3.0, 2.0);
        assert!((box_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn mask_iou_examples() {
        let a = Bitmap::from_fn(8, 8, |x, _| x < 4);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(mask_iou(&a, &a.not()).unwrap(), 0.0);
        assert!(mask_iou(&a, &Bitmap::new(4, 4)).is_err());
    }

    #[test]
    fn mask_iou_matches_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a = Bitmap::from_fn(16, 12, |_, _| rng.random_bool(0.4));
            let b = Bitmap::from_fn(16, 12, |_, _| rng.random_bool(0.4));
            let (mut i, mut u) = (0usize, 0usize);
            for y in 0..12 {
                for x in 0..16 {
                    let (p, q) = (a.get(x, y), b.get(x, y));
                    i += (p && q) as usize;
                    u += (p || q) as usize;
                }
            }
            assert_eq!(mask_iou(&a, &b).unwrap(), i as f64 / u as f64);
        }
    }

    #[test]
    fn box_bitmap_uses_cell_centers() {
        let bm = box_to_bitmap(&BBox::new(1.0, 1.0, 3.0, 3.0), 5, 5);
        assert_eq!(bm.count(), 4);
        assert_eq!(minimum_bounding_box(&bm).unwrap(), BBox::new(1.0, 1.0, 3.0, 3.0));
    }

    fn arb_bitmap() -> impl Strategy<Value = Bitmap> {
        (1u32..20, 1u32..20).prop_flat_map(|(w, h)| {
            proptest::collection::vec(any::<bool>(), (w * h) as usize)
                .prop_map(move |bits| Bitmap::from_bits(w, h, bits))
        })
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0f64..50.0, 0.0f64..50.0, 0.0f64..30.0, 0.0f64..30.0)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn mbb_is_tight(bm in arb_bitmap()) {
            prop_assume!(!bm.is_empty());
            let b = minimum_bounding_box(&bm).unwrap();
            for (x, y) in bm.foreground() {
                prop_assert!(x as f64 >= b.x_min && (x + 1) as f64 <= b.x_max);
                prop_assert!(y as f64 >= b.y_min && (y + 1) as f64 <= b.y_max);
            }
            let (x0, y0, x1, y1) = (b.x_min as u32, b.y_min as u32, b.x_max as u32, b.y_max as u32);
            prop_assert!(bm.foreground().any(|(x, _)| x == x0));
            prop_assert!(bm.foreground().any(|(x, _)| x + 1 == x1));
            prop_assert!(bm.foreground().any(|(_, y)| y == y0));
            prop_assert!(bm.foreground().any(|(_, y)| y + 1 == y1));
        }

        #[test]
        fn box_iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = box_iou(&a, &b);
            prop_assert_eq!(ab, box_iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            if ab == 1.0 && a.area() > 0.0 {
                prop_assert!((a.x_min - b.x_min).abs() < 1e-9 && (a.y_max - b.y_max).abs() < 1e-9);
            }
        }

        #[test]
        fn mask_iou_symmetric(a in arb_bitmap(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = Bitmap::from_fn(a.width(), a.height(), |_, _| rng.random_bool(0.5));
            let ab = mask_iou(&a, &b).unwrap();
            prop_assert_eq!(ab, mask_iou(&b, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab == 1.0, a == b);
        }

        #[test]
        fn expansion_scales_area(cx in 200.0f64..300.0, cy in 200.0f64..300.0,
                                 w in 1.0f64..50.0, h in 1.0f64..50.0, f in 0.0f64..1.0) {
            let img = ImageRecord::new("big", 1000, 1000);
            let b = BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0);
            let e = expand_box(&b, f, &img).unwrap();
            let expected = b.area() * (1.0 + f) * (1.0 + f);
            prop_assert!((e.area() - expected).abs() <= 1e-9 * expected.max(1.0));
        }
    }
}
