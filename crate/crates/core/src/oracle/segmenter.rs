//! Oracle segmenter.
//!
//! Box prompts select the hidden instance whose box overlaps the prompt best.
//! Its mask is grown or shrunk by a per-instance seeded radius in `[-ρ, ρ]`,
//! then background pixels inside the prompt box are added where a fixed
//! per-pixel hash falls below `leak`. Because the hash does not depend on the
//! prompt, a larger box leaks a superset of pixels.
//!
//! Point prompts return whole / part / sub-part candidates at confidences
//! 0.9 / 0.6 / 0.3. Negative points carve out pixels nearer to them than to
//! any positive point inside the instance they touch.

use std::sync::Arc;

use rand::Rng;

use super::{AdapterError, Candidate, GroundTruth, Level, Segmenter, SegmenterResult, TruthImage};
use crate::error::Result;
use crate::geometry::morphology::{dilate, erode, largest_component};
use crate::geometry::{box_iou, box_to_bitmap, Bitmap};
use crate::rng;
use crate::types::{BBox, ImageRecord, MaskInstance, Point, PromptSet};

pub const WHOLE_CONFIDENCE: f64 = 0.9;
pub const PART_CONFIDENCE: f64 = 0.6;
pub const SUBPART_CONFIDENCE: f64 = 0.3;
/// Erosion radius separating the hierarchy levels.
const PART_RADIUS: f64 = 3.0;

#[derive(Clone, Debug)]
pub struct OracleSegmenter {
    truth: Arc<GroundTruth>,
    /// ρ: maximum morphological perturbation radius in pixels.
    pub noise_radius: f64,
    /// Probability that a background pixel inside the prompt box leaks into the mask.
    pub leak: f64,
    pub seed: u64,
}

impl OracleSegmenter {
    pub fn new(truth: Arc<GroundTruth>, noise_radius: f64, seed: u64) -> Self {
        Self {
            truth,
            noise_radius,
            leak: 0.0,
            seed,
        }
    }

    pub fn with_leak(mut self, leak: f64) -> Self {
        self.leak = leak;
        self
    }

    fn perturbed(&self, t: &TruthImage, idx: usize) -> Bitmap {
        let mask = &t.instances[idx].mask;
        if self.noise_radius <= 0.0 {
            return mask.clone();
        }
        let mut r = rng::stream(self.seed, &["segment-noise", &t.record.id, &idx.to_string()]);
        let radius: f64 = r.random_range(-self.noise_radius..=self.noise_radius);
        if radius >= 0.0 {
            dilate(mask, radius)
        } else {
            let e = erode(mask, -radius);
            if e.is_empty() {
                mask.clone()
            } else {
                e
            }
        }
    }

    fn segment_box(&self, t: &TruthImage, b: &BBox) -> std::result::Result<SegmenterResult, AdapterError> {
        let mut best: Option<(usize, f64)> = None;
        for (i, inst) in t.instances.iter().enumerate() {
            let v = box_iou(b, &inst.bbox);
            if v > 0.0 && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((i, v));
            }
        }
        let Some((idx, iou)) = best else {
            return Err(AdapterError::EmptyResult(format!(
                "box prompt on {} overlaps no instance",
                t.record.id
            )));
        };
        let mut mask = self.perturbed(t, idx);
        if self.leak > 0.0 {
            let (w, h) = mask.dims();
            let inside = box_to_bitmap(b, w, h);
            let own = &t.instances[idx].mask;
            let s = rng::derive(self.seed, &["leak", &t.record.id]);
            for (x, y) in inside.foreground() {
                if !own.get(x, y) && rng::unit_hash(s, x as u64, y as u64) < self.leak {
                    mask.set(x, y, true);
                }
            }
        }
        Ok(SegmenterResult {
            candidates: vec![Candidate {
                mask: MaskInstance::from_bitmap_rle(t.record.id.clone(), t.instances[idx].class_id, &mask)
                    .with_confidence(iou),
                confidence: iou,
                level: Level::Whole,
            }],
        })
    }

    fn segment_points(&self, t: &TruthImage, prompts: &PromptSet) -> std::result::Result<SegmenterResult, AdapterError> {
        let (w, h) = (t.record.width, t.record.height);
        let hit = |p: &Point| {
            let (x, y) = p.pixel();
            t.instances.iter().position(|i| i.contains(x, y))
        };
        let mut chosen: Vec<usize> = prompts.positive_points.iter().filter_map(hit).collect();
        chosen.sort_unstable();
        chosen.dedup();
        if chosen.is_empty() {
            return Err(AdapterError::EmptyResult(format!(
                "no positive point on {} falls inside an instance",
                t.record.id
            )));
        }
        let class_id = t.instances[chosen[0]].class_id;
        let mut whole = Bitmap::new(w, h);
        for &i in &chosen {
            whole.or_assign(&t.instances[i].mask);
        }
        let part = {
            let core = largest_component(&erode(&whole, PART_RADIUS));
            if core.is_empty() {
                whole.clone()
            } else {
                dilate(&core, PART_RADIUS).and(&whole)
            }
        };
        let subpart = {
            let e = erode(&part, PART_RADIUS);
            if e.is_empty() {
                part.clone()
            } else {
                e
            }
        };

        let mut removal = Bitmap::new(w, h);
        for n in &prompts.negative_points {
            let Some(j) = hit(n) else { continue };
            let inst = &t.instances[j].mask;
            if chosen.contains(&j) {
                for (x, y) in inst.foreground() {
                    let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                    let dn = (cx - n.x).hypot(cy - n.y);
                    let nearer_positive = prompts
                        .positive_points
                        .iter()
                        .any(|p| (cx - p.x).hypot(cy - p.y) <= dn);
                    if !nearer_positive {
                        removal.set(x, y, true);
                    }
                }
            } else {
                removal.or_assign(inst);
            }
        }

        let mut candidates = Vec::new();
        for (mut m, conf, level) in [
            (whole, WHOLE_CONFIDENCE, Level::Whole),
            (part, PART_CONFIDENCE, Level::Part),
            (subpart, SUBPART_CONFIDENCE, Level::Subpart),
        ] {
            m.and_not_assign(&removal);
            if !m.is_empty() {
                candidates.push(Candidate {
                    mask: MaskInstance::from_bitmap_rle(t.record.id.clone(), class_id, &m).with_confidence(conf),
                    confidence: conf,
                    level,
                });
            }
        }
        if candidates.is_empty() {
            return Err(AdapterError::EmptyResult(format!(
                "negative points on {} remove every candidate",
                t.record.id
            )));
        }
        Ok(SegmenterResult { candidates })
    }
}

impl Segmenter for OracleSegmenter {
    fn name(&self) -> &str {
        "oracle"
    }

    fn segment(&self, image: &ImageRecord, prompts: &PromptSet) -> Result<Vec<SegmenterResult>> {
        let t = self.truth.get(&image.id)?;
        prompts.validate(image)?;
        if prompts.boxes.is_empty() {
            return Ok(vec![self.segment_points(t, prompts)?]);
        }
        Ok(prompts
            .boxes
            .iter()
            .map(|b| self.segment_box(t, b))
            .collect::<std::result::Result<Vec<_>, _>>()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{mask_iou, minimum_bounding_box};
    use crate::oracle::HiddenInstance;
    use crate::types::ImageRecord;
    use crate::Error;

    fn disk(w: u32, h: u32, cx: f64, cy: f64, r: f64) -> Bitmap {
        Bitmap::from_fn(w, h, |x, y| (x as f64 + 0.5 - cx).hypot(y as f64 + 0.5 - cy) <= r)
    }

    fn truth(instances: Vec<Bitmap>, w: u32, h: u32) -> (Arc<GroundTruth>, ImageRecord) {
        let rec = ImageRecord::new("im", w, h);
        let mut gt = GroundTruth {
            n_classes: 1,
            ..Default::default()
        };
        gt.images.insert(
            "im".into(),
            TruthImage {
                record: rec.clone(),
                instances: instances
                    .into_iter()
                    .map(|m| HiddenInstance::new(0, m).unwrap())
                    .collect(),
            },
        );
        (Arc::new(gt), rec)
    }

    fn two_disks() -> (Arc<GroundTruth>, ImageRecord) {
        truth(vec![disk(64, 40, 16.0, 20.0, 10.0), disk(64, 40, 40.0, 20.0, 10.0)], 64, 40)
    }

    #[test]
    fn exact_mbb_returns_instance_at_full_confidence() {
        let (gt, rec) = two_disks();
        let seg = OracleSegmenter::new(gt.clone(), 0.0, 1);
        for inst in &gt.images["im"].instances {
            let res = seg.segment(&rec, &PromptSet::from_box(inst.bbox)).unwrap();
            assert_eq!(res.len(), 1);
            let top = res[0].top();
            assert_eq!(top.confidence, 1.0);
            assert_eq!(top.mask.decode_for(&rec).unwrap(), inst.mask);
        }
    }

    #[test]
    fn box_on_empty_area_is_empty_result() {
        let (gt, rec) = two_disks();
        let seg = OracleSegmenter::new(gt, 0.0, 1);
        let err = seg.segment(&rec, &PromptSet::from_box(BBox::new(56.0, 0.0, 64.0, 6.0))).unwrap_err();
        assert!(matches!(err, Error::Adapter(AdapterError::EmptyResult(_))));
    }

    #[test]
    fn unregistered_image_is_lookup() {
        let (gt, _) = two_disks();
        let seg = OracleSegmenter::new(gt, 0.0, 1);
        let other = ImageRecord::new("nope", 64, 40);
        let err = seg.segment(&other, &PromptSet::from_box(BBox::new(0.0, 0.0, 4.0, 4.0))).unwrap_err();
        assert_eq!(err.kind(), "lookup");
    }

    #[test]
    fn rho_two_on_forty_pixel_blob() {
        let (gt, rec) = truth(vec![disk(64, 64, 32.0, 32.0, 20.0)], 64, 64);
        let inst = &gt.images["im"].instances[0];
        // worst cases: a disk of radius 22 or 18 against 20
        let lower = (18.0f64 / 20.0).powi(2).min((20.0f64 / 22.0).powi(2));
        assert!(lower >= 0.8);
        for seed in 0..20 {
            let seg = OracleSegmenter::new(gt.clone(), 2.0, seed);
            let res = seg.segment(&rec, &PromptSet::from_box(inst.bbox)).unwrap();
            let m = res[0].top().mask.decode_for(&rec).unwrap();
            let iou = mask_iou(&m, &inst.mask).unwrap();
            assert!(iou >= 0.8, "seed {seed}: {iou}");
        }
    }

    #[test]
    fn same_seed_same_output() {
        let (gt, rec) = two_disks();
        let seg = OracleSegmenter::new(gt.clone(), 2.0, 5).with_leak(0.3);
        let p = PromptSet::from_box(BBox::new(4.0, 8.0, 30.0, 32.0));
        assert_eq!(seg.segment(&rec, &p).unwrap(), seg.segment(&rec, &p).unwrap());
    }

    #[test]
    fn positive_in_a_negative_in_b() {
        let (gt, rec) = two_disks();
        let seg = OracleSegmenter::new(gt.clone(), 0.0, 1);
        let p = PromptSet::from_points(vec![Point::new(16.0, 20.0)], vec![Point::new(40.0, 20.0)]);
        let res = seg.segment(&rec, &p).unwrap();
        assert!(res[0].is_ranked());
        let a = &gt.images["im"].instances[0].mask;
        let b = &gt.images["im"].instances[1].mask;
        let top = res[0].top().mask.decode_for(&rec).unwrap();
        assert_eq!(&top, a);
        assert_eq!(top.intersection_count(b), 0);
        for c in &res[0].candidates {
            let m = c.mask.decode_for(&rec).unwrap();
            assert_eq!(m.intersection_count(a), m.count(), "candidate lies inside A");
        }
    }

    #[test]
    fn hierarchy_levels_shrink() {
        // two lobes joined by a thin neck: the part is the bigger lobe
        let big = disk(80, 40, 20.0, 20.0, 12.0);
        let small = disk(80, 40, 50.0, 20.0, 7.0);
        let neck = Bitmap::from_fn(80, 40, |x, y| (30..45).contains(&x) && (19..21).contains(&y));
        let mut m = big.clone();
        m.or_assign(&small);
        m.or_assign(&neck);
        let (gt, rec) = truth(vec![m.clone()], 80, 40);
        let seg = OracleSegmenter::new(gt, 0.0, 1);
        let res = seg.segment(&rec, &PromptSet::from_points(vec![Point::new(20.0, 20.0)], vec![])).unwrap();
        let levels: Vec<Level> = res[0].candidates.iter().map(|c| c.level).collect();
        assert_eq!(levels, vec![Level::Whole, Level::Part, Level::Subpart]);
        let sizes: Vec<usize> = res[0]
            .candidates
            .iter()
            .map(|c| c.mask.decode_for(&rec).unwrap().count())
            .collect();
        assert_eq!(sizes[0], m.count());
        assert!(sizes[0] > sizes[1] && sizes[1] > sizes[2]);
        let part = res[0].candidates[1].mask.decode_for(&rec).unwrap();
        assert_eq!(part.intersection_count(&small), 0);
    }

    #[test]
    fn negative_point_in_same_instance_splits_it() {
        let (gt, rec) = truth(vec![Bitmap::from_fn(40, 20, |x, y| (2..38).contains(&x) && (5..15).contains(&y))], 40, 20);
        let seg = OracleSegmenter::new(gt, 0.0, 1);
        let p = PromptSet::from_points(vec![Point::new(8.0, 10.0)], vec![Point::new(32.0, 10.0)]);
        let top = seg.segment(&rec, &p).unwrap()[0].top().mask.decode_for(&rec).unwrap();
        let b = minimum_bounding_box(&top).unwrap();
        assert_eq!((b.x_min, b.x_max), (2.0, 20.0));
    }

    #[test]
    fn larger_boxes_leak_more() {
        let (gt, rec) = two_disks();
        let seg = OracleSegmenter::new(gt.clone(), 0.0, 3).with_leak(0.2);
        let inst = &gt.images["im"].instances[0];
        let mut prev = 1.0;
        for f in [0.0, 0.05, 0.1, 0.2] {
            let b = crate::geometry::expand_box(&inst.bbox, f, &rec).unwrap();
            let m = seg.segment(&rec, &PromptSet::from_box(b)).unwrap()[0].top().mask.decode_for(&rec).unwrap();
            let iou = mask_iou(&m, &inst.mask).unwrap();
            assert!(iou <= prev);
            prev = iou;
        }
        assert!(prev < 1.0);
    }
}
