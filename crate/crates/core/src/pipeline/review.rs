//! Review queue and human corrections.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::iterate::segment_with_retry;
use crate::error::{Error, Result};
use crate::geometry::{box_to_bitmap, minimum_bounding_box};
use crate::oracle::{AdapterError, Segmenter};
use crate::types::{BBox, ImageRecord, ImageStatus, IterationState, MaskInstance, Point, PromptSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewKind {
    /// The detector found nothing on the image.
    MissedDetection,
    /// A refined mask barely fills its prompt box, or segmentation failed.
    FalsePositive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReviewStatus {
    Pending,
    /// A human correction was applied; it is accepted once the next
    /// detector fit has consumed it.
    Corrected,
    Accepted,
}

impl std::str::FromStr for ReviewStatus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pending" => Ok(Self::Pending),
            "corrected" => Ok(Self::Corrected),
            "accepted" => Ok(Self::Accepted),
            other => Err(Error::Domain(format!("unknown review status {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReviewTask {
    pub id: u64,
    pub image_id: String,
    pub kind: ReviewKind,
    /// Iteration at which the task was raised or last refreshed.
    pub iteration: u32,
    pub reason: String,
    /// Boxes the pipeline proposed when raising the task.
    #[serde(default)]
    pub proposed_boxes: Vec<BBox>,
    pub status: ReviewStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correction: Option<CorrectionPayload>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptPoint {
    pub x: f64,
    pub y: f64,
    pub positive: bool,
}

/// One image's staged edits. Box ids index the image's current box list.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectionPayload {
    #[serde(default)]
    pub image_id: String,
    /// Iteration the edits were made against; a mismatch is a conflict.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<u32>,
    /// Points of one new object.
    #[serde(default)]
    pub added_points: Vec<PromptPoint>,
    #[serde(default)]
    pub added_boxes: Vec<BBox>,
    #[serde(default)]
    pub deleted_ids: Vec<usize>,
    #[serde(default)]
    pub adjusted_boxes: BTreeMap<usize, BBox>,
    /// Class for new objects; the segmenter's class when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

fn box_in_image(b: &BBox, img: &ImageRecord) -> bool {
    b.check().is_ok()
        && b.x_min >= 0.0
        && b.y_min >= 0.0
        && b.x_max <= img.width as f64
        && b.y_max <= img.height as f64
        && b.area() > 0.0
}

impl CorrectionPayload {
    pub fn is_empty(&self) -> bool {
        self.added_points.is_empty()
            && self.added_boxes.is_empty()
            && self.deleted_ids.is_empty()
            && self.adjusted_boxes.is_empty()
    }

    /// Every structural problem, keyed by field path.
    pub fn field_errors(&self, n_boxes: usize, img: &ImageRecord) -> Vec<FieldError> {
        let mut errs = Vec::new();
        if self.is_empty() {
            errs.push(FieldError::new("payload", "no changes"));
        }
        let mut seen = BTreeSet::new();
        for (i, &id) in self.deleted_ids.iter().enumerate() {
            if id >= n_boxes {
                errs.push(FieldError::new(
                    format!("deleted_ids[{i}]"),
                    format!("box {id} does not exist ({n_boxes} boxes)"),
                ));
            } else if !seen.insert(id) {
                errs.push(FieldError::new(format!("deleted_ids[{i}]"), format!("box {id} listed twice")));
            }
        }
        for (&id, b) in &self.adjusted_boxes {
            let field = format!("adjusted_boxes.{id}");
            if id >= n_boxes {
                errs.push(FieldError::new(&field, format!("box {id} does not exist ({n_boxes} boxes)")));
            } else if seen.contains(&id) {
                errs.push(FieldError::new(&field, format!("box {id} is also deleted")));
            }
            if !box_in_image(b, img) {
                errs.push(FieldError::new(&field, "box must be non-empty and inside the image"));
            }
        }
        for (i, b) in self.added_boxes.iter().enumerate() {
            if !box_in_image(b, img) {
                errs.push(FieldError::new(
                    format!("added_boxes[{i}]"),
                    "box must be non-empty and inside the image",
                ));
            }
        }
        for (i, p) in self.added_points.iter().enumerate() {
            if !(p.x >= 0.0 && p.y >= 0.0 && p.x < img.width as f64 && p.y < img.height as f64) {
                errs.push(FieldError::new(format!("added_points[{i}]"), "point outside the image"));
            }
        }
        if !self.added_points.is_empty() && !self.added_points.iter().any(|p| p.positive) {
            errs.push(FieldError::new("added_points", "at least one positive point is required"));
        }
        errs
    }
}

fn box_mask(
    segmenter: &dyn Segmenter,
    img: &ImageRecord,
    b: &BBox,
    fallback_class: u32,
    cfg: &PipelineConfig,
) -> Result<MaskInstance> {
    match segment_with_retry(segmenter, img, &PromptSet::from_box(*b), cfg.adapter_retries) {
        Ok(res) => Ok(res[0].top().mask.clone()),
        // the annotator's box stands even where the segmenter finds nothing
        Err(Error::Adapter(AdapterError::EmptyResult(_))) => Ok(MaskInstance::from_bitmap_rle(
            img.id.clone(),
            fallback_class,
            &box_to_bitmap(b, img.width, img.height),
        )),
        Err(e) => Err(e),
    }
}

/// Apply human edits: re-segment adjusted and added prompts right away, mark
/// the image fine and human-verified, and mark its tasks corrected.
pub fn apply_corrections(
    state: &IterationState,
    images: &BTreeMap<String, ImageRecord>,
    payloads: &[CorrectionPayload],
    segmenter: &dyn Segmenter,
    cfg: &PipelineConfig,
) -> Result<IterationState> {
    let mut next = state.clone();
    for p in payloads {
        let img = images
            .get(&p.image_id)
            .ok_or_else(|| Error::Lookup(format!("unknown image {}", p.image_id)))?;
        let cur = next.image(&p.image_id)?.clone();
        if let Some(t) = p.iteration {
            if t != next.iteration {
                return Err(Error::Conflict(format!(
                    "correction made against iteration {t}, state is at {}",
                    next.iteration
                )));
            }
        }
        let errs = p.field_errors(cur.boxes.len(), img);
        if !errs.is_empty() {
            let msg: Vec<String> = errs.iter().map(|e| format!("{}: {}", e.field, e.message)).collect();
            return Err(Error::Domain(msg.join("; ")));
        }

        let deleted: BTreeSet<usize> = p.deleted_ids.iter().copied().collect();
        let mut boxes = Vec::new();
        let mut masks = Vec::new();
        for (i, (b, m)) in cur.boxes.iter().zip(&cur.masks).enumerate() {
            if deleted.contains(&i) {
                continue;
            }
            match p.adjusted_boxes.get(&i) {
                Some(nb) => {
                    let class = p.class_id.unwrap_or(m.class_id);
                    let mut mask = box_mask(segmenter, img, nb, class, cfg)?;
                    mask.class_id = class;
                    boxes.push(BBox { confidence: None, ..*nb });
                    masks.push(mask);
                }
                None => {
                    boxes.push(*b);
                    masks.push(m.clone());
                }
            }
        }
        for b in &p.added_boxes {
            let mut mask = box_mask(segmenter, img, b, p.class_id.unwrap_or(0), cfg)?;
            if let Some(c) = p.class_id {
                mask.class_id = c;
            }
            boxes.push(BBox { confidence: None, ..*b });
            masks.push(mask);
        }
        if !p.added_points.is_empty() {
            let prompts = PromptSet::from_points(
                p.added_points.iter().filter(|q| q.positive).map(|q| Point::new(q.x, q.y)).collect(),
                p.added_points.iter().filter(|q| !q.positive).map(|q| Point::new(q.x, q.y)).collect(),
            );
            let res = segment_with_retry(segmenter, img, &prompts, cfg.adapter_retries)?;
            let mut mask = res[0].top().mask.clone();
            if let Some(c) = p.class_id {
                mask.class_id = c;
            }
            boxes.push(minimum_bounding_box(&mask.decode_for(img)?)?);
            masks.push(mask);
        }

        let s = next.per_image.get_mut(&p.image_id).expect("looked up above");
        s.boxes = boxes;
        s.masks = masks;
        s.status = ImageStatus::Fine;
        s.human_verified = true;

        let mut touched = false;
        for t in next.review_queue.iter_mut() {
            if t.image_id == p.image_id && t.status == ReviewStatus::Pending {
                t.status = ReviewStatus::Corrected;
                t.correction = Some(p.clone());
                touched = true;
            }
        }
        if !touched {
            let id = next.review_queue.iter().map(|t| t.id + 1).max().unwrap_or(0);
            let kind = if p.added_boxes.is_empty() && p.added_points.is_empty() {
                ReviewKind::FalsePositive
            } else {
                ReviewKind::MissedDetection
            };
            next.review_queue.push(ReviewTask {
                id,
                image_id: p.image_id.clone(),
                kind,
                iteration: next.iteration,
                reason: "raised by annotator".into(),
                proposed_boxes: cur.boxes.clone(),
                status: ReviewStatus::Corrected,
                correction: Some(p.clone()),
            });
        }
    }
    Ok(next)
}
