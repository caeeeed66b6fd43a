//! Shared domain types.
//!
//! Coordinates: origin top-left, x to the right, y downward. A mask pixel
//! `(x, y)` is the unit cell `[x, x+1) × [y, y+1)`, so the minimum bounding box
//! of a single pixel has area 1.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, Bitmap};
use crate::io::rle::Rle;
use crate::pipeline::{ReviewStatus, ReviewTask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => f.write_str("train"),
            Split::Val => f.write_str("val"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub uri: String,
    pub split: Split,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, width: u32, height: u32) -> Self {
        Self {
            id: id.into(),
            width,
            height,
            uri: String::new(),
            split: Split::Train,
        }
    }

    pub fn with_uri(mut self, uri: impl Into<String>) -> Self {
        self.uri = uri.into();
        self
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    pub fn diagonal(&self) -> f64 {
        (self.width as f64).hypot(self.height as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Domain(format!(
                "image {} has zero dimension {}x{}",
                self.id, self.width, self.height
            )));
        }
        if self.id.is_empty() {
            return Err(Error::Domain("image id is empty".into()));
        }
        Ok(())
    }
}

/// Axis-aligned box in pixel coordinates. Ground truth carries no confidence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl BBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
            confidence: None,
        }
    }

    pub fn try_new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self::new(x_min, y_min, x_max, y_max);
        b.check()?;
        Ok(b)
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = Some(confidence);
        self
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Same corners, ignoring confidence.
    pub fn same_corners(&self, other: &BBox) -> bool {
        self.x_min == other.x_min
            && self.y_min == other.y_min
            && self.x_max == other.x_max
            && self.y_max == other.y_max
    }

    pub fn check(&self) -> Result<()> {
        let coords = [self.x_min, self.y_min, self.x_max, self.y_max];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::Domain(format!("non-finite box {self:?}")));
        }
        if self.x_min > self.x_max || self.y_min > self.y_max {
            return Err(Error::Domain(format!("inverted box {self:?}")));
        }
        if let Some(c) = self.confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::Domain(format!("confidence {c} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// The pixel cell that contains this point.
    pub fn pixel(&self) -> (i64, i64) {
        (self.x.floor() as i64, self.y.floor() as i64)
    }
}

pub type Ring = Vec<[f64; 2]>;

/// Region data of one instance. The tag is the `encoding` field on the wire.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "encoding", content = "payload", rename_all = "lowercase")]
pub enum MaskPayload {
    Bitmap(Bitmap),
    Polygon(Vec<Ring>),
    Rle(Rle),
}

impl MaskPayload {
    pub fn encoding(&self) -> &'static str {
        match self {
            MaskPayload::Bitmap(_) => "bitmap",
            MaskPayload::Polygon(_) => "polygon",
            MaskPayload::Rle(_) => "rle",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskInstance {
    pub image_id: String,
    pub class_id: u32,
    #[serde(flatten)]
    pub payload: MaskPayload,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl MaskInstance {
    pub fn from_bitmap(image_id: impl Into<String>, class_id: u32, bitmap: Bitmap) -> Self {
        Self {
            image_id: image_id.into(),
            class_id,
            payload: MaskPayload::Bitmap(bitmap),
            confidence: None,
        }
    }

    /// Stores the region run-length encoded; the form used in pipeline state.
    pub fn from_bitmap_rle(image_id: impl Into<String>, class_id: u32, bitmap: &Bitmap) -> Self {
        Self {
            image_id: image_id.into(),
            class_id,
            payload: MaskPayload::Rle(crate::io::rle::encode(bitmap)),
            confidence: None,
        }
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = Some(confidence);
        self
    }

    /// Decode to a bitmap of the given image size.
    pub fn to_bitmap(&self, width: u32, height: u32) -> Result<Bitmap> {
        let bm = match &self.payload {
            MaskPayload::Bitmap(b) => b.clone(),
            MaskPayload::Rle(r) => crate::io::rle::decode(r)?,
            MaskPayload::Polygon(rings) => geometry::rasterize_polygons(rings, width, height).0,
        };
        if bm.width() != width || bm.height() != height {
            return Err(Error::Domain(format!(
                "mask is {}x{}, image is {width}x{height}",
                bm.width(),
                bm.height()
            )));
        }
        Ok(bm)
    }

    pub fn decode_for(&self, img: &ImageRecord) -> Result<Bitmap> {
        self.to_bitmap(img.width, img.height)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    ImageMismatch { expected: String, found: String },
    DimensionMismatch { mask: (u32, u32), image: (u32, u32) },
    EmptyMask,
    RingTooShort { ring: usize, vertices: usize },
    ConfidenceOutOfRange,
    Undecodable(String),
    InvalidImage(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ImageMismatch { expected, found } => {
                write!(f, "image id mismatch: instance {found}, image {expected}")
            }
            Violation::DimensionMismatch { mask, image } => write!(
                f,
                "dimension mismatch: mask {}x{}, image {}x{}",
                mask.0, mask.1, image.0, image.1
            ),
            Violation::EmptyMask => f.write_str("mask has no foreground pixel"),
            Violation::RingTooShort { ring, vertices } => {
                write!(f, "ring < 3 vertices (ring {ring} has {vertices})")
            }
            Violation::ConfidenceOutOfRange => f.write_str("confidence outside [0, 1]"),
            Violation::Undecodable(m) => write!(f, "payload not decodable: {m}"),
            Violation::InvalidImage(m) => write!(f, "invalid image record: {m}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn messages(&self) -> Vec<String> {
        self.violations.iter().map(|v| v.to_string()).collect()
    }

    pub fn mentions(&self, needle: &str) -> bool {
        self.messages().iter().any(|m| m.contains(needle))
    }
}

/// Check a mask against its image. Reports every violated invariant and never fails.
pub fn validate_instance(inst: &MaskInstance, img: &ImageRecord) -> ValidationReport {
    let mut violations = Vec::new();
    if let Err(e) = img.validate() {
        violations.push(Violation::InvalidImage(e.to_string()));
        return ValidationReport { violations };
    }
    if inst.image_id != img.id {
        violations.push(Violation::ImageMismatch {
            expected: img.id.clone(),
            found: inst.image_id.clone(),
        });
    }
    if let Some(c) = inst.confidence {
        if !(0.0..=1.0).contains(&c) || c.is_nan() {
            violations.push(Violation::ConfidenceOutOfRange);
        }
    }
    let image_dims = (img.width, img.height);
    let decoded = match &inst.payload {
        MaskPayload::Bitmap(b) => {
            if b.width() != img.width || b.height() != img.height {
                violations.push(Violation::DimensionMismatch {
                    mask: (b.width(), b.height()),
                    image: image_dims,
                });
                None
            } else {
                Some(b.clone())
            }
        }
        MaskPayload::Rle(r) => match crate::io::rle::decode(r) {
            Ok(b) if (b.width(), b.height()) != image_dims => {
                violations.push(Violation::DimensionMismatch {
                    mask: (b.width(), b.height()),
                    image: image_dims,
                });
                None
            }
            Ok(b) => Some(b),
            Err(e) => {
                violations.push(Violation::Undecodable(e.to_string()));
                None
            }
        },
        MaskPayload::Polygon(rings) => {
            for (i, ring) in rings.iter().enumerate() {
                if ring.len() < 3 {
                    violations.push(Violation::RingTooShort {
                        ring: i,
                        vertices: ring.len(),
                    });
                }
            }
            let valid: Vec<Ring> = rings.iter().filter(|r| r.len() >= 3).cloned().collect();
            Some(geometry::rasterize_polygons(&valid, img.width, img.height).0)
        }
    };
    if let Some(b) = decoded {
        if b.count() == 0 {
            violations.push(Violation::EmptyMask);
        }
    }
    ValidationReport { violations }
}

/// Like [`validate_instance`] but starting from untyped JSON, so an unknown
/// encoding tag surfaces as a format error rather than a report entry.
pub fn validate_instance_json(
    value: &serde_json::Value,
    img: &ImageRecord,
) -> Result<ValidationReport> {
    if let Some(tag) = value.get("encoding").and_then(|t| t.as_str()) {
        if !matches!(tag, "bitmap" | "polygon" | "rle") {
            return Err(Error::Format(format!("unknown encoding tag {tag:?}")));
        }
    }
    let inst: MaskInstance = serde_json::from_value(value.clone())
        .map_err(|e| Error::Format(format!("malformed mask instance: {e}")))?;
    Ok(validate_instance(&inst, img))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    #[serde(default)]
    pub positive_points: Vec<Point>,
    #[serde(default)]
    pub negative_points: Vec<Point>,
    #[serde(default)]
    pub boxes: Vec<BBox>,
}

impl PromptSet {
    pub fn from_box(b: BBox) -> Self {
        Self {
            boxes: vec![b],
            ..Self::default()
        }
    }

    pub fn from_points(positive: Vec<Point>, negative: Vec<Point>) -> Self {
        Self {
            positive_points: positive,
            negative_points: negative,
            boxes: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.positive_points.is_empty() && self.negative_points.is_empty() && self.boxes.is_empty()
    }

    pub fn validate(&self, img: &ImageRecord) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Domain("prompt set is empty".into()));
        }
        let (w, h) = (img.width as f64, img.height as f64);
        for p in self.positive_points.iter().chain(&self.negative_points) {
            if !(p.x >= 0.0 && p.x < w && p.y >= 0.0 && p.y < h) {
                return Err(Error::Domain(format!(
                    "point ({}, {}) outside {}x{} image {}",
                    p.x, p.y, img.width, img.height, img.id
                )));
            }
        }
        for b in &self.boxes {
            b.check()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageStatus {
    /// Not yet annotated.
    Auto,
    /// Annotated from hand prompts at t = 0.
    Seed,
    /// Annotated from detector boxes or human corrections, still moving.
    Fine,
    /// Blocked on a pending review task.
    Review,
    Converged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageState {
    pub status: ImageStatus,
    pub boxes: Vec<BBox>,
    pub masks: Vec<MaskInstance>,
    pub delta: f64,
    /// Seed images and human-corrected images are not re-detected.
    #[serde(default)]
    pub human_verified: bool,
    /// Box set after each iteration, index = iteration.
    #[serde(default)]
    pub history: Vec<Vec<BBox>>,
}

impl ImageState {
    pub fn unlabeled() -> Self {
        Self {
            status: ImageStatus::Auto,
            boxes: Vec::new(),
            masks: Vec::new(),
            delta: 0.0,
            human_verified: false,
            history: vec![Vec::new()],
        }
    }
}

/// Aggregates recorded after every iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: u32,
    pub images: usize,
    pub converged: usize,
    pub with_boxes: usize,
    pub pending_review: usize,
    pub total_boxes: usize,
    pub mean_delta: f64,
    pub max_delta: f64,
    /// Counts of deltas in [0, ε), [ε, 2ε), [2ε, 4ε), [4ε, 8ε), [8ε, ∞).
    pub delta_histogram: [usize; 5],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationState {
    pub iteration: u32,
    pub epsilon: f64,
    pub fine_confidence: f64,
    pub per_image: BTreeMap<String, ImageState>,
    #[serde(default)]
    pub review_queue: Vec<ReviewTask>,
    #[serde(default)]
    pub history: Vec<IterationSummary>,
}

impl IterationState {
    pub fn image(&self, id: &str) -> Result<&ImageState> {
        self.per_image
            .get(id)
            .ok_or_else(|| Error::Lookup(format!("unknown image {id}")))
    }

    pub fn pending_for<'a>(&'a self, image_id: &'a str) -> impl Iterator<Item = &'a ReviewTask> + 'a {
        self.review_queue
            .iter()
            .filter(move |t| t.image_id == image_id && t.status == ReviewStatus::Pending)
    }

    pub fn has_pending(&self, image_id: &str) -> bool {
        self.pending_for(image_id).next().is_some()
    }

    pub fn summarize(&self) -> IterationSummary {
        let eps = self.epsilon;
        let mut hist = [0usize; 5];
        let mut sum = 0.0;
        let mut max: f64 = 0.0;
        for s in self.per_image.values() {
            sum += s.delta;
            max = max.max(s.delta);
            let bucket = if s.delta < eps {
                0
            } else if s.delta < 2.0 * eps {
                1
            } else if s.delta < 4.0 * eps {
                2
            } else if s.delta < 8.0 * eps {
                3
            } else {
                4
            };
            hist[bucket] += 1;
        }
        let n = self.per_image.len();
        IterationSummary {
            iteration: self.iteration,
            images: n,
            converged: self
                .per_image
                .values()
                .filter(|s| s.status == ImageStatus::Converged)
                .count(),
            with_boxes: self.per_image.values().filter(|s| !s.boxes.is_empty()).count(),
            pending_review: self
                .review_queue
                .iter()
                .filter(|t| t.status == ReviewStatus::Pending)
                .count(),
            total_boxes: self.per_image.values().map(|s| s.boxes.len()).sum(),
            mean_delta: if n == 0 { 0.0 } else { sum / n as f64 },
            max_delta: max,
            delta_histogram: hist,
        }
    }

    /// Violated state invariants; empty when consistent.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (id, s) in &self.per_image {
            if s.status == ImageStatus::Converged && s.delta >= self.epsilon {
                out.push(format!("{id}: converged with delta {} >= epsilon", s.delta));
            }
            if s.boxes.len() != s.masks.len() {
                out.push(format!(
                    "{id}: {} boxes but {} masks",
                    s.boxes.len(),
                    s.masks.len()
                ));
            }
            if s.status == ImageStatus::Converged && self.has_pending(id) {
                out.push(format!("{id}: converged while review is pending"));
            }
            if !s.delta.is_finite() || s.delta < 0.0 {
                out.push(format!("{id}: invalid delta {}", s.delta));
            }
        }
        out
    }
}
