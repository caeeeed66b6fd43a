//! Segmenter and detector contracts, plus deterministic oracle backends that
//! answer from hidden ground truth.

pub mod detector;
pub mod registry;
pub mod segmenter;
pub mod synthetic;
mod truth;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::Result;
use crate::types::{BBox, ImageRecord, MaskInstance, PromptSet};

pub use detector::OracleDetector;
pub use registry::{AdapterContext, AdapterSpec, Registry};
pub use segmenter::OracleSegmenter;
pub use synthetic::{SyntheticConfig, SyntheticDataset};
pub use truth::{GroundTruth, HiddenInstance, TruthImage};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdapterError {
    #[error("adapter {adapter} unavailable: {reason}; retry after {retry_after_ms} ms")]
    Unavailable {
        adapter: String,
        reason: String,
        retry_after_ms: u64,
    },
    #[error("no candidate: {0}")]
    EmptyResult(String),
    #[error("image {0} is not registered with the adapter")]
    UnknownImage(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Whole,
    Part,
    Subpart,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub mask: MaskInstance,
    pub confidence: f64,
    pub level: Level,
}

/// Ranked candidates for one prompt; confidences never increase down the list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmenterResult {
    pub candidates: Vec<Candidate>,
}

impl SegmenterResult {
    pub fn top(&self) -> &Candidate {
        &self.candidates[0]
    }

    pub fn is_ranked(&self) -> bool {
        !self.candidates.is_empty()
            && self
                .candidates
                .windows(2)
                .all(|w| w[0].confidence >= w[1].confidence)
    }
}

/// A promptable segmenter. One image per call; callers parallelize.
pub trait Segmenter: Send + Sync {
    fn name(&self) -> &str;

    /// One result per box prompt; with no boxes, a single result for the
    /// point prompts.
    fn segment(&self, image: &ImageRecord, prompts: &PromptSet) -> Result<Vec<SegmenterResult>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    pub class_id: u32,
    #[serde(flatten)]
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub image: ImageRecord,
    pub boxes: Vec<LabeledBox>,
}

/// Trained detector state. `state` is adapter specific.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub adapter: String,
    pub training_set_size: usize,
    pub seed: u64,
    pub state: serde_json::Value,
}

pub trait Detector: Send + Sync {
    fn name(&self) -> &str;

    fn fit(&self, examples: &[TrainingExample], seed: u64) -> Result<DetectorModel>;

    /// Boxes with confidences; deterministic in `(model, image)`.
    fn predict(&self, model: &DetectorModel, image: &ImageRecord) -> Result<Vec<LabeledBox>>;
}
