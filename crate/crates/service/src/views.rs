//! Response bodies. Masks always travel as column-major RLE next to their box.

use loopseg_core::io::rle::{self, Rle};
use loopseg_core::pipeline::{Convergence, ReviewTask};
use loopseg_core::types::IterationSummary;
use loopseg_core::{BBox, ImageRecord, ImageState, ImageStatus, IterationState, MaskPayload, Result, Split};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateView {
    pub iteration: u32,
    pub epsilon: f64,
    pub convergence: Convergence,
    /// Share of images in the converged state.
    pub converged_fraction: f64,
    /// Share needed to stop.
    pub target_fraction: f64,
    pub summary: IterationSummary,
    pub history: Vec<IterationSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageListItem {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub split: Split,
    pub status: ImageStatus,
    pub boxes: usize,
    pub delta: f64,
    pub pending_review: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskView {
    pub class_id: u32,
    pub rle: Rle,
}

/// One prediction; `id` is the index used by corrections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionView {
    pub id: usize,
    pub bbox: BBox,
    pub confidence: Option<f64>,
    pub mask: MaskView,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionsView {
    pub image_id: String,
    pub iteration: u32,
    pub width: u32,
    pub height: u32,
    pub status: ImageStatus,
    pub delta: f64,
    pub epsilon: f64,
    /// `delta < epsilon`.
    pub below_epsilon: bool,
    pub human_verified: bool,
    pub predictions: Vec<PredictionView>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionResult {
    pub iteration: u32,
    pub tasks: Vec<ReviewTask>,
    pub image: PredictionsView,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub running: bool,
    /// Iteration being computed while running.
    pub target_iteration: Option<u32>,
    /// Latest committed iteration.
    pub iteration: u32,
    pub completed_runs: u64,
    pub last_error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterateRequest {
    /// Return 202 right away and let the client poll `/api/progress`.
    pub background: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterateResult {
    pub iteration: u32,
    pub convergence: Convergence,
    pub summary: IterationSummary,
}

pub fn predictions(img: &ImageRecord, st: &ImageState, state: &IterationState) -> Result<PredictionsView> {
    let mut out = Vec::with_capacity(st.boxes.len());
    for (id, (b, m)) in st.boxes.iter().zip(&st.masks).enumerate() {
        let rle = match &m.payload {
            MaskPayload::Rle(r) => r.clone(),
            _ => rle::encode(&m.decode_for(img)?),
        };
        out.push(PredictionView {
            id,
            bbox: *b,
            confidence: b.confidence.or(m.confidence),
            mask: MaskView {
                class_id: m.class_id,
                rle,
            },
        });
    }
    Ok(PredictionsView {
        image_id: img.id.clone(),
        iteration: state.iteration,
        width: img.width,
        height: img.height,
        status: st.status,
        delta: st.delta,
        epsilon: state.epsilon,
        below_epsilon: st.delta < state.epsilon,
        human_verified: st.human_verified,
        predictions: out,
    })
}
