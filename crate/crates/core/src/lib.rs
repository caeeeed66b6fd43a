//! Model-in-the-loop mask annotation.
//!
//! The crate is organised bottom-up:
//!
//! - [`types`]: shared value objects (images, boxes, masks, prompts, iteration state)
//! - [`geometry`]: rasterization, minimum bounding boxes, IoU and matching
//! - [`io`]: label/RLE codecs, manifests and dataset splitting
//! - [`metrics`]: box and mask evaluation (P/R/F1, AP, mAP, mIoU)
//! - [`oracle`]: segmenter/detector contracts plus deterministic synthetic backends
//! - [`pipeline`]: the iterative prompt → segment → box → detect refinement loop

pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod oracle;
pub mod pipeline;
pub mod rng;
pub mod types;

pub use error::{Error, Result};
pub use geometry::Bitmap;
pub use types::{
    BBox, ImageRecord, ImageState, ImageStatus, IterationState, MaskInstance, MaskPayload, Point,
    PromptSet, Split,
};
