//! Oracle detector whose quality grows with the number of training boxes.
//!
//! With `n` training boxes and `N` hidden training instances, each hidden box
//! is emitted with probability `min(1, 0.5 + 0.5 n/N)` and its coordinates are
//! jittered by Gaussian noise of scale `σ₀ (1 - n/N)`. Spurious boxes number
//! `⌈fp_rate (1 - n/N) k⌉` for an image with `k` instances and score below 0.4.
//! Draws for an instance are made in a fixed order whatever `n` is, so a
//! larger training set never loses a box that a smaller one found.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{AdapterError, Detector, DetectorModel, GroundTruth, LabeledBox, TrainingExample};
use crate::error::Result;
use crate::geometry::clamp_box;
use crate::rng;
use crate::types::{BBox, ImageRecord};

#[derive(Clone, Debug)]
pub struct OracleDetector {
    truth: Arc<GroundTruth>,
    /// σ₀: corner jitter in pixels for an untrained detector.
    pub sigma0: f64,
    pub fp_rate: f64,
    /// Number of boxes at which the detector becomes exact.
    pub n_full: usize,
}

impl OracleDetector {
    pub fn new(truth: Arc<GroundTruth>, sigma0: f64, fp_rate: f64, n_full: usize) -> Self {
        Self {
            truth,
            sigma0,
            fp_rate,
            n_full: n_full.max(1),
        }
    }

    fn ratio(&self, model: &DetectorModel) -> f64 {
        (model.training_set_size as f64 / self.n_full as f64).min(1.0)
    }

    pub fn recall(&self, model: &DetectorModel) -> f64 {
        (0.5 + 0.5 * self.ratio(model)).min(1.0)
    }

    pub fn sigma(&self, model: &DetectorModel) -> f64 {
        self.sigma0 * (1.0 - self.ratio(model))
    }
}

fn ordered(a: f64, b: f64) -> (f64, f64) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl Detector for OracleDetector {
    fn name(&self) -> &str {
        "oracle"
    }

    fn fit(&self, examples: &[TrainingExample], seed: u64) -> Result<DetectorModel> {
        let n: usize = examples.iter().map(|e| e.boxes.len()).sum();
        if n == 0 {
            return Err(AdapterError::Invalid("detector needs at least one training box".into()).into());
        }
        Ok(DetectorModel {
            adapter: "oracle".into(),
            training_set_size: n,
            seed,
            state: serde_json::json!({ "n_full": self.n_full }),
        })
    }

    fn predict(&self, model: &DetectorModel, image: &ImageRecord) -> Result<Vec<LabeledBox>> {
        let t = self.truth.get(&image.id)?;
        let (recall, sigma) = (self.recall(model), self.sigma(model));
        let mut r = rng::stream(model.seed, &["detect", &image.id]);
        let mut out = Vec::new();
        for inst in &t.instances {
            let u: f64 = r.random();
            let z: [f64; 4] = std::array::from_fn(|_| r.sample(StandardNormal));
            if u >= recall {
                continue;
            }
            let b = inst.bbox;
            let (x0, x1) = ordered(b.x_min + sigma * z[0], b.x_max + sigma * z[2]);
            let (y0, y1) = ordered(b.y_min + sigma * z[1], b.y_max + sigma * z[3]);
            let moved = clamp_box(&BBox::new(x0, y0, x1, y1), image.width, image.height);
            let d = ((moved.x_min - b.x_min).abs()
                + (moved.y_min - b.y_min).abs()
                + (moved.x_max - b.x_max).abs()
                + (moved.y_max - b.y_max).abs())
                / 4.0;
            out.push(LabeledBox {
                class_id: inst.class_id,
                bbox: moved.with_confidence(0.5 + 0.5 * (-d / 2.0).exp()),
            });
        }
        let k = t.instances.len();
        let spurious = (self.fp_rate * (1.0 - self.ratio(model)) * k as f64 - 1e-9).ceil().max(0.0) as usize;
        if spurious > 0 {
            let (w, h) = (image.width as f64, image.height as f64);
            let mean_side = if k == 0 {
                0.1 * w.min(h)
            } else {
                t.instances.iter().map(|i| 0.5 * (i.bbox.width() + i.bbox.height())).sum::<f64>() / k as f64
            };
            let side = mean_side.clamp(1.0, w.min(h));
            let mut r = rng::stream(model.seed, &["spurious", &image.id]);
            for _ in 0..spurious {
                let x = r.random_range(0.0..=w - side);
                let y = r.random_range(0.0..=h - side);
                let conf = r.random_range(0.05..0.4);
                let class_id = r.random_range(0..self.truth.n_classes.max(1));
                out.push(LabeledBox {
                    class_id,
                    bbox: BBox::new(x, y, x + side, y + side).with_confidence(conf),
                });
            }
        }
        Ok(out)
    }
}
