//! Fine-box fraction experiment: annotate the training split keeping only a
//! top-confidence share of fine boxes, then score a detector trained on the
//! result against held-out ground truth.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::iterate::{segment_with_retry, training_examples, Convergence};
use super::runner::Pipeline;
use crate::error::{Error, Result};
use crate::io::DatasetManifest;
use crate::metrics::{max_f1_confidence, miou, map_over_range, Detection, EvalKind, IouRange};
use crate::oracle::{AdapterError, GroundTruth, Registry};
use crate::rng;
use crate::types::{PromptSet, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractionRun {
    pub fraction: f64,
    pub seed: u64,
    pub iterations: u32,
    pub outcome: Convergence,
    /// Annotated training masks against hidden truth.
    pub dataset_miou: f64,
    pub map50_mask: f64,
    pub f1: f64,
    /// Validation masks from predictions at or above the fine threshold.
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractionMean {
    pub fraction: f64,
    pub dataset_miou: f64,
    pub map50_mask: f64,
    pub f1: f64,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractionReport {
    pub runs: Vec<FractionRun>,
    pub means: Vec<FractionMean>,
}

impl FractionReport {
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:>8} {:>12} {:>10} {:>8} {:>8}\n",
            "fraction", "dataset_mIoU", "mAP50_mask", "F1", "mIoU"
        );
        for m in &self.means {
            out.push_str(&format!(
                "{:>8.2} {:>12.4} {:>10.4} {:>8.4} {:>8.4}\n",
                m.fraction, m.dataset_miou, m.map50_mask, m.f1, m.miou
            ));
        }
        out
    }
}

fn truth_detections(truth: &GroundTruth, ids: &[String]) -> Vec<Detection> {
    ids.iter()
        .filter_map(|id| truth.images.get(id))
        .flat_map(|t| {
            t.instances
                .iter()
                .map(|h| Detection::from_mask(t.record.id.clone(), h.class_id, h.mask.clone(), None))
        })
        .collect()
}

fn one_run(
    base: &PipelineConfig,
    manifest: &DatasetManifest,
    truth: &Arc<GroundTruth>,
    registry: &Registry,
    fraction: f64,
    seed: u64,
) -> Result<FractionRun> {
    let cfg = PipelineConfig {
        fine_fraction: fraction,
        seed,
        split: Some(Split::Train),
        workers: None,
        ..base.clone()
    };
    let pipe = Pipeline::from_dataset(cfg.clone(), manifest, truth.clone(), registry)?;
    let start = pipe.seed_state()?;
    let (state, outcome) = pipe.run_until_converged(start, None, |_| Ok(()))?;

    let train_ids: Vec<String> = pipe.images.keys().cloned().collect();
    let mut labels = Vec::new();
    for (id, s) in &state.per_image {
        let img = &pipe.images[id];
        for m in &s.masks {
            labels.push(Detection::from_mask(id.clone(), m.class_id, m.decode_for(img)?, None));
        }
    }
    let dataset_miou = if labels.is_empty() {
        0.0
    } else {
        miou(&labels, &truth_detections(truth, &train_ids), truth.n_classes.max(1))?.miou
    };

    let val: Vec<_> = manifest.images.iter().filter(|i| i.split == Split::Val).collect();
    if val.is_empty() {
        return Err(Error::Domain("fraction experiment needs a validation split".into()));
    }
    let examples = training_examples(&state, &pipe.images)?;
    let model = pipe
        .detector
        .fit(&examples, rng::derive(seed, &["fit", "final"]))?;
    let per_image: Vec<Vec<Detection>> = val
        .par_iter()
        .map(|img| {
            let mut out = Vec::new();
            for b in pipe.detector.predict(&model, img)? {
                let res = segment_with_retry(
                    pipe.segmenter.as_ref(),
                    img,
                    &PromptSet::from_box(b.bbox),
                    cfg.adapter_retries,
                );
                match res {
                    Ok(r) => out.push(Detection::from_mask(
                        img.id.clone(),
                        b.class_id,
                        r[0].top().mask.decode_for(img)?,
                        b.bbox.confidence,
                    )),
                    Err(Error::Adapter(AdapterError::EmptyResult(_))) => {}
                    Err(e) => return Err(e),
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let preds: Vec<Detection> = per_image.into_iter().flatten().collect();
    let val_ids: Vec<String> = val.iter().map(|i| i.id.clone()).collect();
    let gts = truth_detections(truth, &val_ids);
    let n_classes = truth.n_classes.max(1);
    let (map50_mask, f1, val_miou) = if preds.is_empty() {
        (0.0, 0.0, 0.0)
    } else {
        let fine: Vec<Detection> = preds
            .iter()
            .filter(|d| d.confidence.unwrap_or(0.0) >= cfg.fine_confidence)
            .cloned()
            .collect();
        let m = if fine.is_empty() {
            0.0
        } else {
            miou(&fine, &gts, n_classes)?.miou
        };
        (
            map_over_range(&preds, &gts, IouRange::AT_50, EvalKind::Mask)?,
            max_f1_confidence(&preds, &gts, 0.5, EvalKind::Mask)?.1,
            m,
        )
    };
    Ok(FractionRun {
        fraction,
        seed,
        iterations: state.iteration,
        outcome,
        dataset_miou,
        map50_mask,
        f1,
        miou: val_miou,
    })
}

/// Every (seed, fraction) pair of `cfg.experiment_seeds` × `cfg.fractions`,
/// with per-fraction means over seeds.
pub fn fine_fraction_experiment(
    manifest: &DatasetManifest,
    truth: Arc<GroundTruth>,
    registry: &Registry,
    cfg: &PipelineConfig,
) -> Result<FractionReport> {
    cfg.validate()?;
    if cfg.fractions.is_empty() || cfg.experiment_seeds.is_empty() {
        return Err(Error::Config("fractions and experiment_seeds must be non-empty".into()));
    }
    let jobs: Vec<(u64, f64)> = cfg
        .experiment_seeds
        .iter()
        .flat_map(|&s| cfg.fractions.iter().map(move |&f| (s, f)))
        .collect();
    let work = || {
        jobs.par_iter()
            .map(|&(s, f)| one_run(cfg, manifest, &truth, registry, f, s))
            .collect::<Result<Vec<_>>>()
    };
    let runs = match cfg.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("workers: {e}")))?
            .install(work)?,
        None => work()?,
    };
    let mut by_fraction: BTreeMap<u64, Vec<&FractionRun>> = BTreeMap::new();
    for r in &runs {
        by_fraction.entry(r.fraction.to_bits()).or_default().push(r);
    }
    let mean = |rs: &[&FractionRun], f: fn(&FractionRun) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64;
    let means = cfg
        .fractions
        .iter()
        .map(|&f| {
            let rs = &by_fraction[&f.to_bits()];
            FractionMean {
                fraction: f,
                dataset_miou: mean(rs, |r| r.dataset_miou),
                map50_mask: mean(rs, |r| r.map50_mask),
                f1: mean(rs, |r| r.f1),
                miou: mean(rs, |r| r.miou),
            }
        })
        .collect();
    Ok(FractionReport { runs, means })
}
