//! Seeding, one refinement iteration, change measurement and stopping.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::review::{ReviewKind, ReviewStatus, ReviewTask};
use crate::error::{Error, Result};
use crate::geometry::{box_iou, match_by_iou, minimum_bounding_box};
use crate::oracle::{AdapterError, Detector, LabeledBox, Segmenter, SegmenterResult, TrainingExample};
use crate::rng;
use crate::types::{BBox, ImageRecord, ImageState, ImageStatus, IterationState, MaskInstance, PromptSet};

/// Call the segmenter, retrying while it reports itself unavailable.
pub fn segment_with_retry(
    segmenter: &dyn Segmenter,
    img: &ImageRecord,
    prompts: &PromptSet,
    retries: u32,
) -> Result<Vec<SegmenterResult>> {
    let mut attempt = 0;
    loop {
        match segmenter.segment(img, prompts) {
            Err(Error::Adapter(AdapterError::Unavailable { retry_after_ms, .. })) if attempt < retries => {
                attempt += 1;
                std::thread::sleep(std::time::Duration::from_millis(retry_after_ms.min(1000)));
            }
            other => return other,
        }
    }
}

/// Normalized change between two box sets on one image.
///
/// Boxes are paired by [`match_by_iou`] at `match_iou`. A pair contributes the
/// mean Euclidean displacement of its two corners over the image diagonal; an
/// unpaired box contributes 1. The result is the mean contribution, 0 for two
/// empty sets.
pub fn iteration_delta(prev: &[BBox], next: &[BBox], img: &ImageRecord, match_iou: f64) -> f64 {
    let m = match_by_iou(prev, next, match_iou);
    let n = m.pairs.len() + m.unmatched_preds.len() + m.unmatched_refs.len();
    if n == 0 {
        return 0.0;
    }
    let diag = img.diagonal();
    let mut sum = (m.unmatched_preds.len() + m.unmatched_refs.len()) as f64;
    for &(i, j, _) in &m.pairs {
        let (a, b) = (&prev[i], &next[j]);
        let d0 = (a.x_min - b.x_min).hypot(a.y_min - b.y_min);
        let d1 = (a.x_max - b.x_max).hypot(a.y_max - b.y_max);
        sum += 0.5 * (d0 + d1) / diag;
    }
    sum / n as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Convergence {
    Continue,
    Converged,
    Stalled,
}

/// Converged once `converged_fraction` of images are in the converged state;
/// stalled at `max_iterations`.
pub fn check_convergence(state: &IterationState, cfg: &PipelineConfig) -> Convergence {
    if state.iteration == 0 || state.per_image.is_empty() {
        return Convergence::Continue;
    }
    let done = state
        .per_image
        .values()
        .filter(|s| s.status == ImageStatus::Converged)
        .count();
    // compare counts to avoid rounding 99/100 against 0.99
    if done as f64 + 1e-9 >= cfg.converged_fraction * state.per_image.len() as f64 {
        Convergence::Converged
    } else if state.iteration >= cfg.max_iterations {
        Convergence::Stalled
    } else {
        Convergence::Continue
    }
}

/// `round(fraction · N)` images by seeded shuffle, returned in id order.
pub fn select_seed_images(images: &[ImageRecord], fraction: f64, seed: u64) -> Result<Vec<ImageRecord>> {
    let k = (fraction * images.len() as f64).round() as usize;
    if k == 0 {
        return Err(Error::Domain(format!(
            "seed fraction {fraction} of {} images selects nothing",
            images.len()
        )));
    }
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut rng::stream(seed, &["seed-images"]));
    let mut chosen: Vec<ImageRecord> = order[..k.min(images.len())].iter().map(|&i| images[i].clone()).collect();
    chosen.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(chosen)
}

fn next_task_id(queue: &[ReviewTask]) -> u64 {
    queue.iter().map(|t| t.id + 1).max().unwrap_or(0)
}

/// Initial state: seed images annotated from their prompts, the rest unlabeled.
/// A prompt the segmenter cannot answer raises a missed-detection task.
pub fn seed_annotate(
    all_images: &[ImageRecord],
    seeds: &[ImageRecord],
    prompts: &BTreeMap<String, Vec<PromptSet>>,
    segmenter: &dyn Segmenter,
    cfg: &PipelineConfig,
) -> Result<IterationState> {
    if seeds.is_empty() {
        return Err(Error::Domain("at least one seed image is required".into()));
    }
    for s in seeds {
        if !prompts.contains_key(&s.id) {
            return Err(Error::Domain(format!("no seed prompts for image {}", s.id)));
        }
    }
    let results: Vec<(String, Result<(Vec<BBox>, Vec<MaskInstance>, usize)>)> = seeds
        .par_iter()
        .map(|img| {
            let run = || -> Result<(Vec<BBox>, Vec<MaskInstance>, usize)> {
                let mut boxes = Vec::new();
                let mut masks = Vec::new();
                let mut failed = 0;
                for p in &prompts[&img.id] {
                    match segment_with_retry(segmenter, img, p, cfg.adapter_retries) {
                        Ok(res) => {
                            for r in res {
                                let m = r.top().mask.clone();
                                boxes.push(minimum_bounding_box(&m.decode_for(img)?)?);
                                masks.push(m);
                            }
                        }
                        Err(Error::Adapter(AdapterError::EmptyResult(_))) => failed += 1,
                        Err(e) => return Err(e),
                    }
                }
                Ok((boxes, masks, failed))
            };
            (img.id.clone(), run())
        })
        .collect();

    let mut per_image: BTreeMap<String, ImageState> = all_images
        .iter()
        .map(|i| (i.id.clone(), ImageState::unlabeled()))
        .collect();
    let mut queue = Vec::new();
    for (id, res) in results {
        let (boxes, masks, failed) = res?;
        let s = per_image
            .get_mut(&id)
            .ok_or_else(|| Error::Lookup(format!("seed image {id} is not in the dataset")))?;
        s.status = ImageStatus::Seed;
        s.human_verified = failed == 0 && !boxes.is_empty();
        s.history = vec![boxes.clone()];
        s.boxes = boxes;
        s.masks = masks;
        if failed > 0 || s.boxes.is_empty() {
            queue.push(ReviewTask {
                id: next_task_id(&queue),
                image_id: id.clone(),
                kind: ReviewKind::MissedDetection,
                iteration: 0,
                reason: format!("{failed} seed prompt(s) produced no mask"),
                proposed_boxes: s.boxes.clone(),
                status: ReviewStatus::Pending,
                correction: None,
            });
            s.status = ImageStatus::Review;
        }
    }
    let mut state = IterationState {
        iteration: 0,
        epsilon: cfg.epsilon,
        fine_confidence: cfg.fine_confidence,
        per_image,
        review_queue: queue,
        history: Vec::new(),
    };
    let summary = state.summarize();
    state.history.push(summary);
    Ok(state)
}

/// Boxes of every annotated image, labelled with their mask classes.
pub fn training_examples(state: &IterationState, images: &BTreeMap<String, ImageRecord>) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::new();
    for (id, s) in &state.per_image {
        if s.boxes.is_empty() {
            continue;
        }
        let image = images
            .get(id)
            .ok_or_else(|| Error::Lookup(format!("state mentions unknown image {id}")))?
            .clone();
        let boxes = s
            .boxes
            .iter()
            .zip(&s.masks)
            .map(|(b, m)| LabeledBox {
                class_id: m.class_id,
                bbox: *b,
            })
            .collect();
        out.push(TrainingExample { image, boxes });
    }
    Ok(out)
}

/// Per-image result of the parallel phase.
struct Outcome {
    boxes: Vec<BBox>,
    masks: Vec<MaskInstance>,
    triggers: Vec<(ReviewKind, String, Vec<BBox>)>,
}

/// Refine one image: re-prompt with its current boxes plus the selected fine
/// boxes that do not overlap them, then take each mask's bounding box.
fn refine_image(
    img: &ImageRecord,
    current: &ImageState,
    fine: &[LabeledBox],
    n_predicted: usize,
    segmenter: &dyn Segmenter,
    cfg: &PipelineConfig,
) -> Result<Outcome> {
    let mut triggers = Vec::new();
    if n_predicted == 0 {
        triggers.push((
            ReviewKind::MissedDetection,
            "detector predicted no boxes".to_string(),
            Vec::new(),
        ));
    }
    let mut prompts: Vec<(BBox, Option<u32>)> = current
        .boxes
        .iter()
        .zip(&current.masks)
        .map(|(b, m)| (*b, Some(m.class_id)))
        .collect();
    for f in fine {
        if !current.boxes.iter().any(|b| box_iou(b, &f.bbox) >= cfg.prompt_match_iou) {
            prompts.push((f.bbox, Some(f.class_id)));
        }
    }

    let mut boxes: Vec<BBox> = Vec::new();
    let mut masks = Vec::new();
    let mut rejected = Vec::new();
    for (b, class) in prompts {
        let res = match segment_with_retry(segmenter, img, &PromptSet::from_box(b), cfg.adapter_retries) {
            Ok(r) => r,
            Err(Error::Adapter(AdapterError::EmptyResult(_))) => {
                rejected.push(b);
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut mask = res[0].top().mask.clone();
        if let Some(c) = class {
            mask.class_id = c;
        }
        let bm = mask.decode_for(img)?;
        if (bm.count() as f64) < cfg.review_min_fill * b.area() || bm.is_empty() {
            rejected.push(b);
            continue;
        }
        let mut mbb = minimum_bounding_box(&bm)?;
        mbb.confidence = b.confidence;
        if boxes.iter().any(|k| box_iou(k, &mbb) >= cfg.duplicate_iou) {
            continue;
        }
        boxes.push(mbb);
        masks.push(mask);
    }
    if !rejected.is_empty() {
        triggers.push((
            ReviewKind::FalsePositive,
            format!("{} prompt box(es) gave an empty or sparse mask", rejected.len()),
            rejected,
        ));
    }
    Ok(Outcome {
        boxes,
        masks,
        triggers,
    })
}

/// One pass: fit, predict, select fine boxes, refine, measure change, update
/// review tasks and statuses. The input state is never modified; on any
/// adapter failure the error is returned and nothing is committed.
pub fn run_iteration(
    state: &IterationState,
    images: &BTreeMap<String, ImageRecord>,
    detector: &dyn Detector,
    segmenter: &dyn Segmenter,
    cfg: &PipelineConfig,
) -> Result<IterationState> {
    let t = state.iteration + 1;
    let examples = training_examples(state, images)?;
    if examples.is_empty() {
        return Err(Error::Domain("no image has boxes to train the detector on".into()));
    }
    let model = detector.fit(&examples, rng::derive(cfg.seed, &["fit", &t.to_string()]))?;

    let targets: Vec<(&String, &ImageState)> = state
        .per_image
        .iter()
        .filter(|(_, s)| !s.human_verified)
        .collect();
    let predictions: Vec<(String, Vec<LabeledBox>)> = targets
        .par_iter()
        .map(|(id, _)| {
            let img = images
                .get(*id)
                .ok_or_else(|| Error::Lookup(format!("state mentions unknown image {id}")))?;
            Ok(((*id).clone(), detector.predict(&model, img)?))
        })
        .collect::<Result<_>>()?;

    // fine boxes, capped to the top share by confidence across the dataset
    let mut fine: Vec<(usize, usize, f64)> = Vec::new();
    for (pi, (_, preds)) in predictions.iter().enumerate() {
        for (bi, b) in preds.iter().enumerate() {
            let c = b.bbox.confidence.unwrap_or(0.0);
            if c >= cfg.fine_confidence {
                fine.push((pi, bi, c));
            }
        }
    }
    if cfg.fine_fraction < 1.0 {
        fine.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
        let keep = (cfg.fine_fraction * fine.len() as f64).ceil() as usize;
        fine.truncate(keep);
    }
    let mut fine_by_image: Vec<Vec<LabeledBox>> = vec![Vec::new(); predictions.len()];
    fine.sort_by_key(|&(pi, bi, _)| (pi, bi));
    for (pi, bi, _) in fine {
        fine_by_image[pi].push(predictions[pi].1[bi]);
    }

    let outcomes: Vec<(String, Outcome)> = predictions
        .par_iter()
        .zip(fine_by_image.par_iter())
        .map(|((id, preds), fine)| {
            let img = &images[id];
            let cur = &state.per_image[id];
            Ok((id.clone(), refine_image(img, cur, fine, preds.len(), segmenter, cfg)?))
        })
        .collect::<Result<_>>()?;

    let mut next = state.clone();
    next.iteration = t;
    next.epsilon = cfg.epsilon;
    next.fine_confidence = cfg.fine_confidence;
    // corrections are consumed by this fit
    for task in next.review_queue.iter_mut() {
        if task.status == ReviewStatus::Corrected {
            task.status = ReviewStatus::Accepted;
        }
    }
    let mut raised: BTreeMap<String, Vec<(ReviewKind, String, Vec<BBox>)>> = BTreeMap::new();
    for (id, out) in outcomes {
        let s = next.per_image.get_mut(&id).expect("target exists");
        s.boxes = out.boxes;
        s.masks = out.masks;
        raised.insert(id, out.triggers);
    }
    // refresh, raise and retire automatic tasks for re-evaluated images
    for (id, triggers) in &raised {
        for task in next.review_queue.iter_mut() {
            if &task.image_id == id
                && task.status == ReviewStatus::Pending
                && !triggers.iter().any(|(k, _, _)| *k == task.kind)
            {
                task.status = ReviewStatus::Accepted;
            }
        }
        for (kind, reason, proposed) in triggers {
            let existing = next
                .review_queue
                .iter_mut()
                .find(|x| &x.image_id == id && x.status == ReviewStatus::Pending && x.kind == *kind);
            match existing {
                Some(task) => {
                    task.iteration = t;
                    task.reason = reason.clone();
                    task.proposed_boxes = proposed.clone();
                }
                None => {
                    let tid = next_task_id(&next.review_queue);
                    next.review_queue.push(ReviewTask {
                        id: tid,
                        image_id: id.clone(),
                        kind: *kind,
                        iteration: t,
                        reason: reason.clone(),
                        proposed_boxes: proposed.clone(),
                        status: ReviewStatus::Pending,
                        correction: None,
                    });
                }
            }
        }
    }

    let ids: Vec<String> = next.per_image.keys().cloned().collect();
    for id in ids {
        let pending = next.has_pending(&id);
        let img = &images[&id];
        let s = next.per_image.get_mut(&id).expect("id from keys");
        let prev = s.history.last().cloned().unwrap_or_default();
        s.delta = iteration_delta(&prev, &s.boxes, img, cfg.delta_match_iou);
        s.history.push(s.boxes.clone());
        s.status = if pending {
            ImageStatus::Review
        } else if !s.boxes.is_empty() && s.delta < cfg.epsilon {
            ImageStatus::Converged
        } else if s.boxes.is_empty() {
            ImageStatus::Auto
        } else if s.status == ImageStatus::Seed {
            ImageStatus::Seed
        } else {
            ImageStatus::Fine
        };
    }
    let summary = next.summarize();
    next.history.push(summary);
    Ok(next)
}
