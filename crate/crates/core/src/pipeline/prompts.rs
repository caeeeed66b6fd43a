//! Prompt sampling from ground-truth masks and the prompt-variant benchmark.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::SeedPrompts;
use crate::error::{Error, Result};
use crate::geometry::{distance_to_background, expand_box, minimum_bounding_box, Bitmap};
use crate::oracle::{AdapterError, GroundTruth, Segmenter};
use crate::rng;
use crate::types::{ImageRecord, Point, PromptSet};

fn center(x: u32, y: u32) -> Point {
    Point::new(x as f64 + 0.5, y as f64 + 0.5)
}

/// Positive points inside `mask` and negative points outside it.
///
/// The first positive is the pixel farthest from the background (first in
/// row-major order on ties); further positives are seeded uniform draws
/// without replacement. Negatives come from the mask's bounding box grown by
/// 20%, excluding the mask. Points sit at pixel centers.
pub fn sample_point_prompts(mask: &Bitmap, img: &ImageRecord, n_pos: usize, n_neg: usize, seed: u64) -> Result<PromptSet> {
    if n_pos == 0 {
        return Err(Error::Domain("n_pos must be at least 1".into()));
    }
    let inside: Vec<(u32, u32)> = mask.foreground().collect();
    if inside.len() < n_pos {
        return Err(Error::Domain(format!(
            "mask of {} pixels cannot host {n_pos} distinct positive points",
            inside.len()
        )));
    }
    let d = distance_to_background(mask);
    let w = mask.width();
    let &first = inside
        .iter()
        .reduce(|a, b| if d[(b.1 * w + b.0) as usize] > d[(a.1 * w + a.0) as usize] { b } else { a })
        .expect("non-empty");
    let mut r = rng::stream(seed, &["points"]);
    let rest: Vec<(u32, u32)> = inside.iter().copied().filter(|&p| p != first).collect();
    let mut positive = vec![center(first.0, first.1)];
    positive.extend(rest.choose_multiple(&mut r, n_pos - 1).map(|&(x, y)| center(x, y)));

    let mut negative = Vec::new();
    if n_neg > 0 {
        let region = expand_box(&minimum_bounding_box(mask)?, 0.2, img)?;
        let (x0, y0) = (region.x_min.floor() as u32, region.y_min.floor() as u32);
        let (x1, y1) = (region.x_max.ceil() as u32, region.y_max.ceil() as u32);
        let outside: Vec<(u32, u32)> = (y0..y1.min(mask.height()))
            .flat_map(|y| (x0..x1.min(w)).map(move |x| (x, y)))
            .filter(|&(x, y)| !mask.get(x, y))
            .collect();
        if outside.len() < n_neg {
            return Err(Error::Domain(format!(
                "only {} background pixels near the mask for {n_neg} negative points",
                outside.len()
            )));
        }
        negative.extend(outside.choose_multiple(&mut r, n_neg).map(|&(x, y)| center(x, y)));
    }
    Ok(PromptSet::from_points(positive, negative))
}

/// Hand prompts for every instance of one image, drawn from ground truth.
pub fn truth_prompts(truth: &GroundTruth, image_id: &str, kind: SeedPrompts, seed: u64) -> Result<Vec<PromptSet>> {
    let t = truth.get(image_id)?;
    t.instances
        .iter()
        .enumerate()
        .map(|(i, h)| match kind {
            SeedPrompts::Mbb => Ok(PromptSet::from_box(h.bbox)),
            SeedPrompts::Points => sample_point_prompts(
                &h.mask,
                &t.record,
                1,
                0,
                rng::derive(seed, &["seed-prompt", image_id, &i.to_string()]),
            ),
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PromptStrategy {
    /// Instance bounding box, each side grown by `expand` of its length.
    Mbb { expand: f64 },
    /// Positive and negative points.
    Points { positive: usize, negative: usize },
}

impl PromptStrategy {
    /// The four box variants and two point variants.
    pub fn standard() -> Vec<PromptStrategy> {
        vec![
            PromptStrategy::Mbb { expand: 0.0 },
            PromptStrategy::Mbb { expand: 0.05 },
            PromptStrategy::Mbb { expand: 0.10 },
            PromptStrategy::Mbb { expand: 0.20 },
            PromptStrategy::Points { positive: 1, negative: 0 },
            PromptStrategy::Points { positive: 3, negative: 4 },
        ]
    }

    fn prompts(&self, mask: &Bitmap, img: &ImageRecord, seed: u64) -> Result<PromptSet> {
        match *self {
            PromptStrategy::Mbb { expand } => {
                let b = minimum_bounding_box(mask)?;
                Ok(PromptSet::from_box(expand_box(&b, expand, img)?))
            }
            PromptStrategy::Points { positive, negative } => sample_point_prompts(mask, img, positive, negative, seed),
        }
    }
}

impl fmt::Display for PromptStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            PromptStrategy::Mbb { expand } if expand == 0.0 => write!(f, "MBB"),
            PromptStrategy::Mbb { expand } => write!(f, "MBB+{}%", (expand * 100.0).round()),
            PromptStrategy::Points { positive, negative } => {
                let p = if positive == 1 { "Ppoint" } else { "Ppoints" };
                if negative == 0 {
                    write!(f, "{positive} {p}")
                } else {
                    let n = if negative == 1 { "Npoint" } else { "Npoints" };
                    write!(f, "{positive} {p} {negative} {n}")
                }
            }
        }
    }
}

impl FromStr for PromptStrategy {
    type Err = Error;

    /// Accepts `mbb`, `mbb+10` (percent), `1p`, `3p4n`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let bad = || Error::Parse {
            line: 0,
            msg: format!("unknown prompt strategy {s:?}; expected mbb, mbb+<pct>, <k>p or <k>p<m>n"),
        };
        if s == "mbb" {
            return Ok(PromptStrategy::Mbb { expand: 0.0 });
        }
        if let Some(pct) = s.strip_prefix("mbb+") {
            let v: f64 = pct.trim_end_matches('%').parse().map_err(|_| bad())?;
            if !(v >= 0.0) {
                return Err(bad());
            }
            return Ok(PromptStrategy::Mbb { expand: v / 100.0 });
        }
        let (p, rest) = s.split_once('p').ok_or_else(bad)?;
        let positive: usize = p.parse().map_err(|_| bad())?;
        let negative = if rest.is_empty() {
            0
        } else {
            rest.strip_suffix('n').ok_or_else(bad)?.parse().map_err(|_| bad())?
        };
        Ok(PromptStrategy::Points { positive, negative })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyScore {
    pub strategy: String,
    pub miou: f64,
    pub per_class: BTreeMap<u32, f64>,
    /// Prompts for which the segmenter returned nothing.
    pub empty_results: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBenchmark {
    pub rows: Vec<StrategyScore>,
}

impl PromptBenchmark {
    pub fn score(&self, label: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.strategy == label).map(|r| r.miou)
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<22} {:>8}\n", "prompt", "mIoU");
        for r in &self.rows {
            out.push_str(&format!("{:<22} {:>8.4}\n", r.strategy, r.miou));
        }
        out
    }
}

/// Prompt every ground-truth instance of `ids` with each strategy and score
/// the top candidate. Per class, intersections and unions are summed over
/// instances; the result averages classes that occur.
pub fn benchmark_prompts(
    truth: &GroundTruth,
    ids: &[String],
    segmenter: &dyn Segmenter,
    strategies: &[PromptStrategy],
    seed: u64,
) -> Result<PromptBenchmark> {
    let mut rows = Vec::new();
    for strategy in strategies {
        let per_image: Vec<Vec<(u32, usize, usize, bool)>> = ids
            .par_iter()
            .map(|id| {
                let t = truth.get(id)?;
                t.instances
                    .iter()
                    .enumerate()
                    .map(|(i, h)| {
                        let s = rng::derive(seed, &["bench", id, &i.to_string()]);
                        let prompts = strategy.prompts(&h.mask, &t.record, s)?;
                        let pred = match segmenter.segment(&t.record, &prompts) {
                            Ok(res) => Some(res[0].top().mask.decode_for(&t.record)?),
                            Err(Error::Adapter(AdapterError::EmptyResult(_))) => None,
                            Err(e) => return Err(e),
                        };
                        Ok(match pred {
                            Some(p) => (h.class_id, p.intersection_count(&h.mask), p.union_count(&h.mask), false),
                            None => (h.class_id, 0, h.mask.count(), true),
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let mut sums: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
        let mut empty_results = 0;
        for (c, i, u, empty) in per_image.into_iter().flatten() {
            let e = sums.entry(c).or_default();
            e.0 += i;
            e.1 += u;
            empty_results += empty as usize;
        }
        let per_class: BTreeMap<u32, f64> = sums
            .into_iter()
            .map(|(c, (i, u))| (c, if u == 0 { 0.0 } else { i as f64 / u as f64 }))
            .collect();
        let miou = if per_class.is_empty() {
            0.0
        } else {
            per_class.values().sum::<f64>() / per_class.len() as f64
        };
        rows.push(StrategyScore {
            strategy: strategy.to_string(),
            miou,
            per_class,
            empty_results,
        });
    }
    Ok(PromptBenchmark { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk() -> (Bitmap, ImageRecord) {
        let bm = Bitmap::from_fn(31, 31, |x, y| (x as f64 - 15.0).hypot(y as f64 - 15.0) <= 9.0);
        (bm, ImageRecord::new("d", 31, 31))
    }

    #[test]
    fn single_point_is_disk_center() {
        let (bm, img) = disk();
        let p = sample_point_prompts(&bm, &img, 1, 0, 0).unwrap();
        assert_eq!(p.positive_points, vec![Point::new(15.5, 15.5)]);
    }

    #[test]
    fn points_respect_the_mask() {
        let (bm, img) = disk();
        for seed in 0..20 {
            let p = sample_point_prompts(&bm, &img, 3, 4, seed).unwrap();
            assert_eq!(p.positive_points.len(), 3);
            assert_eq!(p.negative_points.len(), 4);
            for q in &p.positive_points {
                assert!(bm.get(q.x as u32, q.y as u32));
            }
            for q in &p.negative_points {
                assert!(!bm.get(q.x as u32, q.y as u32));
            }
            assert_eq!(p, sample_point_prompts(&bm, &img, 3, 4, seed).unwrap());
        }
    }

    #[test]
    fn too_small_masks_are_rejected() {
        let mut bm = Bitmap::new(5, 5);
        bm.set(2, 2, true);
        let img = ImageRecord::new("s", 5, 5);
        assert!(matches!(sample_point_prompts(&bm, &img, 2, 0, 0), Err(Error::Domain(_))));
        assert!(matches!(sample_point_prompts(&bm, &img, 0, 0, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn strategy_labels_round_trip() {
        let labels: Vec<String> = PromptStrategy::standard().iter().map(|s| s.to_string()).collect();
        assert_eq!(
            labels,
            ["MBB", "MBB+5%", "MBB+10%", "MBB+20%", "1 Ppoint", "3 Ppoints 4 Npoints"]
        );
        for (s, text) in PromptStrategy::standard().iter().zip(["mbb", "mbb+5", "mbb+10%", "MBB+20", "1p", "3p4n"]) {
            assert_eq!(&text.parse::<PromptStrategy>().unwrap(), s);
        }
        assert!("box".parse::<PromptStrategy>().is_err());
    }
}
