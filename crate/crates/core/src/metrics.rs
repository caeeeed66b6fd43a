//! Box and mask evaluation.
//!
//! Predictions are matched to ground truth per image and per class, greedily in
//! descending confidence. AP is 101-point interpolated over a monotone
//! precision envelope; precision/recall points are only taken at the end of a
//! run of equal confidences, so AP depends on the ranking alone.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_iou, mask_iou, matching::greedy_match_matrix, Bitmap};
use crate::types::{BBox, ImageRecord, MaskInstance};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalKind {
    Box,
    Mask,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Region {
    Box(BBox),
    Mask(Bitmap),
}

impl Region {
    pub fn kind(&self) -> EvalKind {
        match self {
            Region::Box(_) => EvalKind::Box,
            Region::Mask(_) => EvalKind::Mask,
        }
    }
}

/// One prediction or ground-truth instance prepared for scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub class_id: u32,
    pub confidence: Option<f64>,
    pub region: Region,
}

impl Detection {
    pub fn from_box(image_id: impl Into<String>, class_id: u32, b: BBox) -> Self {
        Self {
            image_id: image_id.into(),
            class_id,
            confidence: b.confidence,
            region: Region::Box(b),
        }
    }

    pub fn from_mask(image_id: impl Into<String>, class_id: u32, mask: Bitmap, confidence: Option<f64>) -> Self {
        Self {
            image_id: image_id.into(),
            class_id,
            confidence,
            region: Region::Mask(mask),
        }
    }

    pub fn from_instance(inst: &MaskInstance, img: &ImageRecord) -> Result<Self> {
        Ok(Self::from_mask(
            inst.image_id.clone(),
            inst.class_id,
            inst.decode_for(img)?,
            inst.confidence,
        ))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    /// 0 when nothing was predicted.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// 0 when there is no ground truth.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }

    pub fn add(&self, o: &ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r <= 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// IoU thresholds `start, start + 0.05, ..., end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouRange {
    pub start: f64,
    pub end: f64,
}

impl IouRange {
    pub const COCO: IouRange = IouRange { start: 0.5, end: 0.95 };
    pub const TO_90: IouRange = IouRange { start: 0.5, end: 0.90 };
    pub const AT_50: IouRange = IouRange { start: 0.5, end: 0.5 };

    pub fn thresholds(&self) -> Vec<f64> {
        let lo = (self.start * 100.0).round() as i64;
        let hi = (self.end * 100.0).round() as i64;
        (lo..=hi).step_by(5).map(|v| v as f64 / 100.0).collect()
    }
}

impl Default for IouRange {
    fn default() -> Self {
        Self::COCO
    }
}

/// Predictions and ground truth of one (image, class) cell with their IoU matrix.
struct Cell {
    class_id: u32,
    preds: Vec<usize>,
    n_gt: usize,
    iou: Vec<Vec<f64>>,
}

fn check_kind(items: &[Detection], kind: EvalKind, what: &str) -> Result<()> {
    if let Some(d) = items.iter().find(|d| d.region.kind() != kind) {
        return Err(Error::Domain(format!(
            "mixed kinds: {what} on {} is {:?}, evaluating {kind:?}",
            d.image_id,
            d.region.kind()
        )));
    }
    Ok(())
}

fn region_iou(a: &Region, b: &Region) -> Result<f64> {
    match (a, b) {
        (Region::Box(a), Region::Box(b)) => Ok(box_iou(a, b)),
        (Region::Mask(a), Region::Mask(b)) => mask_iou(a, b),
        _ => Err(Error::Domain("mixed kinds in one comparison".into())),
    }
}

fn confidence_of(d: &Detection) -> Result<f64> {
    match d.confidence {
        Some(c) if (0.0..=1.0).contains(&c) => Ok(c),
        Some(c) => Err(Error::Domain(format!("confidence {c} outside [0, 1]"))),
        None => Err(Error::Domain(format!(
            "prediction on {} has no confidence",
            d.image_id
        ))),
    }
}

fn build_cells(preds: &[Detection], gts: &[Detection], kind: EvalKind) -> Result<Vec<Cell>> {
    check_kind(preds, kind, "prediction")?;
    check_kind(gts, kind, "ground truth")?;
    for p in preds {
        confidence_of(p)?;
    }
    let mut groups: BTreeMap<(&str, u32), (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, p) in preds.iter().enumerate() {
        groups.entry((&p.image_id, p.class_id)).or_default().0.push(i);
    }
    for (i, g) in gts.iter().enumerate() {
        groups.entry((&g.image_id, g.class_id)).or_default().1.push(i);
    }
    groups
        .into_iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|((_, class_id), (p, g))| {
            let iou = p
                .iter()
                .map(|&pi| {
                    g.iter()
                        .map(|&gi| region_iou(&preds[pi].region, &gts[gi].region))
                        .collect::<Result<Vec<f64>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Cell {
                class_id,
                preds: p,
                n_gt: g.len(),
                iou,
            })
        })
        .collect()
}

/// Per-prediction match flags at one IoU threshold, plus ground-truth counts per class.
fn match_cells(cells: &[Cell], preds: &[Detection], threshold: f64) -> (Vec<Option<bool>>, BTreeMap<u32, usize>) {
    let mut flags = vec![None; preds.len()];
    let mut n_gt: BTreeMap<u32, usize> = BTreeMap::new();
    for cell in cells {
        *n_gt.entry(cell.class_id).or_default() += cell.n_gt;
        let conf: Vec<Option<f64>> = cell.preds.iter().map(|&i| preds[i].confidence).collect();
        let m = greedy_match_matrix(&conf, &cell.iou, cell.n_gt, threshold);
        for &(p, _, _) in &m.pairs {
            flags[cell.preds[p]] = Some(true);
        }
        for &p in &m.unmatched_preds {
            flags[cell.preds[p]] = Some(false);
        }
    }
    (flags, n_gt)
}

/// TP/FP/FN per class after dropping predictions below `conf_threshold`.
pub fn confusion_counts(
    preds: &[Detection],
    gts: &[Detection],
    iou_threshold: f64,
    conf_threshold: f64,
    kind: EvalKind,
) -> Result<BTreeMap<u32, ConfusionCounts>> {
    check_kind(preds, kind, "prediction")?;
    let kept: Vec<Detection> = preds
        .iter()
        .filter(|p| p.confidence.is_some_and(|c| c >= conf_threshold))
        .cloned()
        .collect();
    let cells = build_cells(&kept, gts, kind)?;
    let (flags, n_gt) = match_cells(&cells, &kept, iou_threshold);
    let mut out: BTreeMap<u32, ConfusionCounts> = BTreeMap::new();
    for (&c, &n) in &n_gt {
        out.entry(c).or_default().fn_ = n;
    }
    for (p, flag) in kept.iter().zip(&flags) {
        let e = out.entry(p.class_id).or_default();
        if flag == &Some(true) {
            e.tp += 1;
            e.fn_ -= 1;
        } else {
            e.fp += 1;
        }
    }
    Ok(out)
}

/// Sum of per-class counts.
pub fn total_counts(per_class: &BTreeMap<u32, ConfusionCounts>) -> ConfusionCounts {
    per_class
        .values()
        .fold(ConfusionCounts::default(), |acc, c| acc.add(c))
}

/// Precision/recall at the end of every run of equal confidence, best score first.
pub fn pr_points(scored: &[(f64, bool)], n_gt: usize) -> Vec<(f64, f64, f64)> {
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(c, hit)) in sorted.iter().enumerate() {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        if i + 1 == sorted.len() || sorted[i + 1].0 != c {
            out.push((c, ratio(tp, n_gt), ratio(tp, tp + fp)));
        }
    }
    out
}

/// 101-point interpolated AP from `(confidence, is_true_positive)` pairs.
pub fn interpolated_ap(scored: &[(f64, bool)], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let pts = pr_points(scored, n_gt);
    // envelope: best precision at recall >= r, scanning from the high-recall end
    let mut env = vec![0.0f64; pts.len()];
    let mut best: f64 = 0.0;
    for i in (0..pts.len()).rev() {
        best = best.max(pts[i].2);
        env[i] = best;
    }
    let mut sum = 0.0;
    let mut j = 0usize;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        while j < pts.len() && pts[j].1 < r {
            j += 1;
        }
        if j < pts.len() {
            sum += env[j];
        }
    }
    sum / 101.0
}

/// Per-class AP. Classes with no ground truth have no defined AP and are
/// listed in `undefined` instead.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub ap: BTreeMap<u32, f64>,
    pub undefined: Vec<u32>,
}

fn ap_from_flags(preds: &[Detection], flags: &[Option<bool>], n_gt: &BTreeMap<u32, usize>) -> ClassAp {
    let mut scored: BTreeMap<u32, Vec<(f64, bool)>> = BTreeMap::new();
    for (p, f) in preds.iter().zip(flags) {
        scored
            .entry(p.class_id)
            .or_default()
            .push((p.confidence.unwrap_or(0.0), f == &Some(true)));
    }
    let classes: BTreeSet<u32> = scored.keys().chain(n_gt.keys()).copied().collect();
    let mut out = ClassAp::default();
    for c in classes {
        let n = n_gt.get(&c).copied().unwrap_or(0);
        if n == 0 {
            out.undefined.push(c);
        } else {
            let s = scored.get(&c).map(Vec::as_slice).unwrap_or(&[]);
            out.ap.insert(c, interpolated_ap(s, n));
        }
    }
    out
}

pub fn average_precision(preds: &[Detection], gts: &[Detection], iou_threshold: f64, kind: EvalKind) -> Result<ClassAp> {
    let cells = build_cells(preds, gts, kind)?;
    let (flags, n_gt) = match_cells(&cells, preds, iou_threshold);
    Ok(ap_from_flags(preds, &flags, &n_gt))
}

/// Mean over classes at each threshold, then over thresholds.
/// `per_threshold[t]` holds the defined class APs at threshold `t`.
pub fn mean_ap(per_threshold: &[Vec<f64>]) -> Result<f64> {
    if per_threshold.is_empty() || per_threshold.iter().any(Vec::is_empty) {
        return Err(Error::Domain("mAP needs at least one defined class AP".into()));
    }
    let means: Vec<f64> = per_threshold
        .iter()
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .collect();
    Ok(means.iter().sum::<f64>() / means.len() as f64)
}

/// AP per class at each threshold of the range, sharing one IoU computation.
pub fn ap_over_range(preds: &[Detection], gts: &[Detection], range: IouRange, kind: EvalKind) -> Result<Vec<(f64, ClassAp)>> {
    let cells = build_cells(preds, gts, kind)?;
    Ok(range
        .thresholds()
        .into_iter()
        .map(|t| {
            let (flags, n_gt) = match_cells(&cells, preds, t);
            (t, ap_from_flags(preds, &flags, &n_gt))
        })
        .collect())
}

pub fn map_over_range(preds: &[Detection], gts: &[Detection], range: IouRange, kind: EvalKind) -> Result<f64> {
    let per: Vec<Vec<f64>> = ap_over_range(preds, gts, range, kind)?
        .into_iter()
        .map(|(_, c)| c.ap.into_values().collect())
        .collect();
    mean_ap(&per)
}

/// Confidence cutpoint with the best F1 (counts summed over classes). Ties go
/// to the higher threshold.
pub fn max_f1_confidence(preds: &[Detection], gts: &[Detection], iou_threshold: f64, kind: EvalKind) -> Result<(f64, f64)> {
    if preds.is_empty() {
        return Err(Error::Domain("max-F1 needs at least one prediction".into()));
    }
    let cells = build_cells(preds, gts, kind)?;
    let (flags, n_gt) = match_cells(&cells, preds, iou_threshold);
    let total_gt: usize = n_gt.values().sum();
    let scored: Vec<(f64, bool)> = preds
        .iter()
        .zip(&flags)
        .map(|(p, f)| (p.confidence.unwrap_or(0.0), f == &Some(true)))
        .collect();
    let mut best = (f64::NAN, -1.0);
    for (c, r, p) in pr_points(&scored, total_gt) {
        let score = f1(p, r);
        if score > best.1 {
            best = (c, score);
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    pub miou: f64,
    pub per_class: BTreeMap<u32, f64>,
    /// Classes left out of the mean: no ground truth, or empty union.
    pub flagged: Vec<u32>,
}

/// Dataset-global semantic IoU per class, averaged over classes present in
/// ground truth.
pub fn miou(preds: &[Detection], gts: &[Detection], n_classes: u32) -> Result<MiouResult> {
    check_kind(preds, EvalKind::Mask, "prediction")?;
    check_kind(gts, EvalKind::Mask, "ground truth")?;
    let mut sem: BTreeMap<(&str, u32), (Option<Bitmap>, Option<Bitmap>)> = BTreeMap::new();
    let mut gt_classes = BTreeSet::new();
    for (d, is_gt) in preds.iter().map(|d| (d, false)).chain(gts.iter().map(|d| (d, true))) {
        if d.class_id >= n_classes {
            return Err(Error::Domain(format!(
                "class {} out of range for {n_classes} classes",
                d.class_id
            )));
        }
        let Region::Mask(m) = &d.region else { unreachable!() };
        let e = sem.entry((&d.image_id, d.class_id)).or_default();
        let slot = if is_gt {
            gt_classes.insert(d.class_id);
            &mut e.1
        } else {
            &mut e.0
        };
        match slot {
            Some(acc) => {
                if !acc.same_dims(m) {
                    return Err(Error::Domain(format!(
                        "masks on {} have different dimensions",
                        d.image_id
                    )));
                }
                acc.or_assign(m)
            }
            None => *slot = Some(m.clone()),
        }
    }
    let mut inter = vec![0u64; n_classes as usize];
    let mut union = vec![0u64; n_classes as usize];
    for ((img, c), (p, g)) in &sem {
        let (i, u) = match (p, g) {
            (Some(p), Some(g)) => {
                if !p.same_dims(g) {
                    return Err(Error::Domain(format!("mask dimensions differ on {img}")));
                }
                (p.intersection_count(g), p.union_count(g))
            }
            (Some(m), None) | (None, Some(m)) => (0, m.count()),
            (None, None) => (0, 0),
        };
        inter[*c as usize] += i as u64;
        union[*c as usize] += u as u64;
    }
    let mut out = MiouResult::default();
    for c in 0..n_classes {
        let ci = c as usize;
        if !gt_classes.contains(&c) || union[ci] == 0 {
            if union[ci] > 0 || gt_classes.contains(&c) {
                out.flagged.push(c);
            }
            continue;
        }
        out.per_class.insert(c, inter[ci] as f64 / union[ci] as f64);
    }
    if out.per_class.is_empty() {
        return Err(Error::Domain("no class has ground truth with non-empty union".into()));
    }
    out.miou = out.per_class.values().sum::<f64>() / out.per_class.len() as f64;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: u32,
    pub name: String,
    pub n_gt: usize,
    pub n_pred: usize,
    pub counts: ConfusionCounts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap50: Option<f64>,
    pub map: Option<f64>,
    pub iou: Option<f64>,
}

/// Evaluation summary written as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub kind: EvalKind,
    pub iou_threshold: f64,
    pub iou_range: IouRange,
    /// Confidence cutpoint maximizing F1; P/R/F1 are reported there.
    pub confidence_threshold: f64,
    pub n_classes: u32,
    pub n_images: usize,
    pub per_class: Vec<ClassMetrics>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub map50: f64,
    pub map: f64,
    pub miou: Option<f64>,
    pub flagged: Vec<String>,
}

impl MetricReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    /// Every reported value lies in [0, 1].
    pub fn values_in_unit_range(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let mut ok = [self.precision, self.recall, self.f1, self.map50, self.map]
            .into_iter()
            .all(unit);
        ok &= self.miou.is_none_or(unit);
        for c in &self.per_class {
            ok &= [c.precision, c.recall, c.f1].into_iter().all(unit);
            ok &= [c.ap50, c.map, c.iou].into_iter().flatten().all(unit);
        }
        ok
    }
}

/// Full report. With no predictions the confidence threshold is 1 and all scores are 0.
pub fn evaluate(
    preds: &[Detection],
    gts: &[Detection],
    kind: EvalKind,
    range: IouRange,
    class_names: &[String],
) -> Result<MetricReport> {
    let n_classes = class_names.len() as u32;
    for d in preds.iter().chain(gts) {
        if d.class_id >= n_classes {
            return Err(Error::Domain(format!(
                "class {} out of range for {n_classes} classes",
                d.class_id
            )));
        }
    }
    let (conf, _) = if preds.is_empty() {
        (1.0, 0.0)
    } else {
        max_f1_confidence(preds, gts, 0.5, kind)?
    };
    let counts = confusion_counts(preds, gts, 0.5, conf, kind)?;
    let per_t = ap_over_range(preds, gts, range, kind)?;
    let at50 = average_precision(preds, gts, 0.5, kind)?;
    let mut flagged: Vec<String> = at50
        .undefined
        .iter()
        .map(|c| format!("class {c}: no ground truth, AP undefined"))
        .collect();
    let miou_res = if kind == EvalKind::Mask && !gts.is_empty() {
        let kept: Vec<Detection> = preds
            .iter()
            .filter(|p| p.confidence.is_some_and(|c| c >= conf))
            .cloned()
            .collect();
        let r = miou(&kept, gts, n_classes)?;
        flagged.extend(r.flagged.iter().map(|c| format!("class {c}: excluded from mIoU")));
        Some(r)
    } else {
        None
    };
    let mut per_class = Vec::new();
    for c in 0..n_classes {
        let cc = counts.get(&c).copied().unwrap_or_default();
        let n_pred = preds.iter().filter(|p| p.class_id == c).count();
        let n_gt = gts.iter().filter(|g| g.class_id == c).count();
        let class_map = if n_gt > 0 {
            let v: Vec<f64> = per_t.iter().filter_map(|(_, a)| a.ap.get(&c).copied()).collect();
            Some(v.iter().sum::<f64>() / v.len() as f64)
        } else {
            None
        };
        per_class.push(ClassMetrics {
            class_id: c,
            name: class_names[c as usize].clone(),
            n_gt,
            n_pred,
            counts: cc,
            precision: cc.precision(),
            recall: cc.recall(),
            f1: cc.f1(),
            ap50: at50.ap.get(&c).copied(),
            map: class_map,
            iou: miou_res.as_ref().and_then(|r| r.per_class.get(&c).copied()),
        });
    }
    let total = total_counts(&counts);
    let defined: Vec<Vec<f64>> = per_t
        .iter()
        .map(|(_, a)| a.ap.values().copied().collect())
        .collect();
    let (map50, map) = if defined.iter().all(|v| !v.is_empty()) && !defined.is_empty() {
        (
            mean_ap(&[at50.ap.values().copied().collect()])?,
            mean_ap(&defined)?,
        )
    } else {
        flagged.push("no class has ground truth; mAP reported as 0".into());
        (0.0, 0.0)
    };
    let images: BTreeSet<&str> = preds.iter().chain(gts).map(|d| d.image_id.as_str()).collect();
    Ok(MetricReport {
        kind,
        iou_threshold: 0.5,
        iou_range: range,
        confidence_threshold: conf,
        n_classes,
        n_images: images.len(),
        per_class,
        precision: total.precision(),
        recall: total.recall(),
        f1: total.f1(),
        map50,
        map,
        miou: miou_res.map(|r| r.miou),
        flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gt(img: &str, x: f64, y: f64) -> Detection {
        Detection::from_box(img, 0, BBox::new(x, y, x + 10.0, y + 10.0))
    }

    fn pred(img: &str, x: f64, y: f64, c: f64) -> Detection {
        Detection::from_box(img, 0, BBox::new(x, y, x + 10.0, y + 10.0).with_confidence(c))
    }

    #[test]
    fn f1_values() {
        assert_eq!(f1(1.0, 1.0), 1.0);
        assert!((f1(0.9, 0.8) - 0.847_058_823_529_411_8).abs() < 1e-12);
        assert_eq!(f1(0.0, 0.0), 0.0);
    }

    #[test]
    fn identical_predictions_are_all_tp() {
        let gts: Vec<_> = (0..5).map(|i| gt("a", i as f64 * 20.0, 0.0)).collect();
        let preds: Vec<_> = (0..5).map(|i| pred("a", i as f64 * 20.0, 0.0, 1.0)).collect();
        let c = confusion_counts(&preds, &gts, 0.5, 0.0, EvalKind::Box).unwrap()[&0];
        assert_eq!((c.tp, c.fp, c.fn_), (5, 0, 0));
        let c = confusion_counts(&[], &gts, 0.5, 0.0, EvalKind::Box).unwrap()[&0];
        assert_eq!((c.tp, c.fp, c.fn_), (0, 0, 5));
    }

    #[test]
    fn two_hits_one_stray_four_truths() {
        let gts = vec![gt("a", 0.0, 0.0), gt("a", 20.0, 0.0), gt("a", 40.0, 0.0), gt("a", 60.0, 0.0)];
        // IoU of a 2 px shift on a 10 px box is 80/120 >= 0.5
        let preds = vec![pred("a", 2.0, 0.0, 0.9), pred("a", 20.0, 2.0, 0.8), pred("a", 200.0, 200.0, 0.7)];
        let c = confusion_counts(&preds, &gts, 0.5, 0.0, EvalKind::Box).unwrap()[&0];
        assert_eq!((c.tp, c.fp, c.fn_), (2, 1, 2));
        // confidence threshold drops the stray
        let c = confusion_counts(&preds, &gts, 0.5, 0.75, EvalKind::Box).unwrap()[&0];
        assert_eq!((c.tp, c.fp, c.fn_), (2, 0, 2));
    }

    #[test]
    fn mixed_kinds_rejected() {
        let preds = vec![Detection::from_mask("a", 0, Bitmap::new(2, 2), Some(0.5))];
        let gts = vec![gt("a", 0.0, 0.0)];
        assert!(matches!(
            confusion_counts(&preds, &gts, 0.5, 0.0, EvalKind::Box),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn classes_do_not_cross_match() {
        let gts = vec![gt("a", 0.0, 0.0)];
        let mut p = pred("a", 0.0, 0.0, 0.9);
        p.class_id = 1;
        let c = confusion_counts(&[p], &gts, 0.5, 0.0, EvalKind::Box).unwrap();
        assert_eq!(c[&0].fn_, 1);
        assert_eq!(c[&1].fp, 1);
    }

    #[test]
    fn ap_extremes() {
        let gts: Vec<_> = (0..4).map(|i| gt("a", i as f64 * 20.0, 0.0)).collect();
        let perfect: Vec<_> = (0..4).map(|i| pred("a", i as f64 * 20.0, 0.0, 0.9 - 0.1 * i as f64)).collect();
        let ap = average_precision(&perfect, &gts, 0.5, EvalKind::Box).unwrap();
        assert!((ap.ap[&0] - 1.0).abs() < 1e-12);
        let wrong: Vec<_> = (0..4).map(|i| pred("a", 500.0 + i as f64 * 20.0, 0.0, 0.5)).collect();
        let ap = average_precision(&wrong, &gts, 0.5, EvalKind::Box).unwrap();
        assert_eq!(ap.ap[&0], 0.0);
    }

    #[test]
    fn class_without_ground_truth_is_undefined() {
        let mut p = pred("a", 0.0, 0.0, 0.9);
        p.class_id = 3;
        let ap = average_precision(&[p], &[gt("a", 0.0, 0.0)], 0.5, EvalKind::Box).unwrap();
        assert_eq!(ap.undefined, vec![3]);
        assert!(!ap.ap.contains_key(&3));
    }

    #[test]
    fn mean_ap_arithmetic() {
        assert!((mean_ap(&[vec![0.6]]).unwrap() - 0.6).abs() < 1e-12);
        assert!((mean_ap(&[vec![0.4, 0.8]]).unwrap() - 0.6).abs() < 1e-12);
        assert!(mean_ap(&[]).is_err());
    }

    #[test]
    fn range_thresholds() {
        assert_eq!(IouRange::COCO.thresholds().len(), 10);
        assert_eq!(IouRange::TO_90.thresholds().last(), Some(&0.9));
        assert_eq!(IouRange::AT_50.thresholds(), vec![0.5]);
    }

    #[test]
    fn single_threshold_range_is_map50() {
        let gts: Vec<_> = (0..4).map(|i| gt("a", i as f64 * 20.0, 0.0)).collect();
        let preds = vec![pred("a", 0.0, 0.0, 0.9), pred("a", 23.0, 0.0, 0.6), pred("a", 90.0, 90.0, 0.8)];
        let m = map_over_range(&preds, &gts, IouRange::AT_50, EvalKind::Box).unwrap();
        let ap = average_precision(&preds, &gts, 0.5, EvalKind::Box).unwrap();
        assert_eq!(m, ap.ap[&0]);
    }

    #[test]
    fn max_f1_cases() {
        let gts = vec![gt("a", 0.0, 0.0)];
        let (t, f) = max_f1_confidence(&[pred("a", 0.0, 0.0, 0.7)], &gts, 0.5, EvalKind::Box).unwrap();
        assert_eq!((t, f), (0.7, 1.0));
        let wrong = vec![pred("a", 50.0, 0.0, 0.3), pred("a", 80.0, 0.0, 0.6)];
        let (t, f) = max_f1_confidence(&wrong, &gts, 0.5, EvalKind::Box).unwrap();
        assert_eq!((t, f), (0.6, 0.0));
        assert!(max_f1_confidence(&[], &gts, 0.5, EvalKind::Box).is_err());
    }

    #[test]
    fn miou_extremes_and_flags() {
        let a = Bitmap::from_fn(4, 4, |x, _| x < 2);
        let b = Bitmap::from_fn(4, 4, |x, _| x >= 2);
        let g = vec![Detection::from_mask("i", 0, a.clone(), None)];
        let same = vec![Detection::from_mask("i", 0, a, Some(0.9))];
        assert_eq!(miou(&same, &g, 1).unwrap().miou, 1.0);
        let other = vec![Detection::from_mask("i", 0, b.clone(), Some(0.9))];
        assert_eq!(miou(&other, &g, 1).unwrap().miou, 0.0);
        let stray = vec![Detection::from_mask("i", 1, b, Some(0.9))];
        let r = miou(&stray, &g, 2).unwrap();
        assert_eq!(r.flagged, vec![1]);
        assert_eq!(r.per_class.len(), 1);
    }

    // -- oracles --------------------------------------------------------------

    /// Pixel-count oracle: accumulate per-class intersection/union by looping pixels.
    fn miou_oracle(preds: &[Detection], gts: &[Detection], n_classes: u32) -> f64 {
        let mut images: BTreeSet<&str> = BTreeSet::new();
        for d in preds.iter().chain(gts) {
            images.insert(&d.image_id);
        }
        let mut sum = 0.0;
        let mut n = 0;
        for c in 0..n_classes {
            if !gts.iter().any(|g| g.class_id == c) {
                continue;
            }
            let (mut i, mut u) = (0u64, 0u64);
            for img in &images {
                let pick = |v: &[Detection]| -> Vec<Bitmap> {
                    v.iter()
                        .filter(|d| d.class_id == c && d.image_id == *img)
                        .map(|d| match &d.region {
                            Region::Mask(m) => m.clone(),
                            _ => unreachable!(),
                        })
                        .collect()
                };
                let (pm, gm) = (pick(preds), pick(gts));
                let Some(dims) = pm.first().or(gm.first()).map(|m| m.dims()) else { continue };
                for y in 0..dims.1 {
                    for x in 0..dims.0 {
                        let p = pm.iter().any(|m| m.get(x, y));
                        let g = gm.iter().any(|m| m.get(x, y));
                        i += (p && g) as u64;
                        u += (p || g) as u64;
                    }
                }
            }
            if u > 0 {
                sum += i as f64 / u as f64;
                n += 1;
            }
        }
        sum / n as f64
    }

    #[test]
    fn miou_matches_pixel_oracle_on_two_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let mut preds = Vec::new();
            let mut gts = Vec::new();
            for img in ["p", "q"] {
                for _ in 0..3 {
                    let c = rng.random_range(0..2);
                    let (x0, y0) = (rng.random_range(0..10), rng.random_range(0..10));
                    let m = Bitmap::from_fn(16, 12, |x, y| x >= x0 && x < x0 + 6 && y >= y0 && y < y0.min(6) + 6);
                    gts.push(Detection::from_mask(img, c, m, None));
                    let (x0, y0) = (rng.random_range(0..10), rng.random_range(0..10));
                    let m = Bitmap::from_fn(16, 12, |x, y| x >= x0 && x < x0 + 5 && y >= y0 && y < y0 + 4);
                    preds.push(Detection::from_mask(img, c, m, Some(0.5)));
                }
            }
            let got = miou(&preds, &gts, 2).unwrap().miou;
            assert!((got - miou_oracle(&preds, &gts, 2)).abs() < 1e-12);
        }
    }

    /// Sweep oracle: evaluate counts at every distinct cutpoint with
    /// `confusion_counts`, then integrate the envelope at 101 recall levels.
    fn ap_oracle(preds: &[Detection], gts: &[Detection], thr: f64) -> f64 {
        let mut cuts: Vec<f64> = preds.iter().map(|p| p.confidence.unwrap()).collect();
        cuts.sort_by(|a, b| b.total_cmp(a));
        cuts.dedup();
        let pts: Vec<(f64, f64)> = cuts
            .iter()
            .map(|&c| {
                let k = total_counts(&confusion_counts(preds, gts, thr, c, EvalKind::Box).unwrap());
                (k.recall(), k.precision())
            })
            .collect();
        (0..=100)
            .map(|i| {
                let r = i as f64 / 100.0;
                pts.iter()
                    .filter(|(rr, _)| *rr >= r)
                    .map(|(_, p)| *p)
                    .fold(0.0, f64::max)
            })
            .sum::<f64>()
            / 101.0
    }

    fn random_case(rng: &mut ChaCha8Rng, n_pred: usize, n_gt: usize) -> (Vec<Detection>, Vec<Detection>) {
        let gts: Vec<_> = (0..n_gt)
            .map(|_| gt("a", rng.random_range(0..6) as f64 * 8.0, rng.random_range(0..3) as f64 * 8.0))
            .collect();
        let preds: Vec<_> = (0..n_pred)
            .map(|_| {
                pred(
                    "a",
                    rng.random_range(0..50) as f64,
                    rng.random_range(0..20) as f64,
                    rng.random_range(1..6) as f64 / 10.0,
                )
            })
            .collect();
        (preds, gts)
    }

    #[test]
    fn five_prediction_ap_matches_sweep_oracle() {
        let gts = vec![gt("a", 0.0, 0.0), gt("a", 20.0, 0.0), gt("a", 40.0, 0.0)];
        let preds = vec![
            pred("a", 0.0, 1.0, 0.95),
            pred("a", 100.0, 0.0, 0.9),
            pred("a", 21.0, 0.0, 0.7),
            pred("a", 0.0, 0.0, 0.6),
            pred("a", 41.0, 1.0, 0.3),
        ];
        let got = average_precision(&preds, &gts, 0.5, EvalKind::Box).unwrap().ap[&0];
        assert!((got - ap_oracle(&preds, &gts, 0.5)).abs() < 1e-9);
    }

    #[test]
    fn ap_matches_sweep_oracle_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..300 {
            let n_pred = rng.random_range(1..=10);
            let n_gt = rng.random_range(1..6);
            let (preds, gts) = random_case(&mut rng, n_pred, n_gt);
            let got = average_precision(&preds, &gts, 0.5, EvalKind::Box).unwrap().ap[&0];
            assert!((got - ap_oracle(&preds, &gts, 0.5)).abs() < 1e-9);
        }
    }

    #[test]
    fn six_prediction_max_f1_matches_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let (preds, gts) = random_case(&mut rng, 6, 4);
            let (t, f) = max_f1_confidence(&preds, &gts, 0.5, EvalKind::Box).unwrap();
            let mut cuts: Vec<f64> = preds.iter().map(|p| p.confidence.unwrap()).collect();
            cuts.sort_by(|a, b| b.total_cmp(a));
            cuts.dedup();
            let mut best = (0.0, -1.0);
            for c in cuts {
                let k = total_counts(&confusion_counts(&preds, &gts, 0.5, c, EvalKind::Box).unwrap());
                if k.f1() > best.1 {
                    best = (c, k.f1());
                }
            }
            assert_eq!((t, f), best);
        }
    }

    #[test]
    fn report_values_are_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let (preds, gts) = random_case(&mut rng, 8, 5);
        let r = evaluate(&preds, &gts, EvalKind::Box, IouRange::COCO, &["c".into()]).unwrap();
        assert!(r.values_in_unit_range());
        let s = serde_json::to_string(&r).unwrap();
        let back: MetricReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn ap_depends_only_on_rank(seed in any::<u64>(), scale in 0.1f64..0.9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (preds, gts) = random_case(&mut rng, 8, 4);
            let warped: Vec<_> = preds
                .iter()
                .map(|p| {
                    let mut q = p.clone();
                    q.confidence = p.confidence.map(|c| (c * c) * scale);
                    q
                })
                .collect();
            let a = average_precision(&preds, &gts, 0.5, EvalKind::Box).unwrap().ap[&0];
            let b = average_precision(&warped, &gts, 0.5, EvalKind::Box).unwrap().ap[&0];
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn extra_false_positive_never_raises_precision(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (mut preds, gts) = random_case(&mut rng, 6, 4);
            let before = total_counts(&confusion_counts(&preds, &gts, 0.5, 0.0, EvalKind::Box).unwrap());
            preds.push(pred("a", 900.0, 900.0, rng.random_range(0.0..1.0)));
            let after = total_counts(&confusion_counts(&preds, &gts, 0.5, 0.0, EvalKind::Box).unwrap());
            prop_assert!(after.precision() <= before.precision());
        }

        #[test]
        fn extra_ground_truth_never_raises_recall(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (preds, mut gts) = random_case(&mut rng, 6, 4);
            let before = total_counts(&confusion_counts(&preds, &gts, 0.5, 0.0, EvalKind::Box).unwrap());
            gts.push(gt("a", 900.0, 900.0));
            let after = total_counts(&confusion_counts(&preds, &gts, 0.5, 0.0, EvalKind::Box).unwrap());
            prop_assert!(after.recall() <= before.recall());
        }
    }
}
