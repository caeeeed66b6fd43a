//! One-to-one assignment between predicted and reference regions.

use serde::{Deserialize, Serialize};

use super::box_iou;
use crate::types::BBox;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    /// `(pred index, ref index, iou)`, in the order pairs were made.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_refs: Vec<usize>,
}

impl Matching {
    fn from_assignment(assign: &[Option<usize>], n_refs: usize, iou: &[Vec<f64>], order: &[usize]) -> Self {
        let mut ref_used = vec![false; n_refs];
        let mut pairs = Vec::new();
        for &p in order {
            if let Some(r) = assign[p] {
                ref_used[r] = true;
                pairs.push((p, r, iou[p][r]));
            }
        }
        let unmatched_preds = (0..assign.len()).filter(|&p| assign[p].is_none()).collect();
        let unmatched_refs = (0..n_refs).filter(|&r| !ref_used[r]).collect();
        Matching {
            pairs,
            unmatched_preds,
            unmatched_refs,
        }
    }
}

/// Prediction processing order: confidence descending, ties and missing
/// confidences by index.
pub fn confidence_order(confidences: &[Option<f64>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| {
        let ca = confidences[a].unwrap_or(f64::NEG_INFINITY);
        let cb = confidences[b].unwrap_or(f64::NEG_INFINITY);
        cb.total_cmp(&ca).then(a.cmp(&b))
    });
    order
}

/// Greedy matching on a precomputed IoU matrix `iou[pred][ref]`.
pub fn greedy_match_matrix(confidences: &[Option<f64>], iou: &[Vec<f64>], n_refs: usize, threshold: f64) -> Matching {
    let order = confidence_order(confidences);
    let mut ref_used = vec![false; n_refs];
    let mut assign = vec![None; confidences.len()];
    for &p in &order {
        let mut best: Option<(usize, f64)> = None;
        for (r, &v) in iou[p].iter().enumerate() {
            if ref_used[r] || v < threshold {
                continue;
            }
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((r, v));
            }
        }
        if let Some((r, _)) = best {
            ref_used[r] = true;
            assign[p] = Some(r);
        }
    }
    Matching::from_assignment(&assign, n_refs, iou, &order)
}

/// Greedy confidence-ordered box matching: each prediction in turn takes the
/// unmatched reference of highest IoU at or above `iou_threshold`.
pub fn greedy_match(preds: &[BBox], refs: &[BBox], iou_threshold: f64) -> Matching {
    let iou = iou_matrix(preds, refs);
    let conf: Vec<Option<f64>> = preds.iter().map(|b| b.confidence).collect();
    greedy_match_matrix(&conf, &iou, refs.len(), iou_threshold)
}

pub fn iou_matrix(preds: &[BBox], refs: &[BBox]) -> Vec<Vec<f64>> {
    preds
        .iter()
        .map(|p| refs.iter().map(|r| box_iou(p, r)).collect())
        .collect()
}

/// Order-free greedy matching: repeatedly pairs the two unmatched boxes of
/// highest IoU. Swapping the two lists yields the mirrored pairing whenever
/// IoU values are distinct.
pub fn match_by_iou(a: &[BBox], b: &[BBox], iou_threshold: f64) -> Matching {
    let iou = iou_matrix(a, b);
    let mut cands: Vec<(usize, usize, f64)> = Vec::new();
    for (i, row) in iou.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v >= iou_threshold && v > 0.0 {
                cands.push((i, j, v));
            }
        }
    }
    cands.sort_by(|x, y| {
        y.2.total_cmp(&x.2)
            .then_with(|| corner_shift(&a[x.0], &b[x.1]).total_cmp(&corner_shift(&a[y.0], &b[y.1])))
            .then_with(|| (x.0.min(x.1), x.0, x.1).cmp(&(y.0.min(y.1), y.0, y.1)))
    });
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    let mut pairs = Vec::new();
    for (i, j, v) in cands {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            pairs.push((i, j, v));
        }
    }
    Matching {
        pairs,
        unmatched_preds: (0..a.len()).filter(|&i| !used_a[i]).collect(),
        unmatched_refs: (0..b.len()).filter(|&j| !used_b[j]).collect(),
    }
}

fn corner_shift(a: &BBox, b: &BBox) -> f64 {
    (a.x_min - b.x_min).hypot(a.y_min - b.y_min) + (a.x_max - b.x_max).hypot(a.y_max - b.y_max)
}

/// Assignment maximizing total IoU over pairs at or above the threshold
/// (Hungarian algorithm). Offered as an alternative to greedy matching.
pub fn optimal_match(preds: &[BBox], refs: &[BBox], iou_threshold: f64) -> Matching {
    let iou = iou_matrix(preds, refs);
    let n = preds.len().max(refs.len());
    if n == 0 {
        return Matching::default();
    }
    // cost = -iou for admissible pairs, 0 otherwise; padded square
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i < preds.len() && j < refs.len() && iou[i][j] >= iou_threshold {
                        -iou[i][j]
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let row_to_col = hungarian(&cost);
    let mut assign = vec![None; preds.len()];
    for (i, slot) in assign.iter_mut().enumerate() {
        let j = row_to_col[i];
        if j < refs.len() && iou[i][j] >= iou_threshold && iou[i][j] > 0.0 {
            *slot = Some(j);
        }
    }
    let conf: Vec<Option<f64>> = preds.iter().map(|b| b.confidence).collect();
    Matching::from_assignment(&assign, refs.len(), &iou, &confidence_order(&conf))
}

/// Minimum-cost perfect assignment on a square matrix (Jonker-Volgenant style
/// potentials, O(n³)). Returns the column for each row.
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1)
    }

    #[test]
    fn singleton_lists_pair() {
        let a = b(0.0, 0.0, 4.0, 4.0).with_confidence(0.9);
        let m = greedy_match(&[a], &[b(0.0, 0.0, 4.0, 4.0)], 0.5);
        assert_eq!(m.pairs, vec![(0, 0, 1.0)]);
        assert!(m.unmatched_preds.is_empty() && m.unmatched_refs.is_empty());
    }

    #[test]
    fn no_predictions_leaves_refs_unmatched() {
        let m = greedy_match(&[], &[b(0.0, 0.0, 1.0, 1.0), b(2.0, 2.0, 3.0, 3.0)], 0.5);
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_refs, vec![0, 1]);
    }

    /// Exhaustive oracle: enumerate every one-to-one partial assignment that
    /// respects the threshold, keep the lexicographically best IoU vector in
    /// confidence order (which is what greedy order means).
    fn enumerate_best(order: &[usize], iou: &[Vec<f64>], n_refs: usize, thr: f64) -> Vec<Option<usize>> {
        fn rec(
            k: usize,
            order: &[usize],
            iou: &[Vec<f64>],
            n_refs: usize,
            thr: f64,
            used: &mut Vec<bool>,
            cur: &mut Vec<Option<usize>>,
            best: &mut Option<(Vec<f64>, Vec<Option<usize>>)>,
        ) {
            if k == order.len() {
                let key: Vec<f64> = order
                    .iter()
                    .map(|&p| cur[p].map(|r| iou[p][r]).unwrap_or(-1.0))
                    .collect();
                let better = match best {
                    None => true,
                    Some((bk, _)) => key.iter().zip(bk.iter()).find(|(a, b)| a != b).is_some_and(|(a, b)| a > b),
                };
                if better {
                    *best = Some((key, cur.clone()));
                }
                return;
            }
            let p = order[k];
            rec(k + 1, order, iou, n_refs, thr, used, cur, best);
            for r in 0..n_refs {
                if !used[r] && iou[p][r] >= thr {
                    used[r] = true;
                    cur[p] = Some(r);
                    rec(k + 1, order, iou, n_refs, thr, used, cur, best);
                    cur[p] = None;
                    used[r] = false;
                }
            }
        }
        let mut best = None;
        rec(0, order, iou, n_refs, thr, &mut vec![false; n_refs], &mut vec![None; iou.len()], &mut best);
        best.unwrap().1
    }

    #[test]
    fn greedy_matches_enumeration_on_crafted_grid() {
        let preds = [
            b(0.0, 0.0, 10.0, 10.0).with_confidence(0.9),
            b(1.0, 0.0, 11.0, 10.0).with_confidence(0.8),
            b(5.0, 0.0, 15.0, 10.0).with_confidence(0.7),
        ];
        let refs = [b(0.5, 0.0, 10.5, 10.0), b(6.0, 0.0, 16.0, 10.0)];
        let m = greedy_match(&preds, &refs, 0.5);
        let iou = iou_matrix(&preds, &refs);
        let conf: Vec<_> = preds.iter().map(|p| p.confidence).collect();
        let expect = enumerate_best(&confidence_order(&conf), &iou, 2, 0.5);
        let mut got = vec![None; 3];
        for &(p, r, _) in &m.pairs {
            got[p] = Some(r);
        }
        assert_eq!(got, expect);
        assert_eq!(got, vec![Some(0), None, Some(1)]);
    }

    #[test]
    fn greedy_matches_enumeration_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let np = rng.random_range(0..5);
            let nr = rng.random_range(0..5);
            let mk = |rng: &mut ChaCha8Rng| {
                let x = rng.random_range(0.0..20.0);
                let y = rng.random_range(0.0..20.0);
                b(x, y, x + rng.random_range(2.0..10.0), y + rng.random_range(2.0..10.0))
            };
            let preds: Vec<BBox> = (0..np).map(|_| mk(&mut rng).with_confidence(rng.random())).collect();
            let refs: Vec<BBox> = (0..nr).map(|_| mk(&mut rng)).collect();
            let thr = rng.random_range(0.0..0.6);
            let m = greedy_match(&preds, &refs, thr);
            let iou = iou_matrix(&preds, &refs);
            let conf: Vec<_> = preds.iter().map(|p| p.confidence).collect();
            let expect = enumerate_best(&confidence_order(&conf), &iou, nr, thr);
            let mut got = vec![None; np];
            for &(p, r, _) in &m.pairs {
                got[p] = Some(r);
            }
            assert_eq!(got, expect);
        }
    }

    #[test]
    fn optimal_beats_or_ties_greedy_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let mk = |rng: &mut ChaCha8Rng| {
                let x = rng.random_range(0.0..15.0);
                let y = rng.random_range(0.0..15.0);
                b(x, y, x + rng.random_range(3.0..9.0), y + rng.random_range(3.0..9.0))
            };
            let preds: Vec<BBox> = (0..4).map(|_| mk(&mut rng).with_confidence(rng.random())).collect();
            let refs: Vec<BBox> = (0..4).map(|_| mk(&mut rng)).collect();
            let g: f64 = greedy_match(&preds, &refs, 0.1).pairs.iter().map(|p| p.2).sum();
            let o: f64 = optimal_match(&preds, &refs, 0.1).pairs.iter().map(|p| p.2).sum();
            assert!(o >= g - 1e-12);
        }
    }

    #[test]
    fn match_by_iou_is_mirror_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let mk = |rng: &mut ChaCha8Rng| {
                let x = rng.random_range(0.0..30.0);
                let y = rng.random_range(0.0..30.0);
                b(x, y, x + rng.random_range(2.0..12.0), y + rng.random_range(2.0..12.0))
            };
            let a: Vec<BBox> = (0..rng.random_range(0..6)).map(|_| mk(&mut rng)).collect();
            let c: Vec<BBox> = (0..rng.random_range(0..6)).map(|_| mk(&mut rng)).collect();
            let ab = match_by_iou(&a, &c, 0.1);
            let ba = match_by_iou(&c, &a, 0.1);
            let mut x: Vec<(usize, usize)> = ab.pairs.iter().map(|p| (p.0, p.1)).collect();
            let mut y: Vec<(usize, usize)> = ba.pairs.iter().map(|p| (p.1, p.0)).collect();
            x.sort();
            y.sort();
            assert_eq!(x, y);
        }
    }
}
