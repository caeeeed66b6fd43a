//! Polygon fill and boundary tracing.
//!
//! Fill rule is even-odd, sampled at cell centers `(x + 0.5, y + 0.5)`. A center
//! lying exactly on a crossing at `a` belongs to the span `[a, b)`.

use std::collections::BTreeMap;

use super::{center_span, Bitmap};
use crate::types::Ring;

/// Rasterize rings with the even-odd rule. Vertices outside the image are
/// clamped onto its border and reported in the returned warnings.
pub fn rasterize_polygons(rings: &[Ring], width: u32, height: u32) -> (Bitmap, Vec<String>) {
    let mut warnings = Vec::new();
    let (w, h) = (width as f64, height as f64);
    let mut edges: Vec<([f64; 2], [f64; 2])> = Vec::new();
    for (ri, ring) in rings.iter().enumerate() {
        if ring.len() < 3 {
            warnings.push(format!("ring {ri} has {} vertices, skipped", ring.len()));
            continue;
        }
        let mut clamped = 0usize;
        let pts: Vec<[f64; 2]> = ring
            .iter()
            .map(|&[x, y]| {
                let c = [x.clamp(0.0, w), y.clamp(0.0, h)];
                if c != [x, y] {
                    clamped += 1;
                }
                c
            })
            .collect();
        if clamped > 0 {
            warnings.push(format!("ring {ri}: {clamped} vertices clamped to image bounds"));
        }
        for i in 0..pts.len() {
            let a = pts[i];
            let b = pts[(i + 1) % pts.len()];
            if a[1] == b[1] {
                continue;
            }
            // canonical endpoint order so a bridge walked both ways yields identical crossings
            edges.push(if a[1] < b[1] { (a, b) } else { (b, a) });
        }
    }

    let mut bm = Bitmap::new(width, height);
    let mut xs: Vec<f64> = Vec::new();
    for y in 0..height {
        let yc = y as f64 + 0.5;
        xs.clear();
        for &(a, b) in &edges {
            if (a[1] > yc) != (b[1] > yc) {
                xs.push(a[0] + (yc - a[1]) * (b[0] - a[0]) / (b[1] - a[1]));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            let (x0, x1) = center_span(pair[0], pair[1], width);
            for x in x0..x1 {
                bm.set(x, y, true);
            }
        }
    }
    (bm, warnings)
}

/// Trace cell boundaries into closed rings with integer corner vertices.
/// Holes come out as separate rings; with even-odd fill the union of rings
/// rasterizes back to the input exactly.
pub fn mask_to_polygons(bitmap: &Bitmap) -> Vec<Ring> {
    type V = (i64, i64);
    // directed edges with foreground on the right-hand side (y down)
    let mut out_edges: BTreeMap<V, Vec<V>> = BTreeMap::new();
    let mut n_edges = 0usize;
    for (x, y) in bitmap.foreground() {
        let (x, y) = (x as i64, y as i64);
        let mut push = |a: V, b: V| {
            out_edges.entry(a).or_default().push(b);
            n_edges += 1;
        };
        if !bitmap.get_signed(x, y - 1) {
            push((x, y), (x + 1, y));
        }
        if !bitmap.get_signed(x + 1, y) {
            push((x + 1, y), (x + 1, y + 1));
        }
        if !bitmap.get_signed(x, y + 1) {
            push((x + 1, y + 1), (x, y + 1));
        }
        if !bitmap.get_signed(x - 1, y) {
            push((x, y + 1), (x, y));
        }
    }

    let mut rings = Vec::new();
    let mut used = 0usize;
    while used < n_edges {
        let start = *out_edges
            .iter()
            .find(|(_, v)| !v.is_empty())
            .map(|(k, _)| k)
            .expect("edges remain");
        let mut path: Vec<V> = vec![start];
        let mut cur = start;
        let mut prev_dir: Option<V> = None;
        loop {
            let outs = out_edges.get_mut(&cur).expect("closed boundary");
            // at a saddle vertex prefer the right turn, keeping diagonal cells apart
            let pick = match prev_dir {
                Some(d) if outs.len() > 1 => {
                    let right = (-d.1, d.0);
                    outs.iter()
                        .position(|n| (n.0 - cur.0, n.1 - cur.1) == right)
                        .unwrap_or(0)
                }
                _ => 0,
            };
            let next = outs.swap_remove(pick);
            used += 1;
            prev_dir = Some((next.0 - cur.0, next.1 - cur.1));
            cur = next;
            if cur == start {
                break;
            }
            path.push(cur);
        }
        rings.push(simplify(&path));
    }
    rings
}

fn simplify(path: &[(i64, i64)]) -> Ring {
    let n = path.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let p = path[(i + n - 1) % n];
        let c = path[i];
        let q = path[(i + 1) % n];
        let cross = (c.0 - p.0) * (q.1 - c.1) - (c.1 - p.1) * (q.0 - c.0);
        if cross != 0 {
            out.push([c.0 as f64, c.1 as f64]);
        }
    }
    out
}

/// Join several rings into one vertex sequence using zero-width bridges from
/// the first vertex of the first ring. Each bridge is walked once in each
/// direction, so even-odd fill of the merged ring equals fill of the set.
pub fn merge_rings(rings: &[Ring]) -> Ring {
    let mut iter = rings.iter().filter(|r| !r.is_empty());
    let Some(first) = iter.next() else {
        return Vec::new();
    };
    let anchor = first[0];
    let mut out = first.clone();
    for ring in iter {
        out.push(anchor);
        out.extend_from_slice(ring);
        out.push(ring[0]);
    }
    if out.len() > first.len() {
        out.push(anchor);
    }
    out
}
