//! Euclidean distance transform, disk morphology and connected components.

use super::Bitmap;

const INF: f64 = 1e20;

/// 1-D squared distance transform of a sampled function (Felzenszwalb & Huttenlocher).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    if n == 0 {
        return;
    }
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest pixel where
/// `feature` is true. Pixels with no feature anywhere get a huge value.
pub fn squared_distance_to(feature: &Bitmap) -> Vec<f64> {
    let (w, h) = (feature.width() as usize, feature.height() as usize);
    let mut grid: Vec<f64> = feature.bits().iter().map(|&b| if b { 0.0 } else { INF }).collect();
    let m = w.max(h);
    let mut f = vec![0.0; m];
    let mut out = vec![0.0; m];
    let mut v = vec![0usize; m];
    let mut z = vec![0.0; m + 1];
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

/// Distance from each foreground pixel to the nearest background pixel,
/// counting everything outside the image as background. Background pixels get 0.
pub fn distance_to_background(mask: &Bitmap) -> Vec<f64> {
    let (w, h) = (mask.width(), mask.height());
    // pad by one background pixel on each side
    let padded = Bitmap::from_fn(w + 2, h + 2, |x, y| {
        !(x >= 1 && y >= 1 && x <= w && y <= h && mask.get(x - 1, y - 1))
    });
    let d2 = squared_distance_to(&padded);
    let pw = (w + 2) as usize;
    let mut out = Vec::with_capacity((w * h) as usize);
    for y in 0..h as usize {
        for x in 0..w as usize {
            out.push(d2[(y + 1) * pw + x + 1].sqrt());
        }
    }
    out
}

/// Pixels within Euclidean distance `radius` of the mask.
pub fn dilate(mask: &Bitmap, radius: f64) -> Bitmap {
    if radius <= 0.0 || mask.is_empty() {
        return mask.clone();
    }
    let d2 = squared_distance_to(mask);
    let r2 = radius * radius;
    Bitmap::from_bits(
        mask.width(),
        mask.height(),
        d2.iter().map(|&d| d <= r2).collect(),
    )
}

/// Pixels farther than `radius` from any background pixel (outside counts as background).
pub fn erode(mask: &Bitmap, radius: f64) -> Bitmap {
    if radius <= 0.0 {
        return mask.clone();
    }
    let d = distance_to_background(mask);
    Bitmap::from_bits(
        mask.width(),
        mask.height(),
        d.iter().map(|&d| d > radius).collect(),
    )
}

/// 4-connected components; returns per-pixel labels (0 = background) and the
/// component count.
pub fn connected_components(mask: &Bitmap) -> (Vec<u32>, u32) {
    let (w, h) = (mask.width() as usize, mask.height() as usize);
    let mut labels = vec![0u32; w * h];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.bits()[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if mask.bits()[j] && labels[j] == 0 {
                    labels[j] = next;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
    }
    (labels, next)
}

/// Largest 4-connected component (ties to the lowest label).
pub fn largest_component(mask: &Bitmap) -> Bitmap {
    let (labels, n) = connected_components(mask);
    if n <= 1 {
        return mask.clone();
    }
    let mut sizes = vec![0usize; n as usize + 1];
    for &l in &labels {
        sizes[l as usize] += 1;
    }
    let mut best = 1usize;
    for l in 2..=n as usize {
        if sizes[l] > sizes[best] {
            best = l;
        }
    }
    Bitmap::from_bits(
        mask.width(),
        mask.height(),
        labels.iter().map(|&l| l as usize == best).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn edt_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let (w, h) = (rng.random_range(1..20), rng.random_range(1..20));
            let feat = Bitmap::from_fn(w, h, |_, _| rng.random_bool(0.1));
            if feat.is_empty() {
                continue;
            }
            let d2 = squared_distance_to(&feat);
            for y in 0..h {
                for x in 0..w {
                    let best = feat
                        .foreground()
                        .map(|(fx, fy)| {
                            let dx = fx as f64 - x as f64;
                            let dy = fy as f64 - y as f64;
                            dx * dx + dy * dy
                        })
                        .fold(f64::INFINITY, f64::min);
                    assert_eq!(d2[(y * w + x) as usize], best);
                }
            }
        }
    }

    #[test]
    fn disk_center_is_farthest_from_background() {
        let disk = Bitmap::from_fn(21, 21, |x, y| {
            let (dx, dy) = (x as f64 - 10.0, y as f64 - 10.0);
            dx * dx + dy * dy <= 64.0
        });
        let d = distance_to_background(&disk);
        let (imax, _) = d
            .iter()
            .enumerate()
            .fold((0, -1.0), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
        assert_eq!((imax % 21, imax / 21), (10, 10));
    }

    #[test]
    fn erode_then_dilate_shrinks_and_grows() {
        let sq = Bitmap::from_fn(20, 20, |x, y| (5..15).contains(&x) && (5..15).contains(&y));
        let e = erode(&sq, 2.0);
        assert_eq!(e.count(), 36);
        let d = dilate(&sq, 1.0);
        assert_eq!(d.count(), 100 + 40);
    }

    #[test]
    fn components_are_counted() {
        let bm = Bitmap::from_fn(10, 3, |x, _| x < 3 || x > 5);
        let (_, n) = connected_components(&bm);
        assert_eq!(n, 2);
        assert_eq!(largest_component(&bm).count(), 12);
    }
}
