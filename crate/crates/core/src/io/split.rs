use rand::seq::SliceRandom;

use super::DatasetManifest;
use crate::error::{Error, Result};
use crate::rng;
use crate::types::Split;

/// Per-split counts: floor of `n * f`, then the remainder one by one to the
/// largest fractional parts (ties to the earlier split).
pub fn split_counts(n: usize, fractions: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = fractions.iter().map(|f| n as f64 * f).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - counts[a] as f64;
        let fb = exact[b] - counts[b] as f64;
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Assign splits by a seeded shuffle. `fractions` lists train then val.
pub fn split_dataset(manifest: &DatasetManifest, fractions: &[f64], seed: u64) -> Result<DatasetManifest> {
    if fractions.is_empty() || fractions.len() > 2 {
        return Err(Error::Domain(format!(
            "expected 1 or 2 split fractions (train, val), got {}",
            fractions.len()
        )));
    }
    if fractions.iter().any(|f| !(*f > 0.0) || !f.is_finite()) {
        return Err(Error::Domain(format!("split fractions must be positive: {fractions:?}")));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("split fractions sum to {sum}, not 1")));
    }
    let n = manifest.images.len();
    if n < fractions.len() {
        return Err(Error::Domain(format!(
            "{n} images cannot fill {} splits",
            fractions.len()
        )));
    }
    let counts = split_counts(n, fractions);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &["split"]));
    let mut out = manifest.clone();
    for (rank, &i) in order.iter().enumerate() {
        out.images[i].split = if rank < counts[0] { Split::Train } else { Split::Val };
    }
    out.split_fractions = fractions.to_vec();
    out.split_seed = Some(seed);
    Ok(out)
}
