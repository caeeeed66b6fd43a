//! Column-major run-length masks.
//!
//! `counts` alternate background and foreground runs and always start with a
//! background run, which may be zero. `size` is `[height, width]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Bitmap;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub size: [u32; 2],
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn height(&self) -> u32 {
        self.size[0]
    }

    pub fn width(&self) -> u32 {
        self.size[1]
    }

    /// Foreground pixel count, without decoding.
    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
    }

    /// Space-separated counts, e.g. `"4"` or `"0 4"`.
    pub fn counts_string(&self) -> String {
        let parts: Vec<String> = self.counts.iter().map(|c| c.to_string()).collect();
        parts.join(" ")
    }

    pub fn from_counts_string(width: u32, height: u32, s: &str) -> Result<Self> {
        let counts = s
            .split_whitespace()
            .map(|t| {
                t.parse::<u32>()
                    .map_err(|_| Error::Format(format!("bad run length {t:?}")))
            })
            .collect::<Result<Vec<u32>>>()?;
        let rle = Rle {
            size: [height, width],
            counts,
        };
        rle.check()?;
        Ok(rle)
    }

    pub fn check(&self) -> Result<()> {
        let total: u64 = self.counts.iter().map(|&c| c as u64).sum();
        let expect = self.width() as u64 * self.height() as u64;
        if total != expect {
            return Err(Error::Format(format!(
                "run lengths sum to {total}, expected {expect} for {}x{}",
                self.width(),
                self.height()
            )));
        }
        Ok(())
    }
}

pub fn encode(bm: &Bitmap) -> Rle {
    let (w, h) = bm.dims();
    let mut counts = Vec::new();
    let mut cur = false;
    let mut run = 0u32;
    for x in 0..w {
        for y in 0..h {
            let v = bm.get(x, y);
            if v != cur {
                counts.push(run);
                run = 0;
                cur = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    Rle {
        size: [h, w],
        counts,
    }
}

pub fn decode(rle: &Rle) -> Result<Bitmap> {
    rle.check()?;
    let (w, h) = (rle.width(), rle.height());
    let mut bm = Bitmap::new(w, h);
    let hh = h as usize;
    let mut pos = 0usize;
    for (i, &c) in rle.counts.iter().enumerate() {
        let c = c as usize;
        if i % 2 == 1 {
            for p in pos..pos + c {
                bm.set((p / hh) as u32, (p % hh) as u32, true);
            }
        }
        pos += c;
    }
    Ok(bm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn uniform_masks() {
        assert_eq!(encode(&Bitmap::new(2, 2)).counts, vec![4]);
        assert_eq!(encode(&Bitmap::from_fn(2, 2, |_, _| true)).counts, vec![0, 4]);
    }

    #[test]
    fn column_major_order() {
        // first column background, second foreground
        let bm = Bitmap::from_fn(2, 3, |x, _| x == 1);
        let rle = encode(&bm);
        assert_eq!(rle.counts, vec![3, 3]);
        assert_eq!(rle.size, [3, 2]);
        let bm = Bitmap::from_fn(2, 3, |_, y| y == 0);
        assert_eq!(encode(&bm).counts, vec![0, 1, 2, 1, 2]);
    }

    #[test]
    fn bad_sum_is_format_error() {
        let rle = Rle {
            size: [2, 2],
            counts: vec![1, 2],
        };
        assert!(matches!(decode(&rle), Err(Error::Format(_))));
        assert!(Rle::from_counts_string(2, 2, "1 x").is_err());
    }

    #[test]
    fn counts_string_round_trip() {
        let bm = Bitmap::from_fn(4, 3, |x, y| x > y);
        let rle = encode(&bm);
        let back = Rle::from_counts_string(4, 3, &rle.counts_string()).unwrap();
        assert_eq!(back, rle);
        assert_eq!(rle.area(), bm.count() as u64);
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(w in 1u32..30, h in 1u32..30, bits in proptest::collection::vec(any::<bool>(), 900)) {
            let bm = Bitmap::from_fn(w, h, |x, y| bits[(y * w + x) as usize]);
            let rle = encode(&bm);
            prop_assert_eq!(rle.counts.iter().map(|&c| c as u64).sum::<u64>(), (w * h) as u64);
            prop_assert!(rle.counts.iter().skip(1).all(|&c| c > 0));
            prop_assert_eq!(decode(&rle).unwrap(), bm);
        }
    }
}
