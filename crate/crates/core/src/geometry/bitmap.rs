use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Row-major foreground flags.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Bitmap {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl std::fmt::Debug for Bitmap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "Bitmap {}x{} ({} fg)", self.width, self.height, self.count())?;
        if self.width <= 64 && self.height <= 64 {
            for y in 0..self.height {
                let row: String = (0..self.width)
                    .map(|x| if self.get(x, y) { '#' } else { '.' })
                    .collect();
                writeln!(f, "{row}")?;
            }
        }
        Ok(())
    }
}

impl Bitmap {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    /// Panics unless `bits.len() == width * height`.
    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), width as usize * height as usize);
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    fn idx(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[self.idx(x, y)]
    }

    /// Out-of-range coordinates read as background.
    #[inline]
    pub fn get_signed(&self, x: i64, y: i64) -> bool {
        x >= 0
            && y >= 0
            && (x as u64) < self.width as u64
            && (y as u64) < self.height as u64
            && self.get(x as u32, y as u32)
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        let i = self.idx(x, y);
        self.bits[i] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn foreground(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width as usize;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| ((i % w) as u32, (i / w) as u32))
    }

    pub fn same_dims(&self, other: &Bitmap) -> bool {
        self.dims() == other.dims()
    }

    /// Panics on mismatched dimensions; callers check first.
    pub fn intersection_count(&self, other: &Bitmap) -> usize {
        assert!(self.same_dims(other));
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn union_count(&self, other: &Bitmap) -> usize {
        assert!(self.same_dims(other));
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a || b)
            .count()
    }

    pub fn or_assign(&mut self, other: &Bitmap) {
        assert!(self.same_dims(other));
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }

    pub fn and_not_assign(&mut self, other: &Bitmap) {
        assert!(self.same_dims(other));
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a &= !b;
        }
    }

    pub fn and(&self, other: &Bitmap) -> Bitmap {
        assert!(self.same_dims(other));
        Bitmap {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect(),
        }
    }

    pub fn not(&self) -> Bitmap {
        Bitmap {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }
}

// Serialized as `{"width", "height", "rows": ["0110", ...]}`.
#[derive(Serialize, Deserialize)]
struct BitmapRepr {
    width: u32,
    height: u32,
    rows: Vec<String>,
}

impl Serialize for Bitmap {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let rows = (0..self.height)
            .map(|y| {
                (0..self.width)
                    .map(|x| if self.get(x, y) { '1' } else { '0' })
                    .collect()
            })
            .collect();
        BitmapRepr {
            width: self.width,
            height: self.height,
            rows,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Bitmap {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let repr = BitmapRepr::deserialize(d)?;
        if repr.rows.len() != repr.height as usize {
            return Err(D::Error::custom(format!(
                "bitmap has {} rows, height is {}",
                repr.rows.len(),
                repr.height
            )));
        }
        let mut bits = Vec::with_capacity(repr.width as usize * repr.height as usize);
        for row in &repr.rows {
            if row.len() != repr.width as usize {
                return Err(D::Error::custom("bitmap row length differs from width"));
            }
            for c in row.chars() {
                match c {
                    '0' => bits.push(false),
                    '1' => bits.push(true),
                    other => return Err(D::Error::custom(format!("bad bitmap char {other:?}"))),
                }
            }
        }
        Ok(Bitmap {
            width: repr.width,
            height: repr.height,
            bits,
        })
    }
}
