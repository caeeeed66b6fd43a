//! Normalized polygon label text.
//!
//! One line per instance: `class_id x1 y1 x2 y2 ...` with coordinates divided
//! by image width and height and printed with 6 decimals. Instances made of
//! several rings are written as one ring joined by zero-width bridges.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{mask_to_polygons, merge_rings};
use crate::types::{ImageRecord, MaskInstance, MaskPayload, Ring};

#[derive(Clone, Debug, PartialEq)]
pub struct LabelLine {
    pub class_id: u32,
    /// Normalized vertices.
    pub points: Ring,
}

impl LabelLine {
    pub fn to_instance(&self, img: &ImageRecord) -> MaskInstance {
        let (w, h) = (img.width as f64, img.height as f64);
        let ring = self.points.iter().map(|&[x, y]| [x * w, y * h]).collect();
        MaskInstance {
            image_id: img.id.clone(),
            class_id: self.class_id,
            payload: MaskPayload::Polygon(vec![ring]),
            confidence: None,
        }
    }
}

fn instance_ring(inst: &MaskInstance, img: &ImageRecord) -> Result<Ring> {
    let rings = match &inst.payload {
        MaskPayload::Polygon(rings) => rings.clone(),
        _ => mask_to_polygons(&inst.decode_for(img)?),
    };
    let ring = merge_rings(&rings);
    if ring.len() < 3 {
        return Err(Error::Domain(format!(
            "instance of class {} on {} has no polygon with 3 vertices",
            inst.class_id, img.id
        )));
    }
    Ok(ring)
}

pub fn format_labels(instances: &[MaskInstance], img: &ImageRecord) -> Result<String> {
    img.validate()?;
    let (w, h) = (img.width as f64, img.height as f64);
    let mut out = String::new();
    for inst in instances {
        let ring = instance_ring(inst, img)?;
        write!(out, "{}", inst.class_id).expect("string write");
        for [x, y] in ring {
            write!(out, " {:.6} {:.6}", x / w, y / h).expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_labels(text: &str) -> Result<Vec<LabelLine>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let err = |msg: String| Error::Parse { line: lineno, msg };
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        let class_id: u32 = toks[0]
            .parse()
            .map_err(|_| err(format!("class id {:?} is not a non-negative integer", toks[0])))?;
        let coords = &toks[1..];
        if coords.len() % 2 != 0 {
            return Err(err(format!("odd number of coordinates ({})", coords.len())));
        }
        if coords.len() < 6 {
            return Err(err(format!("{} vertices, need at least 3", coords.len() / 2)));
        }
        let mut points = Vec::with_capacity(coords.len() / 2);
        for pair in coords.chunks_exact(2) {
            let mut v = [0.0; 2];
            for (k, t) in pair.iter().enumerate() {
                let c: f64 = t.parse().map_err(|_| err(format!("bad coordinate {t:?}")))?;
                if !(0.0..=1.0).contains(&c) {
                    return Err(err(format!("coordinate {c} outside [0, 1]")));
                }
                v[k] = c;
            }
            points.push(v);
        }
        out.push(LabelLine { class_id, points });
    }
    Ok(out)
}

pub fn write_labels(path: &Path, instances: &[MaskInstance], img: &ImageRecord) -> Result<()> {
    let text = format_labels(instances, img)?;
    super::write_atomic(path, text.as_bytes())
}

pub fn read_labels(path: &Path, img: &ImageRecord) -> Result<Vec<MaskInstance>> {
    let text = std::fs::read_to_string(path)?;
    Ok(parse_labels(&text)?
        .iter()
        .map(|l| l.to_instance(img))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Bitmap;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(w: u32, h: u32) -> ImageRecord {
        ImageRecord::new("im", w, h)
    }

    #[test]
    fn triangle_line() {
        let tri = MaskInstance {
            image_id: "im".into(),
            class_id: 0,
            payload: MaskPayload::Polygon(vec![vec![[10.0, 10.0], [50.0, 90.0], [90.0, 10.0]]]),
            confidence: None,
        };
        let s = format_labels(&[tri], &img(100, 100)).unwrap();
        assert_eq!(s, "0 0.100000 0.100000 0.500000 0.900000 0.900000 0.100000\n");
    }

    #[test]
    fn no_instances_is_empty_text() {
        assert_eq!(format_labels(&[], &img(8, 8)).unwrap(), "");
        assert!(parse_labels("").unwrap().is_empty());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "0 0.1 0.1 0.5 0.9 0.9 0.1\n1 0.1 0.2 0.3\n";
        match parse_labels(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_labels("x 0 0 1 0 1 1"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_labels("0 0 0 1 0 1 1.5"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_labels("\n\n0 0 0 1 0 1"), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn writes_are_byte_identical() {
        let bm = Bitmap::from_fn(16, 16, |x, y| (3..9).contains(&x) && (2..12).contains(&y));
        let inst = MaskInstance::from_bitmap("im", 2, bm);
        let a = format_labels(&[inst.clone()], &img(16, 16)).unwrap();
        let b = format_labels(&[inst], &img(16, 16)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("im.txt");
        let i = img(64, 48);
        let bm = Bitmap::from_fn(64, 48, |x, y| (x as i32 - 30).pow(2) + (y as i32 - 20).pow(2) < 120);
        write_labels(&path, &[MaskInstance::from_bitmap_rle("im", 1, &bm)], &i).unwrap();
        let back = read_labels(&path, &i).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].class_id, 1);
        assert_eq!(back[0].decode_for(&i).unwrap(), bm);
    }

    proptest! {
        #[test]
        fn text_round_trip_within_tolerance(seed in any::<u64>(), n in 1usize..5, w in 20u32..700, h in 20u32..700) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let i = img(w, h);
            let insts: Vec<MaskInstance> = (0..n)
                .map(|k| {
                    let m = rng.random_range(3..9);
                    let ring: Ring = (0..m)
                        .map(|_| [rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64)])
                        .collect();
                    MaskInstance {
                        image_id: "im".into(),
                        class_id: k as u32,
                        payload: MaskPayload::Polygon(vec![ring]),
                        confidence: None,
                    }
                })
                .collect();
            let text = format_labels(&insts, &i).unwrap();
            let back = parse_labels(&text).unwrap();
            prop_assert_eq!(back.len(), insts.len());
            for (line, inst) in back.iter().zip(&insts) {
                prop_assert_eq!(line.class_id, inst.class_id);
                let MaskPayload::Polygon(rings) = &inst.payload else { unreachable!() };
                let restored = line.to_instance(&i);
                let MaskPayload::Polygon(r2) = &restored.payload else { unreachable!() };
                for (a, b) in rings[0].iter().zip(&r2[0]) {
                    prop_assert!((a[0] - b[0]).abs() / w as f64 <= 1e-5 + 1e-12);
                    prop_assert!((a[1] - b[1]).abs() / h as f64 <= 1e-5 + 1e-12);
                }
            }
        }
    }
}
