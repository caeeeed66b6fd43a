//! Seeded blob datasets: every image holds a few non-overlapping instances,
//! each a union of ellipses.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::truth::{GroundTruth, HiddenInstance, TruthImage};
use crate::error::{Error, Result};
use crate::geometry::morphology::dilate;
use crate::geometry::Bitmap;
use crate::io::{split_dataset, DatasetManifest};
use crate::rng;
use crate::types::ImageRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_images: usize,
    pub width: u32,
    pub height: u32,
    pub min_blobs: usize,
    pub max_blobs: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    pub n_classes: u32,
    /// Train share; the rest is validation.
    pub train_fraction: f64,
    /// Minimum gap in pixels between instances.
    pub gap: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_images: 100,
            width: 128,
            height: 128,
            min_blobs: 3,
            max_blobs: 6,
            min_radius: 6.0,
            max_radius: 14.0,
            n_classes: 1,
            train_fraction: 0.9,
            gap: 2.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::Config(format!("{f}: {m}")));
        if self.n_images == 0 {
            return bad("n_images", "must be >= 1");
        }
        if self.width < 16 || self.height < 16 {
            return bad("width/height", "must be >= 16");
        }
        if self.min_blobs == 0 || self.max_blobs < self.min_blobs {
            return bad("min_blobs/max_blobs", "need 1 <= min_blobs <= max_blobs");
        }
        if !(self.min_radius >= 1.0 && self.max_radius >= self.min_radius) {
            return bad("min_radius/max_radius", "need 1 <= min_radius <= max_radius");
        }
        if 2.0 * self.max_radius >= self.width.min(self.height) as f64 {
            return bad("max_radius", "blobs must fit inside the image");
        }
        if self.n_classes == 0 {
            return bad("n_classes", "must be >= 1");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad("train_fraction", "must be in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    pub truth: GroundTruth,
}

#[derive(Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.a;
        let v = (-s * dx + c * dy) / self.b;
        u * u + v * v <= 1.0
    }
}

fn blob(rng: &mut impl Rng, cfg: &SyntheticConfig) -> Vec<Ellipse> {
    let r = rng.random_range(cfg.min_radius..=cfg.max_radius);
    let margin = r + 1.0;
    let cx = rng.random_range(margin..cfg.width as f64 - margin);
    let cy = rng.random_range(margin..cfg.height as f64 - margin);
    let n = rng.random_range(1..=3);
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let scale = if k == 0 { 1.0 } else { rng.random_range(0.4..0.7) };
        let a = r * scale * rng.random_range(0.7..1.0);
        let b = r * scale * rng.random_range(0.5..1.0);
        let (ox, oy) = if k == 0 {
            (0.0, 0.0)
        } else {
            let ang = rng.random_range(0.0..std::f64::consts::TAU);
            let d = rng.random_range(0.2..0.6) * r;
            (d * ang.cos(), d * ang.sin())
        };
        out.push(Ellipse {
            cx: (cx + ox).clamp(0.0, cfg.width as f64),
            cy: (cy + oy).clamp(0.0, cfg.height as f64),
            a: a.max(1.0),
            b: b.max(1.0),
            theta: rng.random_range(0.0..std::f64::consts::PI),
        });
    }
    out
}

fn generate_image(cfg: &SyntheticConfig, id: &str) -> Result<Vec<HiddenInstance>> {
    let mut rng = rng::stream(cfg.seed, &["synthetic", id]);
    let target = rng.random_range(cfg.min_blobs..=cfg.max_blobs);
    let mut occupied = Bitmap::new(cfg.width, cfg.height);
    let mut out = Vec::new();
    let mut attempts = 0;
    while out.len() < target && attempts < 200 {
        attempts += 1;
        let parts = blob(&mut rng, cfg);
        let class_id = rng.random_range(0..cfg.n_classes);
        let mask = Bitmap::from_fn(cfg.width, cfg.height, |x, y| {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            parts.iter().any(|e| e.contains(px, py))
        });
        if mask.count() < 12 {
            continue;
        }
        if dilate(&mask, cfg.gap).intersection_count(&occupied) > 0 {
            continue;
        }
        occupied.or_assign(&mask);
        out.push(HiddenInstance::new(class_id, mask)?);
    }
    Ok(out)
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let width = (cfg.n_images.saturating_sub(1)).to_string().len().max(4);
    let records: Vec<ImageRecord> = (0..cfg.n_images)
        .map(|i| {
            let id = format!("img{i:0width$}");
            let uri = format!("images/{id}.png");
            ImageRecord::new(id, cfg.width, cfg.height).with_uri(uri)
        })
        .collect();
    let class_names = (0..cfg.n_classes).map(|c| format!("class{c}")).collect();
    let mut manifest = DatasetManifest::new("synthetic", records, class_names);
    if cfg.train_fraction < 1.0 && cfg.n_images >= 2 {
        manifest = split_dataset(&manifest, &[cfg.train_fraction, 1.0 - cfg.train_fraction], cfg.seed)?;
    }
    let mut truth = GroundTruth {
        n_classes: cfg.n_classes,
        ..Default::default()
    };
    for rec in &manifest.images {
        let instances = generate_image(cfg, &rec.id)?;
        truth.images.insert(
            rec.id.clone(),
            TruthImage {
                record: rec.clone(),
                instances,
            },
        );
    }
    Ok(SyntheticDataset { manifest, truth })
}

/// RGB rendering: textured soil background with green instances.
pub fn render(t: &TruthImage, seed: u64) -> image::RgbImage {
    let (w, h) = (t.record.width, t.record.height);
    let s = rng::derive(seed, &["render", &t.record.id]);
    let mut label = vec![u32::MAX; (w * h) as usize];
    for inst in &t.instances {
        for (x, y) in inst.mask.foreground() {
            label[(y * w + x) as usize] = inst.class_id;
        }
    }
    image::RgbImage::from_fn(w, h, |x, y| {
        let n = rng::unit_hash(s, x as u64, y as u64);
        let v = (n * 24.0) as u8;
        match label[(y * w + x) as usize] {
            u32::MAX => image::Rgb([110 + v, 84 + v / 2, 60 + v / 3]),
            c => {
                let shift = (c * 37 % 80) as u8;
                image::Rgb([40 + v / 2 + shift / 2, 150 + v, 50 + shift])
            }
        }
    })
}

impl SyntheticDataset {
    /// Writes `manifest.json`, `ground_truth.json` and, optionally, one PNG per image.
    pub fn write(&self, dir: &Path, images: bool, seed: u64) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.manifest.save(&dir.join("manifest.json"))?;
        self.truth.to_instance_file().save(&dir.join("ground_truth.json"))?;
        if images {
            std::fs::create_dir_all(dir.join("images"))?;
            for t in self.truth.images.values() {
                let path = dir.join(&t.record.uri);
                render(t, seed)
                    .save_with_format(&path, image::ImageFormat::Png)
                    .map_err(|e| Error::Format(format!("writing {}: {e}", path.display())))?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(&dir.join("manifest.json"))?;
        let file = crate::io::InstanceFile::load(&dir.join("ground_truth.json"))?;
        let truth = GroundTruth::from_instances(&manifest, &file)?;
        Ok(Self { manifest, truth })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Split;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            n_images: 12,
            width: 64,
            height: 64,
            min_radius: 4.0,
            max_radius: 9.0,
            ..Default::default()
        }
    }

    #[test]
    fn instances_are_disjoint_and_nonempty() {
        let ds = generate(&small()).unwrap();
        for t in ds.truth.images.values() {
            assert!(!t.instances.is_empty());
            for (i, a) in t.instances.iter().enumerate() {
                assert!(a.mask.count() >= 12);
                for b in &t.instances[i + 1..] {
                    assert_eq!(a.mask.intersection_count(&b.mask), 0);
                }
            }
        }
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&SyntheticConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.truth, c.truth);
    }

    #[test]
    fn split_follows_train_fraction() {
        let ds = generate(&SyntheticConfig { n_images: 20, ..small() }).unwrap();
        assert_eq!(ds.manifest.ids_in(Split::Train).len(), 18);
        assert_eq!(ds.manifest.ids_in(Split::Val).len(), 2);
    }

    #[test]
    fn disk_round_trip_with_images() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small()).unwrap();
        ds.write(dir.path(), true, 0).unwrap();
        let back = SyntheticDataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        let first = &ds.manifest.images[0];
        let png = image::open(dir.path().join(&first.uri)).unwrap();
        assert_eq!((png.width(), png.height()), (64, 64));
    }

    #[test]
    fn bad_config_names_field() {
        let err = generate(&SyntheticConfig { max_blobs: 0, ..small() }).unwrap_err();
        assert!(err.to_string().contains("max_blobs"));
    }
}
