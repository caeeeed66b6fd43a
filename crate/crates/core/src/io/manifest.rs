//! Dataset manifest and per-image instance files (JSON).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{validate_instance, ImageRecord, MaskInstance, Split};

/// Where an image's current labels came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Pipeline iteration that produced the labels; 0 for seed annotation.
    pub iteration: u32,
    /// Free-form origin, e.g. `seed`, `pipeline`, `review`, `synthetic`.
    pub source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub images: Vec<ImageRecord>,
    pub class_names: Vec<String>,
    /// Split fractions used for the current assignment, train first.
    #[serde(default)]
    pub split_fractions: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
    #[serde(default)]
    pub provenance: BTreeMap<String, Provenance>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, images: Vec<ImageRecord>, class_names: Vec<String>) -> Self {
        Self {
            name: name.into(),
            images,
            class_names,
            split_fractions: vec![1.0],
            split_seed: None,
            provenance: BTreeMap::new(),
        }
    }

    pub fn image(&self, id: &str) -> Result<&ImageRecord> {
        self.images
            .iter()
            .find(|i| i.id == id)
            .ok_or_else(|| Error::Lookup(format!("unknown image {id}")))
    }

    pub fn ids_in(&self, split: Split) -> Vec<String> {
        self.images
            .iter()
            .filter(|i| i.split == split)
            .map(|i| i.id.clone())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for img in &self.images {
            img.validate()?;
            if !seen.insert(img.id.as_str()) {
                return Err(Error::Domain(format!("duplicate image id {}", img.id)));
            }
        }
        if self.class_names.is_empty() {
            return Err(Error::Domain("manifest has no classes".into()));
        }
        if !self.split_fractions.is_empty() {
            let sum: f64 = self.split_fractions.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Domain(format!("split fractions sum to {sum}")));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = super::read_json(path)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_json(path, self)
    }
}

/// Instances grouped by image id; used both for ground truth and predictions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InstanceFile {
    pub images: BTreeMap<String, Vec<MaskInstance>>,
}

impl InstanceFile {
    pub fn get(&self, id: &str) -> &[MaskInstance] {
        self.images.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Class ids in range and every instance valid for its image.
    pub fn validate(&self, manifest: &DatasetManifest) -> Result<()> {
        for (id, insts) in &self.images {
            let img = manifest.image(id)?;
            for inst in insts {
                if inst.class_id as usize >= manifest.class_names.len() {
                    return Err(Error::Domain(format!(
                        "class id {} on {id} but only {} classes",
                        inst.class_id,
                        manifest.class_names.len()
                    )));
                }
                let report = validate_instance(inst, img);
                if !report.is_valid() {
                    return Err(Error::Domain(format!(
                        "invalid instance on {id}: {}",
                        report.messages().join("; ")
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        super::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_json(path, self)
    }
}
