use std::collections::BTreeMap;

use super::AdapterError;
use crate::error::Result;
use crate::geometry::{minimum_bounding_box, Bitmap};
use crate::io::{DatasetManifest, InstanceFile};
use crate::types::{BBox, ImageRecord, MaskInstance, Split};

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenInstance {
    pub class_id: u32,
    pub mask: Bitmap,
    pub bbox: BBox,
}

impl HiddenInstance {
    pub fn new(class_id: u32, mask: Bitmap) -> Result<Self> {
        let bbox = minimum_bounding_box(&mask)?;
        Ok(Self {
            class_id,
            mask,
            bbox,
        })
    }

    /// Whether pixel `(x, y)` belongs to the instance.
    pub fn contains(&self, x: i64, y: i64) -> bool {
        self.mask.get_signed(x, y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TruthImage {
    pub record: ImageRecord,
    pub instances: Vec<HiddenInstance>,
}

/// Hidden instances the oracles answer from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundTruth {
    pub images: BTreeMap<String, TruthImage>,
    pub n_classes: u32,
}

impl GroundTruth {
    pub fn get(&self, id: &str) -> std::result::Result<&TruthImage, AdapterError> {
        self.images
            .get(id)
            .ok_or_else(|| AdapterError::UnknownImage(id.to_string()))
    }

    pub fn from_instances(manifest: &DatasetManifest, file: &InstanceFile) -> Result<Self> {
        file.validate(manifest)?;
        let mut images = BTreeMap::new();
        for img in &manifest.images {
            let instances = file
                .get(&img.id)
                .iter()
                .map(|inst| HiddenInstance::new(inst.class_id, inst.decode_for(img)?))
                .collect::<Result<Vec<_>>>()?;
            images.insert(
                img.id.clone(),
                TruthImage {
                    record: img.clone(),
                    instances,
                },
            );
        }
        Ok(Self {
            images,
            n_classes: manifest.class_names.len() as u32,
        })
    }

    pub fn to_instance_file(&self) -> InstanceFile {
        let mut out = InstanceFile::default();
        for (id, t) in &self.images {
            out.images.insert(
                id.clone(),
                t.instances
                    .iter()
                    .map(|h| MaskInstance::from_bitmap_rle(id.clone(), h.class_id, &h.mask))
                    .collect(),
            );
        }
        out
    }

    /// Instance count over images of the given split, or all images.
    pub fn instance_count(&self, split: Option<Split>) -> usize {
        self.images
            .values()
            .filter(|t| split.is_none_or(|s| t.record.split == s))
            .map(|t| t.instances.len())
            .sum()
    }

    pub fn instance_count_in(&self, ids: &[String]) -> usize {
        ids.iter()
            .filter_map(|id| self.images.get(id))
            .map(|t| t.instances.len())
            .sum()
    }
}
