use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::AdapterSpec;
use crate::types::Split;

/// How seed images are prompted at t = 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedPrompts {
    /// Exact minimum bounding box of each hidden instance.
    Mbb,
    /// One positive point per instance at its most interior pixel.
    Points,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// ε: convergence threshold on the normalized box displacement.
    pub epsilon: f64,
    /// τ_fine: predicted boxes at or above this confidence become prompts.
    pub fine_confidence: f64,
    pub max_iterations: u32,
    /// Share of images that must be converged to stop.
    pub converged_fraction: f64,
    /// Share of images hand-prompted at t = 0.
    pub seed_fraction: f64,
    pub seed: u64,
    pub seed_prompts: SeedPrompts,
    /// Keep only this top-confidence share of fine boxes in each iteration.
    pub fine_fraction: f64,
    /// Restrict annotation to one split; all images when absent.
    pub split: Option<Split>,
    /// A refined mask covering less than this share of its prompt box is a
    /// suspected false positive.
    pub review_min_fill: f64,
    /// Fine boxes overlapping an existing box at this IoU are not re-prompted.
    pub prompt_match_iou: f64,
    /// Refined boxes overlapping an accepted one at this IoU are dropped.
    pub duplicate_iou: f64,
    /// IoU at which consecutive box sets are paired when measuring change.
    pub delta_match_iou: f64,
    /// Retries for adapters reporting themselves unavailable.
    pub adapter_retries: u32,
    /// Worker threads; all cores when absent.
    pub workers: Option<usize>,
    pub segmenter: AdapterSpec,
    pub detector: AdapterSpec,
    /// Fine-box shares for the fraction experiment.
    pub fractions: Vec<f64>,
    /// Run seeds for the fraction experiment.
    pub experiment_seeds: Vec<u64>,
    /// Detector training augmentation settings, recorded but not interpreted.
    pub augmentation: BTreeMap<String, serde_json::Value>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.005,
            fine_confidence: 0.5,
            max_iterations: 10,
            converged_fraction: 0.99,
            seed_fraction: 0.1,
            seed: 0,
            seed_prompts: SeedPrompts::Mbb,
            fine_fraction: 1.0,
            split: None,
            review_min_fill: 0.2,
            prompt_match_iou: 0.5,
            duplicate_iou: 0.7,
            delta_match_iou: 0.1,
            adapter_retries: 2,
            workers: None,
            segmenter: AdapterSpec::new("oracle"),
            detector: AdapterSpec::new("oracle"),
            fractions: vec![0.1, 0.2, 0.5, 1.0],
            experiment_seeds: vec![0, 1, 2, 3, 4],
            augmentation: BTreeMap::new(),
        }
    }
}

fn unit_closed(v: f64) -> bool {
    (0.0..=1.0).contains(&v)
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::Config(format!("{field}: {msg}")));
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon", "must be > 0");
        }
        if !unit_closed(self.fine_confidence) {
            return bad("fine_confidence", "must be in [0, 1]");
        }
        if !(self.converged_fraction > 0.0 && self.converged_fraction <= 1.0) {
            return bad("converged_fraction", "must be in (0, 1]");
        }
        if !(self.seed_fraction > 0.0 && self.seed_fraction <= 1.0) {
            return bad("seed_fraction", "must be in (0, 1]");
        }
        if !(self.fine_fraction > 0.0 && self.fine_fraction <= 1.0) {
            return bad("fine_fraction", "must be in (0, 1]");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations", "must be >= 1");
        }
        for (name, v) in [
            ("review_min_fill", self.review_min_fill),
            ("prompt_match_iou", self.prompt_match_iou),
            ("duplicate_iou", self.duplicate_iou),
            ("delta_match_iou", self.delta_match_iou),
        ] {
            if !unit_closed(v) {
                return bad(name, "must be in [0, 1]");
            }
        }
        if self.workers == Some(0) {
            return bad("workers", "must be >= 1");
        }
        if self.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad("fractions", "every entry must be in (0, 1]");
        }
        Ok(())
    }

    pub fn from_yaml(text: &str) -> Result<Self> {
        let cfg: Self = serde_yaml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_yaml(&std::fs::read_to_string(path)?)
    }

    pub fn to_yaml(&self) -> Result<String> {
        Ok(serde_yaml::to_string(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let back = PipelineConfig::from_yaml(&cfg.to_yaml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_yaml_uses_defaults() {
        let cfg = PipelineConfig::from_yaml(
            "epsilon: 0.01\nsegmenter: {name: oracle, noise_radius: 1.5}\naugmentation: {mosaic: 1.0}\n",
        )
        .unwrap();
        assert_eq!(cfg.epsilon, 0.01);
        assert_eq!(cfg.max_iterations, 10);
        assert_eq!(cfg.segmenter.params["noise_radius"], serde_json::json!(1.5));
    }

    #[test]
    fn violations_name_the_field() {
        let err = PipelineConfig::from_yaml("epsilon: 0\n").unwrap_err();
        assert!(err.to_string().contains("epsilon"));
        let err = PipelineConfig::from_yaml("converged_fraction: 1.5\n").unwrap_err();
        assert!(err.to_string().contains("converged_fraction"));
        let err = PipelineConfig::from_yaml("epsilonn: 0.1\n").unwrap_err();
        assert!(err.to_string().contains("epsilonn"));
    }
}
