//! Named adapter factories, selected from the pipeline config.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Detector, GroundTruth, OracleDetector, OracleSegmenter, Segmenter};
use crate::error::{Error, Result};
use crate::types::Split;

/// `name` picks the factory; every other key is a factory parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub name: String,
    #[serde(flatten)]
    pub params: BTreeMap<String, serde_json::Value>,
}

impl AdapterSpec {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            params: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.params.insert(key.into(), value.into());
        self
    }

    /// Reject parameters the factory does not know, naming the first one.
    pub fn allow_only(&self, role: &str, keys: &[&str]) -> Result<()> {
        match self.params.keys().find(|k| !keys.contains(&k.as_str())) {
            Some(k) => Err(Error::Config(format!(
                "{role}.{k}: unknown parameter for adapter {:?} (known: {})",
                self.name,
                keys.join(", ")
            ))),
            None => Ok(()),
        }
    }

    pub fn f64_or(&self, role: &str, key: &str, default: f64) -> Result<f64> {
        match self.params.get(key) {
            None | Some(serde_json::Value::Null) => Ok(default),
            Some(v) => v
                .as_f64()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::Config(format!("{role}.{key}: expected a number, got {v}"))),
        }
    }

    pub fn usize_opt(&self, role: &str, key: &str) -> Result<Option<usize>> {
        match self.params.get(key) {
            None | Some(serde_json::Value::Null) => Ok(None),
            Some(v) => v
                .as_u64()
                .map(|x| Some(x as usize))
                .ok_or_else(|| Error::Config(format!("{role}.{key}: expected a non-negative integer, got {v}"))),
        }
    }
}

/// What factories may draw on: hidden truth for oracles, and the run seed.
#[derive(Clone, Debug, Default)]
pub struct AdapterContext {
    pub truth: Option<Arc<GroundTruth>>,
    pub seed: u64,
    /// Images the detector learns from; sets the oracle detector's saturation point.
    pub train_ids: Option<Vec<String>>,
}

impl AdapterContext {
    fn truth(&self, role: &str, name: &str) -> Result<Arc<GroundTruth>> {
        self.truth.clone().ok_or_else(|| {
            Error::Config(format!("{role}: adapter {name:?} needs a dataset with ground truth"))
        })
    }
}

type SegmenterFactory = Box<dyn Fn(&AdapterSpec, &AdapterContext) -> Result<Arc<dyn Segmenter>> + Send + Sync>;
type DetectorFactory = Box<dyn Fn(&AdapterSpec, &AdapterContext) -> Result<Arc<dyn Detector>> + Send + Sync>;

pub struct Registry {
    segmenters: BTreeMap<String, SegmenterFactory>,
    detectors: BTreeMap<String, DetectorFactory>,
}

impl Default for Registry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl Registry {
    pub fn empty() -> Self {
        Self {
            segmenters: BTreeMap::new(),
            detectors: BTreeMap::new(),
        }
    }

    /// The oracle backends, registered as `oracle`.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register_segmenter("oracle", |spec, ctx| {
            spec.allow_only("segmenter", &["noise_radius", "leak"])?;
            let rho = spec.f64_or("segmenter", "noise_radius", 0.0)?;
            let leak = spec.f64_or("segmenter", "leak", 0.0)?;
            if rho < 0.0 {
                return Err(Error::Config("segmenter.noise_radius: must be >= 0".into()));
            }
            if !(0.0..=1.0).contains(&leak) {
                return Err(Error::Config("segmenter.leak: must be in [0, 1]".into()));
            }
            let truth = ctx.truth("segmenter", &spec.name)?;
            Ok(Arc::new(OracleSegmenter::new(truth, rho, ctx.seed).with_leak(leak)) as Arc<dyn Segmenter>)
        });
        r.register_detector("oracle", |spec, ctx| {
            spec.allow_only("detector", &["sigma0", "fp_rate", "n_full"])?;
            let sigma0 = spec.f64_or("detector", "sigma0", 4.0)?;
            let fp_rate = spec.f64_or("detector", "fp_rate", 0.1)?;
            if sigma0 < 0.0 {
                return Err(Error::Config("detector.sigma0: must be >= 0".into()));
            }
            if fp_rate < 0.0 {
                return Err(Error::Config("detector.fp_rate: must be >= 0".into()));
            }
            let truth = ctx.truth("detector", &spec.name)?;
            let n_full = match spec.usize_opt("detector", "n_full")? {
                Some(n) => n,
                None => match &ctx.train_ids {
                    Some(ids) => truth.instance_count_in(ids),
                    None => truth.instance_count(Some(Split::Train)),
                },
            };
            Ok(Arc::new(OracleDetector::new(truth, sigma0, fp_rate, n_full)) as Arc<dyn Detector>)
        });
        r
    }

    pub fn register_segmenter<F>(&mut self, name: &str, f: F)
    where
        F: Fn(&AdapterSpec, &AdapterContext) -> Result<Arc<dyn Segmenter>> + Send + Sync + 'static,
    {
        self.segmenters.insert(name.to_string(), Box::new(f));
    }

    pub fn register_detector<F>(&mut self, name: &str, f: F)
    where
        F: Fn(&AdapterSpec, &AdapterContext) -> Result<Arc<dyn Detector>> + Send + Sync + 'static,
    {
        self.detectors.insert(name.to_string(), Box::new(f));
    }

    pub fn segmenter_names(&self) -> Vec<&str> {
        self.segmenters.keys().map(String::as_str).collect()
    }

    pub fn detector_names(&self) -> Vec<&str> {
        self.detectors.keys().map(String::as_str).collect()
    }

    pub fn build_segmenter(&self, spec: &AdapterSpec, ctx: &AdapterContext) -> Result<Arc<dyn Segmenter>> {
        let f = self.segmenters.get(&spec.name).ok_or_else(|| {
            Error::Config(format!(
                "segmenter.name: unknown adapter {:?} (registered: {})",
                spec.name,
                self.segmenter_names().join(", ")
            ))
        })?;
        f(spec, ctx)
    }

    pub fn build_detector(&self, spec: &AdapterSpec, ctx: &AdapterContext) -> Result<Arc<dyn Detector>> {
        let f = self.detectors.get(&spec.name).ok_or_else(|| {
            Error::Config(format!(
                "detector.name: unknown adapter {:?} (registered: {})",
                spec.name,
                self.detector_names().join(", ")
            ))
        })?;
        f(spec, ctx)
    }
}
