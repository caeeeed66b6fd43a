//! A configured pipeline: dataset, adapters and worker pool bundled together.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::config::PipelineConfig;
use super::iterate::{check_convergence, run_iteration, seed_annotate, select_seed_images, Convergence};
use super::prompts::truth_prompts;
use super::review::{apply_corrections, CorrectionPayload};
use crate::error::{Error, Result};
use crate::io::DatasetManifest;
use crate::oracle::{AdapterContext, Detector, GroundTruth, Registry, Segmenter};
use crate::types::{ImageRecord, IterationState, PromptSet};

pub struct Pipeline {
    pub config: PipelineConfig,
    /// Images under annotation, by id.
    pub images: BTreeMap<String, ImageRecord>,
    pub segmenter: Arc<dyn Segmenter>,
    pub detector: Arc<dyn Detector>,
    /// Source of seed prompts; absent for datasets without ground truth.
    pub truth: Option<Arc<GroundTruth>>,
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl Pipeline {
    pub fn new(
        config: PipelineConfig,
        images: Vec<ImageRecord>,
        segmenter: Arc<dyn Segmenter>,
        detector: Arc<dyn Detector>,
        truth: Option<Arc<GroundTruth>>,
    ) -> Result<Self> {
        config.validate()?;
        if images.is_empty() {
            return Err(Error::Domain("pipeline needs at least one image".into()));
        }
        let pool = match config.workers {
            Some(n) => Some(Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::Config(format!("workers: {e}")))?,
            )),
            None => None,
        };
        Ok(Self {
            images: images.into_iter().map(|i| (i.id.clone(), i)).collect(),
            config,
            segmenter,
            detector,
            truth,
            pool,
        })
    }

    /// Build adapters from the registry for the images of `config.split`.
    pub fn from_dataset(
        config: PipelineConfig,
        manifest: &DatasetManifest,
        truth: Arc<GroundTruth>,
        registry: &Registry,
    ) -> Result<Self> {
        let images: Vec<ImageRecord> = manifest
            .images
            .iter()
            .filter(|i| config.split.is_none_or(|s| i.split == s))
            .cloned()
            .collect();
        let ctx = AdapterContext {
            truth: Some(truth.clone()),
            seed: config.seed,
            train_ids: Some(images.iter().map(|i| i.id.clone()).collect()),
        };
        let segmenter = registry.build_segmenter(&config.segmenter, &ctx)?;
        let detector = registry.build_detector(&config.detector, &ctx)?;
        Self::new(config, images, segmenter, detector, Some(truth))
    }

    fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        match &self.pool {
            Some(p) => p.install(f),
            None => f(),
        }
    }

    /// Seed a `seed_fraction` subset from ground-truth prompts.
    pub fn seed_state(&self) -> Result<IterationState> {
        let truth = self
            .truth
            .as_ref()
            .ok_or_else(|| Error::Config("seeding from prompts needs ground truth".into()))?;
        let all: Vec<ImageRecord> = self.images.values().cloned().collect();
        let seeds = select_seed_images(&all, self.config.seed_fraction, self.config.seed)?;
        let mut prompts = BTreeMap::new();
        for s in &seeds {
            prompts.insert(
                s.id.clone(),
                truth_prompts(truth, &s.id, self.config.seed_prompts, self.config.seed)?,
            );
        }
        self.seed_with(&seeds, &prompts)
    }

    pub fn seed_with(&self, seeds: &[ImageRecord], prompts: &BTreeMap<String, Vec<PromptSet>>) -> Result<IterationState> {
        let all: Vec<ImageRecord> = self.images.values().cloned().collect();
        self.install(|| seed_annotate(&all, seeds, prompts, self.segmenter.as_ref(), &self.config))
    }

    pub fn run_iteration(&self, state: &IterationState) -> Result<IterationState> {
        self.install(|| {
            run_iteration(
                state,
                &self.images,
                self.detector.as_ref(),
                self.segmenter.as_ref(),
                &self.config,
            )
        })
    }

    pub fn apply_corrections(&self, state: &IterationState, payloads: &[CorrectionPayload]) -> Result<IterationState> {
        apply_corrections(state, &self.images, payloads, self.segmenter.as_ref(), &self.config)
    }

    pub fn check(&self, state: &IterationState) -> Convergence {
        check_convergence(state, &self.config)
    }

    /// Iterate until converged or stalled, or until `max_steps` iterations
    /// have run in this call. `on_step` sees every new state.
    pub fn run_until_converged(
        &self,
        mut state: IterationState,
        max_steps: Option<u32>,
        mut on_step: impl FnMut(&IterationState) -> Result<()>,
    ) -> Result<(IterationState, Convergence)> {
        let mut steps = 0;
        loop {
            let c = self.check(&state);
            if c != Convergence::Continue || max_steps.is_some_and(|m| steps >= m) {
                return Ok((state, c));
            }
            state = self.run_iteration(&state)?;
            steps += 1;
            on_step(&state)?;
        }
    }
}
