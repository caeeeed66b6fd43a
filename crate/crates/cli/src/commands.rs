use std::path::{Path, PathBuf};
use std::sync::Arc;

use loopseg_core::io::{write_json, write_labels, DatasetManifest, InstanceFile};
use loopseg_core::metrics::{evaluate, Detection, EvalKind, IouRange};
use loopseg_core::oracle::{OracleSegmenter, Registry, SyntheticConfig, SyntheticDataset};
use loopseg_core::pipeline::{
    benchmark_prompts, fine_fraction_experiment, CheckpointDir, Convergence, Pipeline, PipelineConfig, PromptStrategy,
};
use loopseg_core::{Error, ImageStatus, IterationState, MaskInstance, Split};
use loopseg_model::{audit, build_network, NetworkConfig};
use serde::Serialize;
use serde_json::json;

use crate::{Cli, Command};

/// Failure reported as one JSON line on standard error.
#[derive(Debug)]
pub struct CliError {
    pub kind: String,
    pub message: String,
}

impl CliError {
    fn new(kind: &str, message: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            message: message.into(),
        }
    }

    pub fn line(&self) -> String {
        json!({ "error": { "kind": self.kind, "message": self.message } }).to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self::new(e.kind(), e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new("io", e.to_string())
    }
}

type Res<T> = std::result::Result<T, CliError>;

pub fn run(cli: &Cli) -> Res<()> {
    match &cli.command {
        Command::GenerateSynthetic(a) => generate_synthetic(cli, a),
        Command::SeedAnnotate(a) => seed_annotate(cli, a),
        Command::Iterate(a) => iterate(cli, a),
        Command::BenchmarkPrompts(a) => bench(cli, a),
        Command::FineFractions(a) => fractions(cli, a),
        Command::Evaluate(a) => evaluate_cmd(cli, a),
        Command::AuditModel(a) => audit_model(cli, a),
        Command::Serve(a) => serve(cli, a),
        Command::Export(a) => export(cli, a),
    }
}

/// JSON to `--out` when given, otherwise `text` (or the JSON) to stdout.
fn emit<T: Serialize>(cli: &Cli, value: &T, text: Option<String>) -> Res<()> {
    match &cli.out {
        Some(p) => {
            write_json(p, value)?;
            tracing::info!(path = %p.display(), "result written");
            if let Some(t) = text {
                print!("{t}");
            }
        }
        None => match text {
            Some(t) => print!("{t}"),
            None => println!("{}", serde_json::to_string_pretty(value).map_err(Error::from)?),
        },
    }
    Ok(())
}

fn generate_synthetic(cli: &Cli, a: &crate::GenerateArgs) -> Res<()> {
    let mut cfg = match &a.config {
        Some(p) => serde_yaml_load(p)?,
        None => SyntheticConfig::default(),
    };
    if let Some(n) = a.images {
        cfg.n_images = n;
    }
    if let Some(w) = a.width {
        cfg.width = w;
    }
    if let Some(h) = a.height {
        cfg.height = h;
    }
    if let Some(c) = a.classes {
        cfg.n_classes = c;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let ds = loopseg_core::oracle::synthetic::generate(&cfg)?;
    ds.write(&a.dir, !a.no_images, cfg.seed)?;
    let n_inst = ds.truth.instance_count(None);
    tracing::info!(images = cfg.n_images, instances = n_inst, dir = %a.dir.display(), "dataset written");
    emit(
        cli,
        &json!({ "dir": a.dir, "images": cfg.n_images, "instances": n_inst, "config": cfg }),
        None,
    )
}

fn serde_yaml_load(p: &Path) -> Res<SyntheticConfig> {
    let text = std::fs::read_to_string(p)?;
    let cfg: SyntheticConfig =
        serde_yaml::from_str(&text).map_err(|e| CliError::new("config", format!("{}: {e}", p.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_dataset(dir: &Path) -> Res<SyntheticDataset> {
    Ok(SyntheticDataset::load(dir)?)
}

fn pipeline_config(cli: &Cli, path: Option<&Path>) -> Res<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn build_pipeline(cli: &Cli, cfg: &PipelineConfig, data: &Path) -> Res<Pipeline> {
    let ds = load_dataset(data)?;
    let mut run_cfg = cfg.clone();
    if cli.workers.is_some() {
        run_cfg.workers = cli.workers;
    }
    Ok(Pipeline::from_dataset(run_cfg, &ds.manifest, Arc::new(ds.truth), &Registry::builtin())?)
}

fn data_arg(p: &crate::PipelineArgs) -> Res<&Path> {
    p.data
        .as_deref()
        .ok_or_else(|| CliError::new("config", "--data is required to start a new run"))
}

fn seed_into(cli: &Cli, p: &crate::PipelineArgs) -> Res<(Pipeline, IterationState, PipelineConfig, String)> {
    let data = data_arg(p)?;
    let cfg = pipeline_config(cli, p.config.as_deref())?;
    let pipeline = build_pipeline(cli, &cfg, data)?;
    let s0 = pipeline.seed_state()?;
    let ck = CheckpointDir::new(&p.checkpoints);
    let label = data.to_string_lossy().into_owned();
    ck.save(&s0, &cfg, Some(&label), None)?;
    tracing::info!(seeded = s0.per_image.values().filter(|s| s.status == ImageStatus::Seed).count(), "iteration 0 saved");
    Ok((pipeline, s0, cfg, label))
}

fn seed_annotate(cli: &Cli, a: &crate::SeedArgs) -> Res<()> {
    let ck = CheckpointDir::new(&a.pipeline.checkpoints);
    if ck.exists() {
        if !a.force {
            return Err(CliError::new(
                "conflict",
                format!("{} already holds a run; pass --force to replace it", ck.root().display()),
            ));
        }
        std::fs::remove_dir_all(ck.root())?;
    }
    let (_, s0, _, _) = seed_into(cli, &a.pipeline)?;
    emit(cli, &json!({ "iteration": 0, "summary": s0.summarize() }), None)
}

/// Resume the checkpoint directory, or seed it first when it is empty.
fn open_run(cli: &Cli, p: &crate::PipelineArgs) -> Res<(Pipeline, IterationState, PipelineConfig, String)> {
    let ck = CheckpointDir::new(&p.checkpoints);
    if !ck.exists() {
        return seed_into(cli, p);
    }
    let (m, state) = ck.latest()?;
    if let Some(s) = cli.seed {
        if s != m.config.seed {
            return Err(CliError::new(
                "conflict",
                format!("run was started with seed {}, not {s}", m.config.seed),
            ));
        }
    }
    if let Some(path) = &p.config {
        let mut given = PipelineConfig::load(path)?;
        given.seed = m.config.seed;
        given.workers = m.config.workers;
        if given != m.config {
            return Err(CliError::new("conflict", "config differs from the one the run was started with"));
        }
    }
    let data = match (&p.data, &m.dataset) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => PathBuf::from(d),
        (None, None) => return Err(CliError::new("config", "checkpoint records no dataset; pass --data")),
    };
    let label = m.dataset.clone().unwrap_or_else(|| data.to_string_lossy().into_owned());
    let pipeline = build_pipeline(cli, &m.config, &data)?;
    tracing::info!(iteration = state.iteration, "resumed");
    Ok((pipeline, state, m.config, label))
}

fn iterate(cli: &Cli, a: &crate::IterateArgs) -> Res<()> {
    let (pipeline, state, cfg, label) = open_run(cli, &a.pipeline)?;
    let ck = CheckpointDir::new(&a.pipeline.checkpoints);
    let max_steps = if a.until_converged { a.max_steps } else { Some(a.max_steps.unwrap_or(1)) };
    let (last, outcome) = pipeline.run_until_converged(state, max_steps, |s| {
        let sum = s.summarize();
        tracing::info!(
            iteration = s.iteration,
            converged = sum.converged,
            images = sum.images,
            mean_delta = sum.mean_delta,
            "iteration done"
        );
        ck.save(s, &cfg, Some(&label), None)
    })?;
    if outcome != Convergence::Continue {
        ck.set_outcome(outcome)?;
    }
    emit(
        cli,
        &json!({ "iteration": last.iteration, "outcome": outcome, "summary": last.summarize() }),
        None,
    )
}

fn parse_split(s: &str) -> Res<Split> {
    serde_json::from_value(json!(s)).map_err(|_| CliError::new("config", format!("split: unknown value {s:?}")))
}

fn bench(cli: &Cli, a: &crate::BenchArgs) -> Res<()> {
    let ds = load_dataset(&a.data)?;
    let strategies = a
        .strategies
        .iter()
        .map(|s| s.parse::<PromptStrategy>())
        .collect::<loopseg_core::Result<Vec<_>>>()?;
    let ids: Vec<String> = match &a.split {
        Some(s) => ds.manifest.ids_in(parse_split(s)?),
        None => ds.manifest.images.iter().map(|i| i.id.clone()).collect(),
    };
    let truth = Arc::new(ds.truth);
    if !(0.0..=1.0).contains(&a.leak) || a.noise_radius < 0.0 {
        return Err(CliError::new("config", "leak must be in [0, 1] and noise_radius >= 0"));
    }
    let seed = cli.seed.unwrap_or(0);
    let seg = OracleSegmenter::new(truth.clone(), a.noise_radius, seed).with_leak(a.leak);
    let report = benchmark_prompts(&truth, &ids, &seg, &strategies, seed)?;
    emit(cli, &report, Some(report.table()))
}

fn fractions(cli: &Cli, a: &crate::FractionArgs) -> Res<()> {
    let ds = load_dataset(&a.data)?;
    let mut cfg = pipeline_config(cli, a.config.as_deref())?;
    if !a.fractions.is_empty() {
        cfg.fractions = a.fractions.clone();
    }
    if !a.seeds.is_empty() {
        cfg.experiment_seeds = a.seeds.clone();
    }
    if cli.workers.is_some() {
        cfg.workers = cli.workers;
    }
    let report = fine_fraction_experiment(&ds.manifest, Arc::new(ds.truth), &Registry::builtin(), &cfg)?;
    emit(cli, &report, Some(report.table()))
}

/// Predictions without a confidence score 1.
fn detections(
    items: impl IntoIterator<Item = MaskInstance>,
    manifest: &DatasetManifest,
    kind: EvalKind,
) -> Res<Vec<Detection>> {
    let mut out = Vec::new();
    for inst in items {
        let img = manifest.image(&inst.image_id)?;
        let conf = inst.confidence.unwrap_or(1.0);
        let d = Detection::from_instance(&inst.with_confidence(conf), img)?;
        out.push(match kind {
            EvalKind::Mask => d,
            EvalKind::Box => {
                let loopseg_core::metrics::Region::Mask(m) = &d.region else { unreachable!() };
                let b = loopseg_core::geometry::minimum_bounding_box(m)?.with_confidence(conf);
                Detection::from_box(d.image_id.clone(), d.class_id, b)
            }
        });
    }
    Ok(out)
}

fn evaluate_cmd(cli: &Cli, a: &crate::EvaluateArgs) -> Res<()> {
    let ds = load_dataset(&a.data)?;
    let kind: EvalKind = serde_json::from_value(json!(a.kind))
        .map_err(|_| CliError::new("config", format!("kind: expected mask or box, got {:?}", a.kind)))?;
    let (preds, scope): (Vec<MaskInstance>, Option<Vec<String>>) = match (&a.predictions, &a.checkpoints) {
        (Some(p), _) => (InstanceFile::load(p)?.images.into_values().flatten().collect(), None),
        (None, Some(c)) => {
            let (_, s) = CheckpointDir::new(c).latest()?;
            (state_instances(&s), Some(s.per_image.keys().cloned().collect()))
        }
        (None, None) => return Err(CliError::new("config", "pass --predictions or --checkpoints")),
    };
    // a checkpoint is scored on the images it annotates
    let gts: Vec<MaskInstance> = ds
        .truth
        .to_instance_file()
        .images
        .into_iter()
        .filter(|(id, _)| scope.as_ref().is_none_or(|ids| ids.contains(id)))
        .flat_map(|(_, v)| v)
        .collect();
    let p = detections(preds, &ds.manifest, kind)?;
    let g = detections(gts, &ds.manifest, kind)?;
    let report = evaluate(&p, &g, kind, IouRange::COCO, &ds.manifest.class_names)?;
    emit(cli, &report, None)
}

/// Masks of the state with the confidence of their box.
fn state_instances(s: &IterationState) -> Vec<MaskInstance> {
    s.per_image
        .values()
        .flat_map(|st| {
            st.boxes.iter().zip(&st.masks).map(|(b, m)| {
                let mut m = m.clone();
                m.confidence = b.confidence.or(m.confidence);
                m
            })
        })
        .collect()
}

fn audit_model(cli: &Cli, a: &crate::AuditArgs) -> Res<()> {
    let mut cfg = match a.config.as_str() {
        "reference" => NetworkConfig::reference(),
        "tiny" => NetworkConfig::tiny(),
        path => NetworkConfig::load(Path::new(path))?,
    };
    if let Some(hw) = &a.input {
        let bad = || CliError::new("config", format!("input: expected HxW, got {hw:?}"));
        let (h, w) = hw.split_once('x').ok_or_else(bad)?;
        cfg = cfg.with_input(h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?);
    }
    let net = build_network(&cfg, cli.seed.unwrap_or(0))?;
    let report = audit(&net);
    emit(cli, &report, Some(report.table()))?;
    let fails = report.hard_failures();
    if !fails.is_empty() {
        let rows: Vec<String> = fails
            .iter()
            .map(|r| format!("layer {} built {} expected {:?}", r.index, r.params, r.expected_params))
            .collect();
        return Err(CliError::new("audit", rows.join("; ")));
    }
    Ok(())
}

fn serve(_cli: &Cli, a: &crate::ServeArgs) -> Res<()> {
    let svc = loopseg_service::Service::open(&a.checkpoints, a.data.as_deref(), &Registry::builtin())?;
    let addr: std::net::SocketAddr = a
        .addr
        .parse()
        .map_err(|_| CliError::new("config", format!("addr: cannot parse {:?}", a.addr)))?;
    let app = loopseg_service::router(Arc::new(svc), a.ui.as_deref());
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(loopseg_service::serve(addr, app))?;
    Ok(())
}

fn export(cli: &Cli, a: &crate::ExportArgs) -> Res<()> {
    let ck = CheckpointDir::new(&a.checkpoints);
    let (m, state) = ck.latest()?;
    let data = match (&a.data, &m.dataset) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => PathBuf::from(d),
        (None, None) => return Err(CliError::new("config", "checkpoint records no dataset; pass --data")),
    };
    let ds = load_dataset(&data)?;
    let mut manifest = ds.manifest.clone();
    let mut instances = InstanceFile::default();
    std::fs::create_dir_all(a.dest.join("labels"))?;
    let mut written = 0usize;
    for (id, st) in &state.per_image {
        if st.masks.is_empty() {
            continue;
        }
        let img = manifest.image(id)?.clone();
        write_labels(&a.dest.join("labels").join(format!("{id}.txt")), &st.masks, &img)?;
        instances.images.insert(id.clone(), st.masks.clone());
        let source = match (st.status, st.human_verified) {
            (ImageStatus::Seed, _) => "seed",
            (_, true) => "review",
            _ => "pipeline",
        };
        manifest.provenance.insert(
            id.clone(),
            loopseg_core::io::manifest::Provenance {
                iteration: state.iteration,
                source: source.into(),
            },
        );
        written += 1;
    }
    manifest.save(&a.dest.join("manifest.json"))?;
    instances.save(&a.dest.join("instances.json"))?;
    emit(
        cli,
        &json!({ "dest": a.dest, "iteration": state.iteration, "images": written }),
        None,
    )
}
