use std::path::Path;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use loopseg_core::io::rle;
use loopseg_core::oracle::synthetic::{generate, SyntheticConfig, SyntheticDataset};
use loopseg_core::oracle::{
    Detector, DetectorModel, LabeledBox, OracleDetector, OracleSegmenter, Registry, TrainingExample,
};
use loopseg_core::pipeline::{CheckpointDir, CorrectionPayload, Pipeline, PipelineConfig, PromptPoint, ReviewStatus, ReviewTask};
use loopseg_core::{BBox, ImageRecord, ImageStatus, IterationState};
use loopseg_service::{router, CorrectionResult, IterateResult, PredictionsView, Progress, Service, StateView, Store};
use serde_json::{json, Value};
use tower::ServiceExt;

fn dataset(n: usize) -> SyntheticDataset {
    generate(&SyntheticConfig {
        n_images: n,
        width: 96,
        height: 96,
        train_fraction: 1.0,
        seed: 3,
        ..Default::default()
    })
    .unwrap()
}

fn pipeline_with(ds: &SyntheticDataset, cfg: PipelineConfig, detector: Arc<dyn Detector>) -> Pipeline {
    let truth = Arc::new(ds.truth.clone());
    Pipeline::new(
        cfg,
        ds.manifest.images.clone(),
        Arc::new(OracleSegmenter::new(truth.clone(), 0.0, 0)),
        detector,
        Some(truth),
    )
    .unwrap()
}

fn oracle(ds: &SyntheticDataset, fp_rate: f64) -> Arc<dyn Detector> {
    let truth = Arc::new(ds.truth.clone());
    let n = truth.instance_count(None);
    Arc::new(OracleDetector::new(truth, 4.0, fp_rate, n))
}

/// A service plus an identical pipeline for direct calls.
fn setup(n: usize, cfg: PipelineConfig) -> (Arc<Service>, Pipeline, IterationState) {
    let ds = dataset(n);
    let direct = pipeline_with(&ds, cfg.clone(), oracle(&ds, 0.1));
    let s0 = direct.seed_state().unwrap();
    let svc = Service::new(pipeline_with(&ds, cfg, oracle(&ds, 0.1)), s0.clone(), None, None);
    (Arc::new(svc), direct, s0)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

fn unlabeled(s: &IterationState) -> String {
    s.per_image.iter().find(|(_, x)| x.boxes.is_empty()).map(|(id, _)| id.clone()).unwrap()
}

fn labeled(s: &IterationState) -> String {
    s.per_image.iter().find(|(_, x)| !x.boxes.is_empty()).map(|(id, _)| id.clone()).unwrap()
}

#[tokio::test]
async fn state_mirrors_direct_summary() {
    let (svc, direct, s0) = setup(10, PipelineConfig::default());
    let app = router(svc, None);
    let (st, body) = call_json(&app, "GET", "/api/state", None).await;
    assert_eq!(st, StatusCode::OK);
    let view: StateView = serde_json::from_value(body).unwrap();
    assert_eq!(view.iteration, 0);
    assert_eq!(view.summary, s0.summarize());
    assert_eq!(view.convergence, direct.check(&s0));
}

#[tokio::test]
async fn correction_matches_direct_call_byte_for_byte() {
    let (svc, direct, s0) = setup(12, PipelineConfig::default());
    let app = router(svc.clone(), None);
    let id = labeled(&s0);
    let n = s0.per_image[&id].boxes.len();
    let b = s0.per_image[&id].boxes[0];
    let moved = BBox::new(b.x_min + 1.0, b.y_min, b.x_max + 1.0, b.y_max.min(95.0));
    let payload = CorrectionPayload {
        image_id: id.clone(),
        iteration: Some(0),
        adjusted_boxes: [(0, moved)].into(),
        deleted_ids: if n > 1 { vec![n - 1] } else { vec![] },
        ..Default::default()
    };
    let body = serde_json::to_string(&payload).unwrap();
    let (st, res) = call_json(&app, "POST", &format!("/api/images/{id}/corrections"), Some(&body)).await;
    assert_eq!(st, StatusCode::OK, "{res}");
    let res: CorrectionResult = serde_json::from_value(res).unwrap();
    assert!(res.tasks.iter().all(|t| t.status == ReviewStatus::Corrected));
    assert!(!res.tasks.is_empty());
    assert!(res.image.predictions[0].bbox.same_corners(&moved));

    let expect = direct.apply_corrections(&s0, &[payload]).unwrap();
    let got = svc.snapshot();
    assert_eq!(*got, expect);
    assert_eq!(serde_json::to_vec(&*got).unwrap(), serde_json::to_vec(&expect).unwrap());
}

#[tokio::test]
async fn full_loop_matches_direct_calls() {
    let (svc, direct, s0) = setup(16, PipelineConfig::default());
    let app = router(svc.clone(), None);
    let id = unlabeled(&s0);
    let truth = direct.truth.as_ref().unwrap();
    let inst = &truth.images[&id].instances[0];
    let (cx, cy) = inst.mask.foreground().next().map(|(x, y)| (x as f64 + 0.5, y as f64 + 0.5)).unwrap();
    let payload = CorrectionPayload {
        image_id: id.clone(),
        added_points: vec![PromptPoint { x: cx, y: cy, positive: true }],
        ..Default::default()
    };
    // the path supplies the image id when the body omits it
    let mut body = serde_json::to_value(&payload).unwrap();
    body.as_object_mut().unwrap().remove("image_id");
    let (st, _) = call(&app, "POST", &format!("/api/images/{id}/corrections"), Some(&body.to_string())).await;
    assert_eq!(st, StatusCode::OK);

    let (st, res) = call_json(&app, "POST", "/api/iterate", None).await;
    assert_eq!(st, StatusCode::OK, "{res}");
    let res: IterateResult = serde_json::from_value(res).unwrap();
    assert_eq!(res.iteration, 1);

    let corrected = direct.apply_corrections(&s0, &[payload]).unwrap();
    let expect = direct.run_iteration(&corrected).unwrap();
    assert_eq!(serde_json::to_vec(&*svc.snapshot()).unwrap(), serde_json::to_vec(&expect).unwrap());
    assert_eq!(res.summary, expect.summarize());

    let (_, state) = call_json(&app, "GET", "/api/state", None).await;
    assert_eq!(state["iteration"], 1);
    let (_, pred) = call_json(&app, "GET", &format!("/api/images/{id}/predictions"), None).await;
    let pred: PredictionsView = serde_json::from_value(pred).unwrap();
    assert!(pred.predictions.iter().any(|p| p.bbox.same_corners(&inst.bbox)));
    let (_, tasks) = call_json(&app, "GET", "/api/review?status=accepted", None).await;
    let tasks: Vec<ReviewTask> = serde_json::from_value(tasks).unwrap();
    assert!(tasks.iter().any(|t| t.image_id == id));
}

#[tokio::test]
async fn predictions_carry_rle_that_decodes_to_state_masks() {
    let (svc, direct, s0) = setup(8, PipelineConfig::default());
    let app = router(svc, None);
    let id = labeled(&s0);
    let (st, body) = call_json(&app, "GET", &format!("/api/images/{id}/predictions"), None).await;
    assert_eq!(st, StatusCode::OK);
    assert!(body["predictions"][0]["mask"]["rle"]["counts"].is_array());
    let view: PredictionsView = serde_json::from_value(body).unwrap();
    let img = &direct.images[&id];
    let st = &s0.per_image[&id];
    assert_eq!(view.predictions.len(), st.boxes.len());
    for (p, m) in view.predictions.iter().zip(&st.masks) {
        assert_eq!(rle::decode(&p.mask.rle).unwrap(), m.decode_for(img).unwrap());
    }
}

#[tokio::test]
async fn converged_image_reports_delta_below_epsilon() {
    let cfg = PipelineConfig {
        seed_fraction: 1.0,
        ..Default::default()
    };
    let (svc, _, _) = setup(6, cfg);
    let app = router(svc.clone(), None);
    let (st, _) = call(&app, "POST", "/api/iterate", Some("{}")).await;
    assert_eq!(st, StatusCode::OK);
    let id = svc.snapshot().per_image.keys().next().unwrap().clone();
    let (_, v) = call_json(&app, "GET", &format!("/api/images/{id}/predictions"), None).await;
    let v: PredictionsView = serde_json::from_value(v).unwrap();
    assert_eq!(v.status, ImageStatus::Converged);
    assert!(v.delta < v.epsilon);
    assert!(v.below_epsilon);
    let (_, state) = call_json(&app, "GET", "/api/state", None).await;
    assert_eq!(state["convergence"], "converged");
}

#[tokio::test]
async fn unknown_ids_are_404() {
    let (svc, _, _) = setup(10, PipelineConfig::default());
    let app = router(svc, None);
    for (m, uri, body) in [
        ("GET", "/api/images/nope/predictions", None),
        ("GET", "/api/images/nope", None),
        ("POST", "/api/images/nope/corrections", Some(r#"{"deleted_ids":[0]}"#)),
        ("GET", "/api/nothing", None),
    ] {
        let (st, v) = call_json(&app, m, uri, body).await;
        assert_eq!(st, StatusCode::NOT_FOUND, "{m} {uri}");
        assert_eq!(v["error"]["kind"], "lookup");
    }
}

#[tokio::test]
async fn malformed_payloads_are_422_with_fields() {
    let (svc, _, s0) = setup(6, PipelineConfig::default());
    let app = router(svc.clone(), None);
    let id = labeled(&s0);
    let url = format!("/api/images/{id}/corrections");
    let cases: [(&str, &str); 5] = [
        ("{not json", "body"),
        (r#"{"deleted_ids":[0],"colour":"red"}"#, "body"),
        (r#"{"deleted_ids":[99]}"#, "deleted_ids[0]"),
        (r#"{"added_boxes":[{"x_min":0,"y_min":0,"x_max":500,"y_max":4}]}"#, "added_boxes[0]"),
        ("{}", "payload"),
    ];
    for (body, field) in cases {
        let (st, v) = call_json(&app, "POST", &url, Some(body)).await;
        assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
        let fields = v["error"]["fields"].as_array().unwrap();
        assert!(fields.iter().any(|f| f["field"].as_str().unwrap().starts_with(field)), "{body}: {v}");
    }
    let other = s0.per_image.keys().find(|k| **k != id).unwrap();
    let body = json!({"image_id": other, "deleted_ids": [0]}).to_string();
    let (st, v) = call_json(&app, "POST", &url, Some(&body)).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["fields"][0]["field"], "image_id");

    let (st, v) = call_json(&app, "GET", "/api/review?status=maybe", None).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"]["fields"][0]["field"], "status");
    let (st, _) = call(&app, "POST", "/api/iterate", Some(r#"{"later":true}"#)).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(*svc.snapshot(), s0);
}

#[tokio::test]
async fn stale_iteration_is_409() {
    let (svc, _, s0) = setup(6, PipelineConfig::default());
    let app = router(svc.clone(), None);
    let id = labeled(&s0);
    let body = json!({"iteration": 4, "deleted_ids": [0]}).to_string();
    let (st, v) = call_json(&app, "POST", &format!("/api/images/{id}/corrections"), Some(&body)).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(v["error"]["kind"], "conflict");
    assert_eq!(*svc.snapshot(), s0);
}

/// Oracle detector whose `fit` waits for the test to release it.
struct Gated {
    inner: Arc<dyn Detector>,
    gate: Mutex<Receiver<()>>,
}

impl Detector for Gated {
    fn name(&self) -> &str {
        "gated"
    }

    fn fit(&self, examples: &[TrainingExample], seed: u64) -> loopseg_core::Result<DetectorModel> {
        self.gate.lock().unwrap().recv().ok();
        self.inner.fit(examples, seed)
    }

    fn predict(&self, model: &DetectorModel, image: &ImageRecord) -> loopseg_core::Result<Vec<LabeledBox>> {
        self.inner.predict(model, image)
    }
}

fn gated(n: usize) -> (Arc<Service>, IterationState, Sender<()>) {
    let ds = dataset(n);
    let (tx, rx) = channel();
    let det = Arc::new(Gated {
        inner: oracle(&ds, 0.1),
        gate: Mutex::new(rx),
    });
    let p = pipeline_with(&ds, PipelineConfig::default(), det);
    let s0 = p.seed_state().unwrap();
    (Arc::new(Service::new(p, s0.clone(), None, None)), s0, tx)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn writes_during_an_iteration_are_409_and_reads_see_the_old_snapshot() {
    let (svc, s0, release) = gated(8);
    let app = router(svc.clone(), None);
    let (st, v) = call_json(&app, "POST", "/api/iterate", Some(r#"{"background":true}"#)).await;
    assert_eq!(st, StatusCode::ACCEPTED);
    let p: Progress = serde_json::from_value(v).unwrap();
    assert!(p.running);
    assert_eq!(p.target_iteration, Some(1));

    let (st, _) = call(&app, "POST", "/api/iterate", None).await;
    assert_eq!(st, StatusCode::CONFLICT);
    let id = labeled(&s0);
    let (st, v) = call_json(&app, "POST", &format!("/api/images/{id}/corrections"), Some(r#"{"deleted_ids":[0]}"#)).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(v["error"]["kind"], "busy");
    let (_, state) = call_json(&app, "GET", "/api/state", None).await;
    assert_eq!(state["iteration"], 0);
    assert_eq!(*svc.snapshot(), s0);

    release.send(()).unwrap();
    let mut done = svc.progress();
    for _ in 0..500 {
        if !done.running {
            break;
        }
        tokio::time::sleep(std::time::Duration::from_millis(10)).await;
        done = svc.progress();
    }
    assert!(!done.running);
    assert_eq!(done.iteration, 1);
    assert_eq!(done.completed_runs, 1);
    assert_eq!(done.last_error, None);
    let (_, state) = call_json(&app, "GET", "/api/state", None).await;
    assert_eq!(state["iteration"], 1);
}

fn write_dataset(dir: &Path, n: usize) -> SyntheticDataset {
    let ds = dataset(n);
    ds.write(dir, true, 0).unwrap();
    ds
}

#[tokio::test]
async fn image_bytes_and_checkpoints_come_from_disk() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let ckpt = tmp.path().join("ckpt");
    let ds = write_dataset(&data, 6);
    let p = pipeline_with(&ds, PipelineConfig::default(), oracle(&ds, 0.1));
    let s0 = p.seed_state().unwrap();
    let dir = CheckpointDir::new(&ckpt);
    dir.save(&s0, &p.config, Some(data.to_str().unwrap()), None).unwrap();

    let svc = Arc::new(Service::open(&ckpt, None, &Registry::builtin()).unwrap());
    assert_eq!(*svc.snapshot(), s0);
    let app = router(svc.clone(), None);
    let id = &ds.manifest.images[0].id;
    let (st, bytes) = call(&app, "GET", &format!("/api/images/{id}"), None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(bytes, std::fs::read(data.join(&ds.manifest.images[0].uri)).unwrap());

    let (st, _) = call(&app, "POST", "/api/iterate", None).await;
    assert_eq!(st, StatusCode::OK);
    let (m, latest) = dir.latest().unwrap();
    assert_eq!(m.latest, 1);
    assert_eq!(latest, *svc.snapshot());

    let resumed = Service::open(&ckpt, Some(&data), &Registry::builtin()).unwrap();
    assert_eq!(*resumed.snapshot(), latest);
}

#[tokio::test]
async fn store_keeps_corrections() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = dataset(6);
    let p = pipeline_with(&ds, PipelineConfig::default(), oracle(&ds, 0.1));
    let s0 = p.seed_state().unwrap();
    let store = Store {
        dir: CheckpointDir::new(tmp.path()),
        dataset: None,
    };
    let svc = Arc::new(Service::new(p, s0.clone(), Some(store), None));
    let app = router(svc.clone(), None);
    let id = labeled(&s0);
    let (st, _) = call(&app, "POST", &format!("/api/images/{id}/corrections"), Some(r#"{"deleted_ids":[0]}"#)).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(CheckpointDir::new(tmp.path()).load_state(0).unwrap(), *svc.snapshot());
}

#[tokio::test]
async fn static_bundle_is_served_beside_the_api() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("index.html"), "<!doctype html><title>review</title>").unwrap();
    std::fs::write(tmp.path().join("app.js"), "console.log(1)").unwrap();
    let (svc, _, _) = setup(10, PipelineConfig::default());
    let app = router(svc, Some(tmp.path()));
    let (st, body) = call(&app, "GET", "/", None).await;
    assert_eq!(st, StatusCode::OK);
    assert!(String::from_utf8(body).unwrap().contains("review"));
    let (st, _) = call(&app, "GET", "/app.js", None).await;
    assert_eq!(st, StatusCode::OK);
    let (st, _) = call(&app, "GET", "/api/state", None).await;
    assert_eq!(st, StatusCode::OK);
}

#[tokio::test]
async fn review_filters_by_status_and_kind() {
    let (svc, _, s0) = setup(10, PipelineConfig::default());
    let app = router(svc.clone(), None);
    let id = labeled(&s0);
    call(&app, "POST", &format!("/api/images/{id}/corrections"), Some(r#"{"deleted_ids":[0]}"#)).await;
    let (_, all) = call_json(&app, "GET", "/api/review", None).await;
    let (_, corrected) = call_json(&app, "GET", "/api/review?status=corrected&kind=false_positive", None).await;
    let (_, pending) = call_json(&app, "GET", "/api/review?status=pending", None).await;
    let n = |v: &Value| v.as_array().unwrap().len();
    assert_eq!(n(&all), svc.snapshot().review_queue.len());
    assert_eq!(n(&corrected), 1);
    assert_eq!(n(&pending), svc.snapshot().summarize().pending_review);
    let (st, _) = call(&app, "GET", "/api/review?kind=odd", None).await;
    assert_eq!(st, StatusCode::UNPROCESSABLE_ENTITY);
}
