use std::net::SocketAddr;
use std::path::Path;
use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use partsmith_core::checkpoint;
use partsmith_core::denoiser::remote::{encode_tensor, PredictResponse, RetryPolicy};
use partsmith_core::denoiser::{Capabilities, DenoiserBackend, InferenceBackend, PatchAutoencoder, RemoteBackend, ToyConfig, ToyDenoiser};
use partsmith_core::discovery::{DictionaryMetadata, SubConceptDictionary};
use partsmith_core::feature_io::RgbImage;
use partsmith_core::kmeans::KMeansOptions;
use partsmith_core::manifest::checksums;
use partsmith_core::tensor::Tensor;
use partsmith_core::toy_task::{ToyTask, ToyTaskConfig};
use partsmith_core::training::{ModelSpec, TrainConfig, Trainer};
use partsmith_service::{router, AppState, Artifacts, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    ckpt: std::path::PathBuf,
    dict: std::path::PathBuf,
    task: ToyTask,
}

fn fixture() -> Fixture {
    let task = ToyTask::build(ToyTaskConfig::default()).unwrap();
    let cfg = TrainConfig {
        max_steps: Some(30),
        ..TrainConfig::toy()
    };
    let toy = ToyConfig::default();
    let spec = ModelSpec::new(toy, task.dictionary.channels(), task.dictionary.splits, &cfg);
    let trainer = Trainer::<f32>::new(spec, cfg, task.samples(toy.grid).unwrap()).unwrap();
    let mut state = trainer.init_state();
    trainer.run(&mut state, |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, dict) = (dir.path().join("ckpt"), dir.path().join("dict"));
    task.dictionary.save(&dict).unwrap();
    checkpoint::save(&ckpt, &trainer, &state, Some(&task.dictionary.checksum())).unwrap();
    Fixture {
        _dir: dir,
        ckpt,
        dict,
        task,
    }
}

fn config(steps: usize) -> ServiceConfig {
    ServiceConfig {
        sampler_steps: steps,
        ..ServiceConfig::default()
    }
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, axum::http::HeaderMap, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let res = app.clone().oneshot(req).await.unwrap();
    let (status, headers) = (res.status(), res.headers().clone());
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, headers, value)
}

fn code_json(code: &partsmith_core::discovery::PromptCode) -> Value {
    serde_json::to_value(code).unwrap()
}

async fn submit(app: &Router, code: Value, seed: u64) -> String {
    let (status, _, body) = call(app, Method::POST, "/v1/generate", Some(json!({"code": code, "seed": seed}))).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{body}");
    body["job_id"].as_str().unwrap().to_string()
}

async fn wait(app: &Router, id: &str) -> (StatusCode, axum::http::HeaderMap, Value) {
    for _ in 0..2000 {
        let r = call(app, Method::GET, &format!("/v1/jobs/{id}"), None).await;
        if matches!(r.2["status"].as_str(), Some("done" | "failed")) {
            return r;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("job {id} did not finish");
}

fn png_bytes(job: &Value) -> Vec<u8> {
    B64.decode(job["image_png"].as_str().unwrap()).unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn health_and_dictionary_describe_the_artifacts() {
    let f = fixture();
    let artifacts = Artifacts::load(&f.ckpt, &f.dict).unwrap();
    let app = router(AppState::local(artifacts, config(5)).unwrap());
    let (status, _, health) = call(&app, Method::GET, "/v1/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(health["status"], "ok");
    assert_eq!(health["backend"], "toy");
    assert_eq!(health["backend_ready"], true);
    assert_eq!(health["max_jobs"], 2);
    assert_eq!(health["dictionary_checksum"], f.task.dictionary.checksum());

    let (status, _, dict) = call(&app, Method::GET, "/v1/dictionary", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(dict["channels"], 3);
    assert_eq!(dict["split_counts"], json!([2, 2, 2]));
    assert_eq!(dict["channel_names"][0], "background");
}

#[tokio::test(flavor = "multi_thread")]
async fn full_scale_dictionary_lists_six_channels_of_256_splits() {
    let (parts, splits, dim) = (5, 256, 4);
    let dict = SubConceptDictionary {
        dim,
        parts,
        splits,
        fgbg_centroids: vec![0.5; 2 * dim],
        part_centroids: vec![0.5; parts * dim],
        split_centroids: (0..(parts + 1) * splits * dim).map(|i| (i % 7) as f32).collect(),
        metadata: DictionaryMetadata {
            dataset_name: "birds".into(),
            seed: 0,
            kmeans: KMeansOptions::default(),
            extractor: None,
        },
    };
    let spec = ModelSpec::new(ToyConfig::default(), parts + 1, splits, &TrainConfig::default());
    let model = spec.skeleton::<f32>().unwrap();
    let artifacts = Artifacts::from_parts(dict, model, "none".into(), PatchAutoencoder::new(2)).unwrap();
    let app = router(AppState::local(artifacts, config(5)).unwrap());
    let (_, _, view) = call(&app, Method::GET, "/v1/dictionary", None).await;
    assert_eq!(view["channels"], 6);
    assert_eq!(view["split_counts"], json!(vec![256; 6]));
}

#[tokio::test(flavor = "multi_thread")]
async fn compose_applies_replacements_and_rejects_bad_codes() {
    let f = fixture();
    let app = router(AppState::local(Artifacts::load(&f.ckpt, &f.dict).unwrap(), config(5)).unwrap());
    let base = code_json(&f.task.codes[0]);

    let (status, _, out) = call(&app, Method::POST, "/v1/compose", Some(json!({"base": base, "replacements": []}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(out["code"], base);
    assert_eq!(out["text"], f.task.codes[0].to_string());

    let other = f.task.codes[0].split(1).unwrap() % 2 + 1;
    let (status, _, out) = call(
        &app,
        Method::POST,
        "/v1/compose",
        Some(json!({"base": base, "replacements": [{"channel": 1, "split": other}, {"channel": 2, "split": null}]})),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let pairs = out["code"]["pairs"].as_array().unwrap();
    assert_eq!(pairs.len(), 2);
    assert_eq!(pairs[1], json!([1, other]));

    let bad = json!({"channels": 3, "pairs": [[0, 1], [1, 9], [7, 1], [0, 2]]});
    let (status, _, err) = call(&app, Method::POST, "/v1/compose", Some(json!({"base": bad}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let channels: Vec<i64> = err["diagnostics"]
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d["channel"].as_i64().unwrap())
        .collect();
    assert_eq!(channels, vec![1, 7, 0]);

    let (status, _, err) = call(
        &app,
        Method::POST,
        "/v1/compose",
        Some(json!({"base": base, "replacements": [{"channel": 5, "split": 1}]})),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["diagnostics"][0]["channel"], 5);

    let (status, _, _) = call(&app, Method::POST, "/v1/compose", Some(json!({"nonsense": true}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test(flavor = "multi_thread")]
async fn seeded_jobs_are_reproducible_and_expose_attention() {
    let f = fixture();
    let app = router(AppState::local(Artifacts::load(&f.ckpt, &f.dict).unwrap(), config(10)).unwrap());
    let code = code_json(&f.task.codes[2]);
    let a = submit(&app, code.clone(), 7).await;
    let b = submit(&app, code.clone(), 7).await;
    let c = submit(&app, code, 8).await;
    let (ja, jb, jc) = (wait(&app, &a).await.2, wait(&app, &b).await.2, wait(&app, &c).await.2);
    assert_eq!(ja["status"], "done");
    assert_eq!(png_bytes(&ja), png_bytes(&jb));
    assert_ne!(png_bytes(&ja), png_bytes(&jc));
    let img = RgbImage::from_png(&png_bytes(&ja)).unwrap();
    assert_eq!((img.width, img.height), (32, 32));

    let (status, _, att) = call(&app, Method::GET, &format!("/v1/attention/{a}"), None).await;
    assert_eq!(status, StatusCode::OK);
    let maps = att["heatmaps"].as_array().unwrap();
    assert_eq!(maps.len(), 3);
    for m in maps {
        let png = B64.decode(m["png"].as_str().unwrap()).unwrap();
        assert_eq!(&png[1..4], b"PNG");
        assert_eq!((m["width"].as_u64(), m["height"].as_u64()), (Some(16), Some(16)));
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn concurrent_jobs_are_bounded_and_independent_of_interleaving() {
    let f = fixture();
    let state = AppState::local(Artifacts::load(&f.ckpt, &f.dict).unwrap(), config(10)).unwrap();
    let app = router(state.clone());
    let code = code_json(&f.task.codes[1]);
    let mut ids = Vec::new();
    for seed in [1u64, 2, 3, 1, 2, 3] {
        ids.push((seed, submit(&app, code.clone(), seed).await));
    }
    let mut images = std::collections::HashMap::new();
    for (seed, id) in &ids {
        let job = wait(&app, id).await.2;
        let png = png_bytes(&job);
        assert_eq!(images.entry(*seed).or_insert_with(|| png.clone()), &png);
    }
    assert!(state.peak_running() <= 2, "peak {}", state.peak_running());
    // A job run alone gives the same image as under contention.
    let solo = submit(&app, code, 2).await;
    assert_eq!(png_bytes(&wait(&app, &solo).await.2), images[&2]);
}

#[tokio::test(flavor = "multi_thread")]
async fn bad_requests_get_diagnostics_and_unknown_jobs_404() {
    let f = fixture();
    let app = router(AppState::local(Artifacts::load(&f.ckpt, &f.dict).unwrap(), config(5)).unwrap());
    let (status, _, err) = call(
        &app,
        Method::POST,
        "/v1/generate",
        Some(json!({"code": {"channels": 3, "pairs": [[2, 0]]}, "seed": 1})),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["diagnostics"][0]["channel"], 2);
    let (status, _, _) = call(&app, Method::GET, "/v1/jobs/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _, _) = call(&app, Method::GET, "/v1/attention/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn artifacts_are_never_modified() {
    let f = fixture();
    let before = (checksums(&f.ckpt).unwrap(), checksums(&f.dict).unwrap());
    let app = router(AppState::local(Artifacts::load(&f.ckpt, &f.dict).unwrap(), config(5)).unwrap());
    let code = code_json(&f.task.codes[0]);
    call(&app, Method::GET, "/v1/dictionary", None).await;
    call(&app, Method::POST, "/v1/compose", Some(json!({"base": code}))).await;
    let id = submit(&app, code, 3).await;
    wait(&app, &id).await;
    call(&app, Method::GET, &format!("/v1/attention/{id}"), None).await;
    assert_eq!(before, (checksums(&f.ckpt).unwrap(), checksums(&f.dict).unwrap()));
    assert_eq!(dir_listing(&f.ckpt), vec!["adam_m.psfm", "adam_v.psfm", "checkpoint.json", "params.psfm"]);
}

fn dir_listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[tokio::test(flavor = "multi_thread")]
async fn cors_preflight_is_answered() {
    let f = fixture();
    let app = router(AppState::local(Artifacts::load(&f.ckpt, &f.dict).unwrap(), config(5)).unwrap());
    let req = Request::builder()
        .method(Method::OPTIONS)
        .uri("/v1/compose")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .body(Body::empty())
        .unwrap();
    let res = app.oneshot(req).await.unwrap();
    assert!(res.status().is_success());
    assert_eq!(res.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");

    let restricted = ServiceConfig {
        allowed_origins: vec!["http://mixer.local".into()],
        ..config(5)
    };
    let app = router(AppState::local(Artifacts::load(&f.ckpt, &f.dict).unwrap(), restricted).unwrap());
    let req = |origin: &str| {
        Request::builder()
            .uri("/v1/health")
            .header(header::ORIGIN, origin)
            .body(Body::empty())
            .unwrap()
    };
    let ok = app.clone().oneshot(req("http://mixer.local")).await.unwrap();
    assert_eq!(ok.headers()[header::ACCESS_CONTROL_ALLOW_ORIGIN], "http://mixer.local");
    let other = app.oneshot(req("http://elsewhere")).await.unwrap();
    assert!(other.headers().get(header::ACCESS_CONTROL_ALLOW_ORIGIN).is_none());
}

/// Remote backend stand-in: answers capabilities, and noise predictions
/// with zeros (no attention) or with 503 when `fail_predict` is set.
fn mock_remote(fail_predict: bool) -> (SocketAddr, tokio::sync::oneshot::Sender<()>) {
    let mut caps: Capabilities = DenoiserBackend::<f32>::capabilities(&ToyDenoiser::<f32>::new(ToyConfig::default()).unwrap());
    caps.taps.clear();
    let (rows, cols) = caps.latent_shape();
    let app = Router::new()
        .route("/v1/capabilities", get(move || async move { Json(caps.clone()) }))
        .route(
            "/v1/predict_noise",
            post(move || async move {
                if fail_predict {
                    return Err(StatusCode::SERVICE_UNAVAILABLE);
                }
                Ok(Json(PredictResponse {
                    eps: encode_tensor(&Tensor::<f32>::zeros(rows, cols)),
                    attention: None,
                }))
            }),
        );
    let (addr_tx, addr_rx) = std::sync::mpsc::channel();
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            addr_tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = stop_rx.await;
                })
                .await
                .unwrap();
        });
    });
    (addr_rx.recv().unwrap(), stop_tx)
}

fn remote_state(f: &Fixture, addr: SocketAddr) -> AppState {
    let policy = RetryPolicy {
        retries: 1,
        base_delay: Duration::from_millis(1),
    };
    let remote = RemoteBackend::connect_with(&format!("http://{addr}"), None, policy).unwrap();
    AppState::new(Artifacts::load(&f.ckpt, &f.dict).unwrap(), InferenceBackend::Remote(remote), config(3)).unwrap()
}

#[test]
fn backend_outage_answers_503_with_retry_after() {
    let f = fixture();
    let rt = tokio::runtime::Runtime::new().unwrap();

    // Down before submission: rejected up front.
    let (addr, stop) = mock_remote(false);
    let state = remote_state(&f, addr);
    stop.send(()).unwrap();
    std::thread::sleep(Duration::from_millis(100));
    let app = router(state.clone());
    let code = code_json(&f.task.codes[0]);
    let (status, headers, body) = rt.block_on(call(&app, Method::POST, "/v1/generate", Some(json!({"code": code, "seed": 1}))));
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE, "{body}");
    assert_eq!(headers[header::RETRY_AFTER], "5");
    let (_, _, health) = rt.block_on(call(&app, Method::GET, "/v1/health", None));
    assert_eq!(health["backend_ready"], false);
    drop(app);

    // Failing mid-job: the job reports the outage.
    let (addr, _stop) = mock_remote(true);
    let state = remote_state(&f, addr);
    let app = router(state.clone());
    let (status, headers, job) = rt.block_on(async {
        let id = submit(&app, code.clone(), 1).await;
        wait(&app, &id).await
    });
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(headers[header::RETRY_AFTER], "5");
    assert_eq!(job["status"], "failed");
    drop(app);
    drop(rt);
}

#[test]
fn backends_without_taps_report_attention_unsupported() {
    let f = fixture();
    let rt = tokio::runtime::Runtime::new().unwrap();
    let (addr, _stop) = mock_remote(false);
    let state = remote_state(&f, addr);
    let app = router(state.clone());
    let code = code_json(&f.task.codes[0]);
    let (job, att) = rt.block_on(async {
        let id = submit(&app, code, 4).await;
        let job = wait(&app, &id).await;
        (job, call(&app, Method::GET, &format!("/v1/attention/{id}"), None).await)
    });
    assert_eq!(job.2["status"], "done");
    assert_eq!(att.0, StatusCode::NOT_IMPLEMENTED);
    drop(app);
    drop(rt);
}
