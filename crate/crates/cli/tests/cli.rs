use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::{Arc, OnceLock};

use axum::body::{to_bytes, Body};
use axum::http::{header, Request, StatusCode};
use base64::Engine;
use capret_cli::commands::SearchResponse;
use capret_cli::service::{load_state, router, AppState};
use capret_core::config::RunConfig;
use capret_core::model::ModelDir;
use serde_json::Value;
use tower::ServiceExt;

const TINY_CONFIG: &str = r#"{
  "model": {"vision": {"patch_size": 32, "embed_dim": 16, "n_layers": 1, "n_heads": 2},
            "decoder_embed_dim": 32, "decoder_layers": 1, "decoder_heads": 2,
            "context_len": 40, "retrieval_dim": 8},
  "lm": {"steps": 20, "batch_sequences": 4},
  "stage1": {"steps": 4, "batch_size": 8},
  "train": {"batch_size": 8, "max_steps": 20, "warmup_steps": 5, "eval_interval": 10},
  "generation": {"max_new_tokens": 12}
}"#;

fn capret(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capret"))
        .args(args)
        .env_remove("CAPRET_CHECKPOINT_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Fixture {
    root: PathBuf,
}

impl Fixture {
    fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    fn model(&self) -> PathBuf {
        self.root.join("model")
    }
    fn config(&self) -> PathBuf {
        self.root.join("run.json")
    }
    fn args<'a>(&'a self, rest: &[&'a str]) -> Vec<String> {
        let mut v = vec![
            "--config".to_string(),
            self.config().display().to_string(),
            "--checkpoint-dir".to_string(),
            self.model().display().to_string(),
            "--manifest".to_string(),
            self.data().join("manifest.json").display().to_string(),
        ];
        v.extend(rest.iter().map(|s| s.to_string()));
        v
    }
    fn run(&self, rest: &[&str]) -> Output {
        let args = self.args(rest);
        capret(&args.iter().map(String::as_str).collect::<Vec<_>>())
    }
    fn state(&self) -> Arc<AppState> {
        let mut cfg = RunConfig::load(&self.config()).unwrap();
        cfg.paths.manifest = Some(self.data().join("manifest.json"));
        Arc::new(load_state(&cfg, &ModelDir::new(self.model())).unwrap())
    }
}

/// Runs the whole pipeline once at tiny scale and indexes the train split.
fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let root = tempfile::tempdir().unwrap().keep();
        let f = Fixture { root };
        std::fs::write(f.config(), TINY_CONFIG).unwrap();
        ok(capret(&[
            "synthgen",
            "-n",
            "10",
            "--seed",
            "3",
            "-o",
            f.data().to_str().unwrap(),
        ]));
        ok(f.run(&["pretrain-lm"]));
        ok(f.run(&["train-clip"]));
        ok(f.run(&["train"]));
        ok(f.run(&["index", "--split", "train"]));
        f
    })
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn synthgen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for d in [&a, &b] {
        ok(capret(&[
            "synthgen",
            "-n",
            "10",
            "--seed",
            "7",
            "-o",
            d.to_str().unwrap(),
        ]));
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 12);
    assert_eq!(ta, tb);
}

#[test]
fn retrieve_before_index_fails_with_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = capret(&[
        "--checkpoint-dir",
        dir.path().to_str().unwrap(),
        "retrieve",
        "-q",
        "a red object",
        "-k",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("index not found"));
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"model": {"retrieval_dim": 0}}"#).unwrap();
    let out = capret(&["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.retrieval_dim"));

    std::fs::write(&cfg, r#"{"train": {"bogus": 1}}"#).unwrap();
    let out = capret(&["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    let out = capret(&["train", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));

    let out = capret(&["--checkpoint-dir", dir.path().to_str().unwrap(), "train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("paths.manifest"));
}

#[test]
fn pipeline_writes_the_model_layout_and_tables() {
    let f = fixture();
    let m = ModelDir::new(f.model());
    for p in [
        m.vocab(),
        m.backbones(),
        m.bridge_best(),
        m.bridge_last(),
        m.metrics(),
        m.index(),
    ] {
        assert!(p.exists(), "{}", p.display());
    }
    let table = ok(f.run(&["eval-retrieval", "--split", "train"]));
    assert!(table.contains("R@1") && table.contains("mR"), "{table}");
    let json: Value = serde_json::from_str(&ok(f.run(&["eval-retrieval", "--split", "train", "--json"]))).unwrap();
    let r = &json["recall"];
    assert!(r["r1"].as_f64().unwrap() <= r["r5"].as_f64().unwrap());
    assert!(r["r5"].as_f64().unwrap() <= r["r10"].as_f64().unwrap());

    let log = f.root.join("captions.jsonl");
    let table = ok(f.run(&["eval-caption", "--split", "train", "--log", log.to_str().unwrap()]));
    assert!(table.contains("CIDEr-D"), "{table}");
    let lines: Vec<Value> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(lines.last().unwrap().get("summary").is_some());
    assert!(lines[0].get("bleu1").is_some() && lines[0].get("hypothesis").is_some());
}

#[test]
fn resume_continues_from_the_last_step() {
    let f = fixture();
    let copy = f.root.join("resume");
    let status = Command::new("cp")
        .args(["-r"])
        .arg(f.model())
        .arg(&copy)
        .status()
        .unwrap();
    assert!(status.success());
    let args = f.args(&["train", "--resume", "--steps", "25"]);
    let mut args: Vec<&str> = args.iter().map(String::as_str).collect();
    let copy_str = copy.display().to_string();
    args[3] = &copy_str;
    let out: Value = serde_json::from_str(ok(capret(&args)).trim()).unwrap();
    assert_eq!(out["step"].as_u64(), Some(25));
}

async fn call(app: axum::Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let res = app.oneshot(req).await.unwrap();
    let status = res.status();
    (status, to_bytes(res.into_body(), usize::MAX).await.unwrap().to_vec())
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

#[tokio::test]
async fn health_answers_ok() {
    let app = router(fixture().state());
    let (status, body) = call(app, get("/health")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        serde_json::from_slice::<Value>(&body).unwrap(),
        serde_json::json!({"status": "ok"})
    );
}

#[tokio::test]
async fn search_matches_the_cli() {
    let f = fixture();
    let app = router(f.state());
    for query in ["an aerial image of forest with two red objects", "water"] {
        let cli: SearchResponse = serde_json::from_str(&ok(f.run(&["retrieve", "-q", query, "-k", "3"]))).unwrap();
        let uri = format!("/search?q={}&k=3", query.replace(' ', "%20"));
        let (status, body) = call(app.clone(), get(&uri)).await;
        assert_eq!(status, StatusCode::OK);
        let http: SearchResponse = serde_json::from_slice(&body).unwrap();
        assert_eq!(http.results.len(), 3);
        assert_eq!(http, cli);
        for hit in &http.results {
            assert_eq!(hit.score, (hit.score * 1e6).round() / 1e6);
        }
        assert!(http.results.windows(2).all(|w| w[0].score >= w[1].score));
    }
}

#[tokio::test]
async fn caption_matches_the_cli_for_both_encodings() {
    let f = fixture();
    let app = router(f.state());
    let image = f.data().join("scene_00000.png");
    let expected = ok(f.run(&["caption", "-i", image.to_str().unwrap()]))
        .trim_end()
        .to_string();
    assert!(!expected.is_empty());
    let bytes = std::fs::read(&image).unwrap();

    let b64 = base64::engine::general_purpose::STANDARD.encode(&bytes);
    let req = Request::post("/caption")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(serde_json::json!({"image_b64": b64}).to_string()))
        .unwrap();
    let (status, body) = call(app.clone(), req).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        serde_json::from_slice::<Value>(&body).unwrap()["caption"],
        expected.as_str()
    );

    let boundary = "capretboundary";
    let mut form = format!(
        "--{boundary}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"x.png\"\r\nContent-Type: image/png\r\n\r\n"
    )
    .into_bytes();
    form.extend_from_slice(&bytes);
    form.extend_from_slice(format!("\r\n--{boundary}--\r\n").as_bytes());
    let req = Request::post("/caption")
        .header(
            header::CONTENT_TYPE,
            format!("multipart/form-data; boundary={boundary}"),
        )
        .body(Body::from(form))
        .unwrap();
    let (status, body) = call(app, req).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(
        serde_json::from_slice::<Value>(&body).unwrap()["caption"],
        expected.as_str()
    );
}

#[tokio::test]
async fn images_are_served_by_id() {
    let f = fixture();
    let app = router(f.state());
    let res = app.clone().oneshot(get("/image/scene_00000")).await.unwrap();
    assert_eq!(res.status(), StatusCode::OK);
    assert_eq!(res.headers()[header::CONTENT_TYPE], "image/png");
    let body = to_bytes(res.into_body(), usize::MAX).await.unwrap();
    assert_eq!(body.to_vec(), std::fs::read(f.data().join("scene_00000.png")).unwrap());
    let (status, _) = call(app, get("/image/nope")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn malformed_requests_get_400_with_a_json_error() {
    let app = router(fixture().state());
    let bad = [
        get("/search?k=3"),
        get("/search?q=water&k=zero"),
        get("/search?q=water&k=0"),
        get("/search?q=water&k=1000"),
        Request::post("/caption")
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(r#"{"image_b64": "not base64!"}"#))
            .unwrap(),
        Request::post("/caption")
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(r#"{"image_b64": "aGVsbG8="}"#))
            .unwrap(),
        Request::post("/caption")
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from("{}"))
            .unwrap(),
    ];
    for req in bad {
        let uri = req.uri().clone();
        let (status, body) = call(app.clone(), req).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{uri}");
        let v: Value =
            serde_json::from_slice(&body).unwrap_or_else(|_| panic!("{uri}: {}", String::from_utf8_lossy(&body)));
        assert!(v["error"].as_str().is_some_and(|e| !e.is_empty()), "{uri}");
    }
}

#[tokio::test]
async fn concurrent_searches_agree() {
    let app = router(fixture().state());
    let uri = "/search?q=buildings&k=5";
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let app = app.clone();
            tokio::spawn(async move { call(app, get(uri)).await })
        })
        .collect();
    let mut bodies = Vec::new();
    for h in handles {
        let (status, body) = h.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        bodies.push(body);
    }
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
}
