use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn partsmith() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_partsmith"));
    cmd.env_remove("PARTSMITH_BACKEND_URL").env_remove("PARTSMITH_BACKEND_TOKEN");
    cmd
}

fn run(args: &[&str]) -> Output {
    partsmith().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

/// Every file under `dir` with its bytes, sorted by relative path.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn parent_shas(manifest: &Value) -> Vec<String> {
    manifest["parents"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["manifest_sha256"].as_str().unwrap().to_string())
        .collect()
}

fn sha(path: &Path) -> String {
    partsmith_core::manifest::file_sha256(path).unwrap()
}

/// extract --toy then discover with the synthetic-task settings.
fn features_and_dict(root: &Path) -> (PathBuf, PathBuf) {
    let feats = root.join("features");
    let dict = root.join("dict");
    ok(&["extract", "--toy", "--out", s(&feats)]);
    ok(&[
        "discover", "--features", s(&feats), "--M", "2", "--K", "2", "--seed", "0", "--n-init", "10", "--out", s(&dict),
    ]);
    (feats, dict)
}

#[test]
fn discover_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (feats, dict) = features_and_dict(tmp.path());
    let again = tmp.path().join("dict2");
    ok(&[
        "discover", "--features", s(&feats), "--M", "2", "--K", "2", "--seed", "0", "--n-init", "10", "--out", s(&again),
    ]);
    let a = tree(&dict);
    assert!(a.iter().any(|(p, _)| p == Path::new("dictionary.json")));
    assert!(a.iter().any(|(p, _)| p == Path::new("run.json")));
    assert_eq!(a, tree(&again));
    let codes = json(&dict.join("codes.json"));
    assert_eq!(codes.as_object().unwrap().len(), 8);
    assert_eq!(codes["creature_00"]["channels"], 3);
}

#[test]
fn eval_without_a_checkpoint_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&["eval", "--suite", "s.json", "--dict", s(tmp.path()), "--report", "r.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--ckpt"));
}

#[test]
fn usage_errors_and_help() {
    let out = run(&["discover", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(64));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(64));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    let help = ok(&["--help"]);
    for sub in ["extract", "discover", "train", "compose", "generate", "eval", "sweep", "dump-attn", "serve"] {
        assert!(help.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn config_file_supplies_defaults_and_rejects_unknown_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let feats = tmp.path().join("features");
    ok(&["extract", "--toy", "--out", s(&feats)]);
    let cfg = tmp.path().join("run.toml");
    std::fs::write(&cfg, "[discover]\nparts = 2\nsplits = 2\n[discover.kmeans]\nn_init = 10\n").unwrap();
    let dict = tmp.path().join("dict");
    ok(&["--config", s(&cfg), "discover", "--features", s(&feats), "--out", s(&dict)]);
    let meta = json(&dict.join("dictionary.json"));
    assert_eq!((meta["parts"].as_u64(), meta["splits"].as_u64()), (Some(2), Some(2)));
    // A flag beats the file: three splits per channel cannot be fitted on
    // two colors, so this only succeeds if --K wins.
    std::fs::write(&cfg, "[discover]\nparts = 2\nsplits = 3\n[discover.kmeans]\nn_init = 10\n").unwrap();
    let three = run(&["--config", s(&cfg), "discover", "--features", s(&feats), "--out", s(&tmp.path().join("d3"))]);
    assert_eq!(three.status.code(), Some(1));
    let dict2 = tmp.path().join("dict2");
    ok(&["--config", s(&cfg), "discover", "--features", s(&feats), "--K", "2", "--out", s(&dict2)]);
    assert_eq!(json(&dict2.join("dictionary.json"))["splits"], 2);

    std::fs::write(&cfg, "[discover]\nclusters = 2\n").unwrap();
    let out = run(&["--config", s(&cfg), "discover", "--features", s(&feats), "--out", s(&dict)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("discover.clusters"));
    std::fs::write(&cfg, "[nonsense]\n").unwrap();
    assert_eq!(run(&["--config", s(&cfg), "discover", "--features", s(&feats), "--out", s(&dict)]).status.code(), Some(1));
}

#[test]
fn remote_backends_cannot_train() {
    let tmp = tempfile::tempdir().unwrap();
    let (feats, dict) = features_and_dict(tmp.path());
    let ckpt = tmp.path().join("ckpt");
    let out = run(&[
        "train", "--features", s(&feats), "--dict", s(&dict), "--backend", "remote:http://127.0.0.1:9", "--out", s(&ckpt),
    ]);
    assert_eq!(out.status.code(), Some(2));
    // The environment variable selects the same backend.
    let out = partsmith()
        .args(["train", "--features", s(&feats), "--dict", s(&dict), "--out", s(&ckpt)])
        .env("PARTSMITH_BACKEND_URL", "http://127.0.0.1:9")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!ckpt.join("checkpoint.json").exists());
}

#[test]
fn toy_pipeline_chains_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (feats, dict) = features_and_dict(root);
    let ckpt = root.join("ckpt");
    ok(&[
        "train", "--features", s(&feats), "--dict", s(&dict), "--recipe", "toy", "--steps", "20", "--out", s(&ckpt),
    ]);
    let header = json(&ckpt.join("checkpoint.json"));
    assert_eq!(header["step"], 20);

    // One hybrid, printed as pairs.
    let code = root.join("code.json");
    let text = ok(&[
        "compose", "--dict", s(&dict), "--base", "creature_00", "--donor", "creature_07:1", "--out", s(&code),
    ]);
    let codes = json(&dict.join("codes.json"));
    let written = json(&code);
    assert_eq!(written["text"].as_str().unwrap(), text.trim());
    let mut want = codes["creature_00"]["pairs"].as_array().unwrap().clone();
    want[1] = codes["creature_07"]["pairs"][1].clone();
    assert_eq!(written["code"]["pairs"], Value::Array(want));

    let img = root.join("img");
    ok(&["generate", "--code", s(&code), "--ckpt", s(&ckpt), "--seed", "7", "--steps", "10", "--out", s(&img)]);
    let first = tree(&img);
    ok(&["generate", "--code", s(&code), "--ckpt", s(&ckpt), "--seed", "7", "--steps", "10", "--out", s(&img)]);
    assert_eq!(first, tree(&img), "generation is seeded");
    let gen = json(&img.join("generation.json"));
    assert_eq!(gen["text"].as_str().unwrap(), text.trim());
    let png = std::fs::read(img.join("image.png")).unwrap();
    assert_eq!(&png[1..4], b"PNG");

    let attn = root.join("attn");
    ok(&["dump-attn", "--ckpt", s(&ckpt), "--code", s(&code), "--steps", "5", "--out", s(&attn)]);
    for m in 0..3 {
        assert!(attn.join(format!("channel_{m}.png")).exists());
    }
    assert!(attn.join("attention.psfm").exists());
    let image_probe = root.join("attn_image");
    ok(&[
        "dump-attn", "--ckpt", s(&ckpt), "--code", s(&code), "--image", s(&img.join("image.png")), "--out", s(&image_probe),
    ]);

    let suite = root.join("suite.json");
    ok(&[
        "compose", "--dict", s(&dict), "--suite", "6", "--sources", "2", "--pool", "4", "--seed", "3", "--out", s(&suite),
    ]);
    assert_eq!(json(&suite)["items"].as_array().unwrap().len(), 6);
    let report = root.join("report.json");
    let printed = ok(&[
        "eval", "--suite", s(&suite), "--ckpt", s(&ckpt), "--dict", s(&dict), "--report", s(&report), "--steps", "10",
    ]);
    assert!(printed.contains("sources 2"));
    let r = json(&report);
    assert_eq!(r["items"], 6);
    let emr = r["overall"]["emr"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&emr));
    assert!(r["per_sources"]["2"].is_object());
    assert_eq!(r["fid"]["status"], "unavailable");

    // eval -> train -> discover -> extract, each link pinned by checksum.
    let eval_run = json(&root.join("report.json.run.json"));
    let train_sha = sha(&ckpt.join("run.json"));
    let dict_sha = sha(&dict.join("run.json"));
    let feats_sha = sha(&feats.join("run.json"));
    assert!(parent_shas(&eval_run).contains(&train_sha));
    assert!(parent_shas(&eval_run).contains(&dict_sha));
    let train_run = json(&ckpt.join("run.json"));
    assert!(parent_shas(&train_run).contains(&dict_sha));
    assert!(parent_shas(&train_run).contains(&feats_sha));
    assert!(parent_shas(&json(&dict.join("run.json"))).contains(&feats_sha));
    assert_eq!(train_run["command"], "train");
    assert!(train_run["config_sha256"].is_string());
    assert_eq!(train_run["seeds"]["train"], 0);
    let outputs: Vec<&str> = train_run["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|o| o["path"].as_str().unwrap())
        .collect();
    assert!(outputs.contains(&"checkpoint.json"));
    assert!(parent_shas(&json(&root.join("code.json.run.json"))).contains(&dict_sha));
    let gen_run = json(&img.join("run.json"));
    assert!(parent_shas(&gen_run).contains(&train_sha));

    // Resuming continues the step count.
    let more = root.join("ckpt2");
    ok(&[
        "train", "--features", s(&feats), "--dict", s(&dict), "--recipe", "toy", "--steps", "30", "--resume", s(&ckpt),
        "--out", s(&more),
    ]);
    assert_eq!(json(&more.join("checkpoint.json"))["step"], 30);
}

#[test]
fn unreachable_backend_exits_with_dependency_status() {
    let tmp = tempfile::tempdir().unwrap();
    let code = tmp.path().join("code.json");
    std::fs::write(&code, r#"{"channels":3,"pairs":[[0,1],[1,2],[2,1]]}"#).unwrap();
    let (feats, dict) = features_and_dict(tmp.path());
    let ckpt = tmp.path().join("ckpt");
    ok(&["train", "--features", s(&feats), "--dict", s(&dict), "--recipe", "toy", "--steps", "2", "--out", s(&ckpt)]);
    let out = partsmith()
        .args(["generate", "--code", s(&code), "--ckpt", s(&ckpt), "--out", s(&tmp.path().join("img"))])
        .env("PARTSMITH_BACKEND_URL", "http://127.0.0.1:9")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    // A code outside the dictionary is a validation error.
    std::fs::write(&code, r#"{"channels":3,"pairs":[[0,9]]}"#).unwrap();
    let out = run(&["generate", "--code", s(&code), "--ckpt", s(&ckpt), "--out", s(&tmp.path().join("img"))]);
    assert_eq!(out.status.code(), Some(1));
}

struct Server(std::process::Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn http_get(addr: &str, path: &str) -> String {
    let mut stream = TcpStream::connect(addr).unwrap();
    write!(stream, "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut body = String::new();
    stream.read_to_string(&mut body).unwrap();
    body
}

#[test]
fn serve_answers_health_checks() {
    let tmp = tempfile::tempdir().unwrap();
    let (feats, dict) = features_and_dict(tmp.path());
    let ckpt = tmp.path().join("ckpt");
    ok(&["train", "--features", s(&feats), "--dict", s(&dict), "--recipe", "toy", "--steps", "2", "--out", s(&ckpt)]);
    let run_dir = tmp.path().join("serve");
    let mut child = partsmith()
        .args(["serve", "--ckpt", s(&ckpt), "--dict", s(&dict), "--port", "0", "--out", s(&run_dir)])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let stdout = child.stdout.take().unwrap();
    let server = Server(child);
    let mut line = String::new();
    BufReader::new(stdout).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on http://").expect(&line).to_string();
    let health = http_get(&addr, "/v1/health");
    assert!(health.starts_with("HTTP/1.1 200"), "{health}");
    assert!(health.contains("\"backend\":\"toy\""));
    let dictionary = http_get(&addr, "/v1/dictionary");
    assert!(dictionary.contains("\"split_counts\":[2,2,2]"), "{dictionary}");
    assert!(parent_shas(&json(&run_dir.join("run.json"))).contains(&sha(&ckpt.join("run.json"))));
    drop(server);
}

#[test]
fn flag_beats_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let (feats, dict) = features_and_dict(tmp.path());
    let ckpt = tmp.path().join("ckpt");
    let out = partsmith()
        .args(["train", "--features", s(&feats), "--dict", s(&dict), "--recipe", "toy", "--steps", "2"])
        .args(["--backend", "toy", "--out", s(&ckpt)])
        .env("PARTSMITH_BACKEND_URL", "http://127.0.0.1:9")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&ckpt.join("run.json"))["config"]["backend"], "toy");
}

#[test]
fn sweep_writes_rows_per_lambda() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let table = ok(&[
        "sweep", "--out", s(&out), "--lambdas", "0,0.01", "--seeds", "0", "--steps", "5", "--suite-size", "4",
    ]);
    assert!(table.contains("lambda"));
    let record = json(&out.join("sweep.json"));
    let rows = record["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1]["lambda_attn"], 0.01);
    assert_eq!(record["runs"].as_array().unwrap().len(), 2);
    assert_eq!(json(&out.join("run.json"))["command"], "sweep");
}
