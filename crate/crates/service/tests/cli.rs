use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/amyloidosis")
}

fn ddx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddx"))
        .args(args)
        .env_remove("DDX_SETUP")
        .env_remove("DDX_BACKEND_ENDPOINT")
        .env_remove("DDX_PIPELINE_CONFIG")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = ddx(args);
    assert!(out.status.success(), "ddx {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn diagnose_writes_result_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let setup = fixture_dir().join("setup.json");
    let case = fixture_dir().join("case.json");
    let (out, trace) = (dir.path().join("result.json"), dir.path().join("trace.jsonl"));
    let run = ok(&["diagnose", "--setup", p(&setup), "--case", p(&case), "--out", p(&out), "--trace", p(&trace)]);
    let progress = String::from_utf8(run.stderr).unwrap();
    for stage in ["ingest", "predict", "examine", "review", "merge", "self_verify", "output", "ref_verify"] {
        assert!(progress.contains(stage), "{stage} missing from progress");
    }
    let result = read_json(&out);
    assert_eq!(result["ranked_list"][0]["diagnosis"], "systemic amyloidosis");
    let lines: Vec<Value> =
        std::fs::read_to_string(&trace).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(&Value::Array(lines), &result["trace"]);

    // Fresh processes replay byte for byte, including to stdout.
    let again = ok(&["diagnose", "--setup", p(&setup), "--case", p(&case)]);
    assert_eq!(String::from_utf8(again.stdout).unwrap().trim_end(), std::fs::read_to_string(&out).unwrap());
}

#[test]
fn prebuilt_indexes_reproduce_load_time_indexing() {
    let dir = tempfile::tempdir().unwrap();
    let fx = fixture_dir();
    let corpus = dir.path().join("corpus.json");
    let cases = dir.path().join("cases.json");
    ok(&["index", "corpus", "--dir", p(&fx.join("corpus")), "--out", p(&corpus)]);
    let setup = fx.join("setup.json");
    let run = ok(&[
        "index", "cases", "--setup", p(&setup), "--notes", p(&fx.join("case_notes.json")),
        "--out", p(&cases), "--exclude", "amyloid-01",
    ]);
    assert!(String::from_utf8_lossy(&run.stderr).contains("indexed"));

    let mut cfg = read_json(&setup);
    let obj = cfg.as_object_mut().unwrap();
    obj.remove("corpus_dir");
    obj.remove("case_notes");
    obj.insert("corpus_index".into(), json!(corpus));
    obj.insert("case_index".into(), json!(cases));
    let rel = obj["backend"]["transcript"].as_str().unwrap().to_string();
    obj.get_mut("backend").unwrap()["transcript"] = json!(fx.join(rel));
    let rel = obj["web"]["path"].as_str().unwrap().to_string();
    obj.get_mut("web").unwrap()["path"] = json!(fx.join(rel));
    let prebuilt = dir.path().join("setup.json");
    std::fs::write(&prebuilt, cfg.to_string()).unwrap();

    // Index building consumes summarization replies, so compare against a
    // load-time run rather than reusing one process.
    let case = fx.join("case.json");
    let a = ok(&["diagnose", "--setup", p(&setup), "--case", p(&case)]);
    let b = ok(&["diagnose", "--setup", p(&prebuilt), "--case", p(&case)]);
    let ranking = |o: &Output| -> Value {
        let v: Value = serde_json::from_slice(&o.stdout).unwrap();
        v["ranked_list"].clone()
    };
    assert_eq!(ranking(&a), ranking(&b));
}

#[test]
fn knowledge_base_files_are_checked() {
    let kb = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/data/kb");
    let run = ok(&["index", "kb", "--entries", p(&kb.join("knowledge_base.json")), "--synonyms", p(&kb.join("synonyms.json"))]);
    assert!(String::from_utf8_lossy(&run.stderr).contains("knowledge base ok"));
    let dir = tempfile::tempdir().unwrap();
    let broken = dir.path().join("kb.json");
    std::fs::write(&broken, "[").unwrap();
    assert!(!ddx(&["index", "kb", "--entries", p(&broken), "--synonyms", p(&kb.join("synonyms.json"))]).status.success());
}

fn reply(dxs: &[&str]) -> String {
    let items: Vec<_> = dxs.iter().map(|d| json!({"diagnosis": d, "explanations": [format!("{d} finding")]})).collect();
    format!("```json\n{}\n```", json!({ "diagnoses": items }))
}

#[test]
fn baselines_and_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let transcript = json!([
        {"tag": "baseline.cot", "response": reply(&["restrictive cardiomyopathy", "systemic amyloidosis"])},
        {"tag": "baseline.sc_cot", "times": 1, "response": reply(&["x", "systemic amyloidosis"])},
        {"tag": "baseline.sc_cot", "times": 1, "response": reply(&["systemic amyloidosis"])},
        {"tag": "baseline.sc_cot", "response": reply(&["x"])}
    ]);
    std::fs::write(d.join("transcript.json"), transcript.to_string()).unwrap();
    std::fs::write(d.join("setup.json"), json!({"backend": {"kind": "scripted", "transcript": "transcript.json"}}).to_string())
        .unwrap();
    let setup = d.join("setup.json");
    let case = fixture_dir().join("case.json");

    let cot = ok(&["diagnose", "--setup", p(&setup), "--case", p(&case), "--baseline", "cot"]);
    let cot: Value = serde_json::from_slice(&cot.stdout).unwrap();
    assert_eq!(cot["ranked_list"][0]["diagnosis"], "restrictive cardiomyopathy");
    let sc = ok(&["diagnose", "--setup", p(&setup), "--case", p(&case), "--baseline", "sc-cot", "--samples", "3"]);
    let sc: Value = serde_json::from_slice(&sc.stdout).unwrap();
    assert_eq!(sc["ranked_list"][0]["diagnosis"], "x");

    // The pipeline's result becomes one prediction line; the baseline another.
    let full = ok(&["diagnose", "--setup", p(&fixture_dir().join("setup.json")), "--case", p(&case)]);
    let full: Value = serde_json::from_slice(&full.stdout).unwrap();
    std::fs::write(d.join("ours.jsonl"), format!("{full}\n")).unwrap();
    std::fs::write(d.join("cot.jsonl"), format!("{cot}\n")).unwrap();
    let gold = json!({
        "case_id": "amyloid-01",
        "gold_diagnoses": ["systemic amyloidosis", "diabetic nephropathy", "hypertensive heart disease"],
        "gold_explanations": {"systemic amyloidosis": ["heavy proteinuria", "bilateral carpal tunnel syndrome"]}
    });
    std::fs::write(d.join("gold.jsonl"), format!("{gold}\n")).unwrap();
    let labels = [
        json!({"key": {"diagnosis": "systemic amyloidosis", "explanation": "heavy proteinuria"}, "outcome": "TP"}),
        json!({"key": {"diagnosis": "systemic amyloidosis", "explanation": "mild cardiomegaly"}, "outcome": "FP"}),
    ];
    let labels: String = labels.iter().map(|l| format!("{l}\n")).collect();
    std::fs::write(d.join("refs.jsonl"), labels).unwrap();
    std::fs::write(d.join("likert.json"), "[5, 4, 3, 5]").unwrap();

    let report = d.join("report.json");
    let run = ok(&[
        "evaluate", "--predictions", p(&d.join("ours.jsonl")), "--gold", p(&d.join("gold.jsonl")),
        "--baseline", p(&d.join("cot.jsonl")), "--ref-labels", p(&d.join("refs.jsonl")),
        "--likert", p(&d.join("likert.json")), "--resamples", "200", "--out", p(&report),
    ]);
    let table = String::from_utf8(run.stderr).unwrap();
    assert!(table.contains("top-1"), "{table}");
    let report = read_json(&report);
    assert_eq!(report["cases"], 1);
    assert_eq!(report["top_k"][0]["k"], 1);
    assert_eq!(report["top_k"][0]["accuracy"], 1.0);
    assert_eq!(report["top_k"][1]["accuracy"], 1.0);
    assert_eq!(report["references"]["tp"], 1);
    assert_eq!(report["references"]["precision"], 0.5);
    assert_eq!(report["likert"]["n"], 4);
    assert_eq!(report["comparison"]["other_accuracy"], 0.0);

    // A gold file missing a predicted case is an error, not a silent skip.
    std::fs::write(d.join("other_gold.jsonl"), format!("{}\n", json!({
        "case_id": "someone-else",
        "gold_diagnoses": ["a", "b", "c"],
        "gold_explanations": {}
    })))
    .unwrap();
    let bad = ddx(&["evaluate", "--predictions", p(&d.join("ours.jsonl")), "--gold", p(&d.join("other_gold.jsonl"))]);
    assert!(!bad.status.success());
}

#[test]
fn missing_setup_is_a_usage_error() {
    let out = ddx(&["diagnose", "--case", "x.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--setup"));
}

#[test]
fn serve_answers_over_tcp() {
    use std::io::{Read, Write};
    use std::net::{TcpListener, TcpStream};

    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let data = tempfile::tempdir().unwrap();
    let addr = format!("127.0.0.1:{port}");
    let mut child = Command::new(env!("CARGO_BIN_EXE_ddx"))
        .args(["serve", "--setup", p(&fixture_dir().join("setup.json")), "--data-dir", p(data.path()), "--addr", &addr])
        .stderr(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let mut stream = None;
    for _ in 0..100 {
        if let Ok(s) = TcpStream::connect(&addr) {
            stream = Some(s);
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(50));
    }
    let mut stream = stream.expect("server came up");
    write!(stream, "GET /schemas/session HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.contains("urn:ddx:schema:session"));
}
