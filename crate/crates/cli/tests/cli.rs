use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use doclens_core::fixtures::{write_bundle_fixture, FixturePage};
use doclens_core::gateway::MockScript;
use serde_json::{json, Value};

struct Env {
    dir: tempfile::TempDir,
    bundle: PathBuf,
    script: PathBuf,
}

fn nav(p: &str) -> String {
    format!(r#"{{"analysis":"a","located_pages":"{p}","prediction":"x"}}"#)
}

fn answer(p: &str) -> String {
    json!({"analysis": "read it", "prediction": p}).to_string()
}

fn env() -> Env {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("docs/report");
    let mut pages = FixturePage::simple_set(4);
    pages[2].elements = vec![("figure", [10.0, 10.0, 60.0, 50.0])];
    write_bundle_fixture(&bundle, "report", &pages);
    let mut script = MockScript::default();
    let rounds = |r: Vec<String>| vec![r; 12];
    script.push("prompt:page_navigator", rounds(vec![nav("[3]"), nav("[2, 3]"), nav("[]"), nav("[3]")]));
    script.push("prompt:answer_sampler", rounds(vec![answer("9"), answer("9"), answer("8"), answer("9")]));
    script.push("prompt:adjudicator", rounds(vec![answer("9")]));
    let script_path = dir.path().join("script.json");
    std::fs::write(&script_path, script.to_json_pretty()).unwrap();
    std::fs::write(
        dir.path().join("records.jsonl"),
        [
            json!({"question_id": "a", "doc": "docs/report", "question": "How many?", "answer": "9", "evidence_pages": [3], "sources": ["FIG"]}),
            json!({"question_id": "b", "doc": "docs/report", "question": "Which?", "answer": "8", "evidence_pages": [2, 4], "sources": ["TXT"]}),
        ]
        .iter()
        .map(|v| format!("{v}\n"))
        .collect::<String>(),
    )
    .unwrap();
    Env {
        dir,
        bundle,
        script: script_path,
    }
}

impl Env {
    fn cmd(&self) -> Command {
        let mut c = Command::new(env!("CARGO_BIN_EXE_doclens"));
        c.arg("--data-dir")
            .arg(self.dir.path().join("data"))
            .arg("--mock-script")
            .arg(&self.script)
            .current_dir(self.dir.path())
            .env_remove("DOCLENS_DATA_DIR")
            .env_remove("RUST_LOG");
        c
    }

    fn run(&self, args: &[&str]) -> Output {
        self.cmd().args(args).output().unwrap()
    }

    fn path(&self, rel: &str) -> String {
        self.dir.path().join(rel).display().to_string()
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ask_json(env: &Env, extra: &[&str]) -> Value {
    let bundle = env.bundle.display().to_string();
    let mut args = vec!["ask", bundle.as_str(), "-q", "How many?", "--json"];
    args.extend_from_slice(extra);
    let out = env.run(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    serde_json::from_str(&stdout(&out)).unwrap()
}

#[test]
fn ask_prints_answer_and_saves_trace() {
    let env = env();
    let bundle = env.bundle.display().to_string();
    let out = env.run(&["ask", &bundle, "-q", "How many?", "--te", "4", "--ta", "4"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out), "9\n");
    let err = stderr(&out);
    let saved = err.split(" saved to ").nth(1).unwrap().trim();
    let trace: Value = serde_json::from_str(&std::fs::read_to_string(saved).unwrap()).unwrap();
    assert_eq!(trace["final_answer"], "9");
    assert_eq!(trace["navigation"]["e_pred"], json!([2, 3]));
}

#[test]
fn flags_round_trip_into_the_snapshot() {
    let env = env();
    let t = ask_json(
        &env,
        &[
            "--te", "1", "--ta", "2", "--temperature", "0.3", "--chunk-size", "7", "--no-ocr", "--no-sampling",
            "--navigator-model", "nav-small", "--reasoner-model", "rsn-large",
        ],
    );
    let c = &t["config"];
    assert_eq!(c["navigator"]["t_e"], 1);
    assert_eq!(c["reasoner"]["t_a"], 2);
    assert_eq!(c["navigator"]["temperature"], 0.3);
    assert_eq!(c["reasoner"]["temperature"], 0.3);
    assert_eq!(c["navigator"]["chunk_size"], 7);
    assert_eq!(c["ablations"]["no_ocr"], true);
    assert_eq!(c["ablations"]["no_sampling"], true);
    assert_eq!(c["navigator_gateway"]["model_name"], "nav-small");
    assert_eq!(c["reasoner_gateway"]["model_name"], "rsn-large");
    assert_eq!(t["navigation"]["samples"].as_array().unwrap().len(), 1);

    let t = ask_json(&env, &["--no-lens", "--no-reasoning"]);
    assert_eq!(t["config"]["ablations"]["no_lens"], true);
    assert_eq!(t["config"]["ablations"]["no_reasoning"], true);
    assert!(t.get("navigation").is_none());
    assert!(t.get("adjudication").is_none());

    let t = ask_json(&env, &["--oracle-pages", "1,4", "--ta", "4"]);
    assert_eq!(t["config"]["ablations"]["oracle_pages"], json!([1, 4]));
    assert_eq!(t["navigation"]["e_pred"], json!([1, 4]));
}

#[test]
fn config_file_with_flag_precedence() {
    let env = env();
    let cfg = env.dir.path().join("doclens.toml");
    std::fs::write(&cfg, "[navigator]\nt_e = 3\nchunk_size = 9\n\n[reasoner]\nt_a = 3\n").unwrap();
    let cfg = cfg.display().to_string();
    let t = ask_json(&env, &["--config", &cfg]);
    assert_eq!(t["config"]["navigator"]["t_e"], 3);
    assert_eq!(t["config"]["navigator"]["chunk_size"], 9);
    let t = ask_json(&env, &["--config", &cfg, "--te", "2"]);
    assert_eq!(t["config"]["navigator"]["t_e"], 2);
    assert_eq!(t["config"]["reasoner"]["t_a"], 3);
}

#[test]
fn usage_errors_exit_nonzero() {
    let env = env();
    let bundle = env.bundle.display().to_string();
    let bad = env.dir.path().join("bad.toml");
    std::fs::write(&bad, "[navigator\n").unwrap();
    let bad = bad.display().to_string();
    let cases: Vec<Vec<&str>> = vec![
        vec!["ask", &bundle, "-q", "q", "--te", "0"],
        vec!["ask", &bundle, "-q", "q", "--oracle-pages", "9"],
        vec!["ask", &bundle, "-q", "q", "--config", &bad],
        vec!["ask", &bundle, "-q", "q", "--bogus"],
        vec!["ask", &bundle],
        vec!["ask", "no/such/bundle", "-q", "q"],
        vec!["eval", "missing.jsonl"],
        vec!["sweep", "--param", "tx", "--values", "1"],
        vec!["replay", "../escape"],
    ];
    for args in cases {
        let out = env.run(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", stderr(&out));
        assert!(!stderr(&out).is_empty());
    }
}

#[test]
fn eval_oracle_pages_needs_gold() {
    let env = env();
    let records = env.path("records.jsonl");
    let raw = std::fs::read_to_string(&records).unwrap();
    std::fs::write(&records, raw.replace(r#""evidence_pages":[2,4],"#, "")).unwrap();
    let out = env.run(&["eval", &records, "--oracle-pages", "--parallelism", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("gold"), "{}", stderr(&out));
}

fn eval_run(env: &Env, extra: &[&str]) -> String {
    let records = env.path("records.jsonl");
    let mut args = vec!["eval", records.as_str(), "--parallelism", "1", "--te", "4", "--ta", "4"];
    args.extend_from_slice(extra);
    let out = env.run(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("| ALL |") || text.contains("ALL"), "{text}");
    let line = text.lines().find(|l| l.starts_with("run ")).unwrap();
    line.split_whitespace().nth(1).unwrap().to_string()
}

#[test]
fn eval_replay_and_sweep() {
    let env = env();
    let run_id = eval_run(&env, &[]);
    let run_dir = env.dir.path().join("data/store/runs").join(&run_id);
    for f in ["report.json", "report.md", "run.json", "judgments.json", "records.jsonl"] {
        assert!(run_dir.join(f).is_file(), "{f}");
    }
    let report: Value = serde_json::from_str(&std::fs::read_to_string(run_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["accuracy"], 0.5);
    assert_eq!(report["mode"], "full");

    let out = env.run(&["replay", &run_id]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("identical"));

    let out = env.run(&["sweep", "--param", "te", "--values", "1,2,4"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = stdout(&out);
    assert_eq!(table.lines().count(), 5, "{table}");
    let out = env.run(&["sweep", "--param", "te", "--values", "1,2,4", "--run", &run_id, "--json"]);
    let points: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(points[2]["mean_pages"], report["mean_retrieved_pages"]);
    assert_eq!(points[2]["page"], report["page"]);
    let out = env.run(&["sweep", "--param", "ta", "--values", "1,4", "--json"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let points: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(points[1]["adjudicated"], report["accuracy"]);
    let out = env.run(&["sweep", "--param", "te", "--values", "1,8"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));

    // A tampered trace makes replay disagree.
    let trace_path = run_dir.join("traces/a.json");
    let raw = std::fs::read_to_string(&trace_path).unwrap();
    std::fs::write(&trace_path, raw.replace("\"final_answer\": \"9\"", "\"final_answer\": \"10\"")).unwrap();
    let out = env.run(&["replay", &run_id]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("discrepancy a: score"), "{}", stdout(&out));
}

#[test]
fn eval_ablation_labels() {
    let env = env();
    let run_id = eval_run(&env, &["--no-lens", "--no-ocr"]);
    let report = env.dir.path().join("data/store/runs").join(&run_id).join("report.json");
    let report: Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(report["mode"], "no-lens+no-ocr");
    let run_id = eval_run(&env, &["--oracle-pages", "--out", &env.path("elsewhere")]);
    let report = env.dir.path().join("elsewhere/runs").join(&run_id).join("report.json");
    let report: Value = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(report["mode"], "oracle-pages");
    assert_eq!(report["page"]["f1"], 1.0);
}

#[test]
fn ingest_summarizes_bundle() {
    let env = env();
    let out = env.run(&["ingest", &env.bundle.display().to_string()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["doc_id"], "report");
    assert_eq!(v["pages"], 4);
    assert_eq!(v["elements"], 1);
}

fn http_get(addr: &str, path: &str) -> String {
    let mut s = std::net::TcpStream::connect(addr).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut out = String::new();
    s.read_to_string(&mut out).unwrap();
    out
}

#[test]
fn serve_answers_http() {
    let env = env();
    let mut child = env
        .cmd()
        .args(["serve", "--port", "0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on http://").unwrap().to_string();
    let resp = http_get(&addr, "/documents");
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.ends_with("[]"), "{resp}");
    assert!(Path::new(&env.path("data/documents")).is_dir());
}
