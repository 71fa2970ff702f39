use std::path::Path;
use std::sync::{Arc, Mutex};

use doclens_core::fixtures::{write_bundle_fixture, FixturePage};
use doclens_core::gateway::{Gateway, GatewayConfig, InflightLimiter, MockBackend, MockScript};
use doclens_core::store::{RunId, RunStore};
use doclens_core::tools::ToolBackendConfig;
use doclens_core::{load_document, Document, Pipeline, PipelineConfig, RunTrace, Stage, StageStatus};

fn nav(p: &str) -> String {
    format!(r#"{{"analysis":"a","located_pages":"{p}","prediction":"x"}}"#)
}

fn answer(p: &str) -> String {
    serde_json::json!({"analysis": "because", "prediction": p}).to_string()
}

fn bundle(dir: &Path, n: i64) -> Document {
    let mut pages = FixturePage::simple_set(n);
    pages[1].elements = vec![("table", [5.0, 5.0, 60.0, 40.0]), ("figure", [10.0, 50.0, 90.0, 120.0])];
    write_bundle_fixture(dir, "api", &pages);
    load_document(dir).unwrap()
}

fn navigator_script() -> MockScript {
    let mut s = MockScript::default();
    s.push("prompt:page_navigator", vec![vec![nav("[2]"), nav("[2, 3]"), nav("[1]")]]);
    s
}

fn reasoner_script() -> MockScript {
    let mut s = MockScript::default();
    s.push("prompt:answer_sampler", vec![vec![answer("5"), answer("6"), answer("5")]]);
    s.push("prompt:adjudicator", vec![vec![answer("5")]]);
    s
}

fn config(cache: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.navigator.t_e = 3;
    cfg.reasoner.t_a = 3;
    cfg.navigator_gateway = GatewayConfig {
        model_name: "small-navigator".into(),
        ..GatewayConfig::mock("nav.json")
    };
    cfg.reasoner_gateway = GatewayConfig {
        model_name: "large-reasoner".into(),
        ..GatewayConfig::mock("rsn.json")
    };
    cfg.tools = ToolBackendConfig {
        cache_dir: cache.to_path_buf(),
        ..Default::default()
    };
    cfg
}

fn gateway(backend: Arc<MockBackend>, cfg: &GatewayConfig) -> Gateway {
    Gateway::new(backend, cfg.clone(), Arc::new(InflightLimiter::unbounded()))
}

#[test]
fn hybrid_backbones_split_calls_by_stage() {
    let dir = tempfile::tempdir().unwrap();
    let doc = bundle(&dir.path().join("doc"), 4);
    let cfg = config(&dir.path().join("cache"));
    let nav_backend = Arc::new(MockBackend::new(navigator_script()));
    let rsn_backend = Arc::new(MockBackend::new(reasoner_script()));
    let pipeline = Pipeline::with_gateways(
        cfg.clone(),
        gateway(nav_backend.clone(), &cfg.navigator_gateway),
        gateway(rsn_backend.clone(), &cfg.reasoner_gateway),
    )
    .unwrap();
    let trace = pipeline.ask(&doc, "q1", "How many?", None, &()).unwrap();
    assert_eq!(trace.final_answer.as_deref(), Some("5"));
    assert_eq!(trace.navigation.as_ref().unwrap().e_pred, vec![1, 2, 3]);
    assert_eq!(trace.config["navigator_gateway"]["model_name"], "small-navigator");
    assert_eq!(trace.config["reasoner_gateway"]["model_name"], "large-reasoner");

    // Each backend only saw its own stage's requests.
    assert_eq!(nav_backend.calls().len(), 1);
    assert_eq!(rsn_backend.calls().len(), 2);
    let nav_fp = &trace.navigation.as_ref().unwrap().calls[0].fingerprint;
    assert_eq!(&nav_backend.calls()[0].fingerprint, nav_fp);
    assert!(trace.calls().iter().all(|c| !c.fingerprint.is_empty()));
}

#[test]
fn observer_sees_stages_in_order_with_data() {
    let dir = tempfile::tempdir().unwrap();
    let doc = bundle(&dir.path().join("doc"), 4);
    let cfg = config(&dir.path().join("cache"));
    let pipeline = Pipeline::with_gateways(
        cfg.clone(),
        gateway(Arc::new(MockBackend::new(navigator_script())), &cfg.navigator_gateway),
        gateway(Arc::new(MockBackend::new(reasoner_script())), &cfg.reasoner_gateway),
    )
    .unwrap();
    let seen: Mutex<Vec<(Stage, StageStatus, bool)>> = Mutex::new(Vec::new());
    let observer = |stage: Stage, status: StageStatus, partial: &RunTrace| {
        let has_data = match stage {
            Stage::Navigation => partial.navigation.is_some(),
            Stage::Localization => partial.evidence.is_some(),
            Stage::Sampling => partial.sampling.is_some(),
            Stage::Adjudication => partial.adjudication.is_some(),
            Stage::Ingest => false,
        };
        seen.lock().unwrap().push((stage, status, has_data));
    };
    pipeline.ask(&doc, "q1", "How many?", None, &observer).unwrap();
    let seen = seen.into_inner().unwrap();
    let expected: Vec<(Stage, StageStatus, bool)> = Stage::ALL
        .iter()
        .flat_map(|s| [(*s, StageStatus::Started, false), (*s, StageStatus::Completed, true)])
        .collect();
    assert_eq!(seen, expected);
}

#[test]
fn page_parallelism_does_not_change_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    let doc = bundle(&dir.path().join("doc"), 6);
    let mut outputs = Vec::new();
    for parallelism in [1, 4] {
        let mut cfg = config(&dir.path().join("cache"));
        cfg.page_parallelism = parallelism;
        let pipeline = Pipeline::with_gateways(
            cfg.clone(),
            gateway(Arc::new(MockBackend::new(navigator_script())), &cfg.navigator_gateway),
            gateway(Arc::new(MockBackend::new(reasoner_script())), &cfg.reasoner_gateway),
        )
        .unwrap();
        let mut t = pipeline.ask(&doc, "q1", "How many?", None, &()).unwrap();
        t.config = serde_json::Value::Null;
        outputs.push(t.to_json_pretty());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn stored_trace_replays_through_its_blobs() {
    let dir = tempfile::tempdir().unwrap();
    let doc = bundle(&dir.path().join("doc"), 4);
    let cfg = config(&dir.path().join("cache"));
    let pipeline = Pipeline::with_gateways(
        cfg.clone(),
        gateway(Arc::new(MockBackend::new(navigator_script())), &cfg.navigator_gateway),
        gateway(Arc::new(MockBackend::new(reasoner_script())), &cfg.reasoner_gateway),
    )
    .unwrap();
    let original = pipeline.ask(&doc, "q1", "How many?", None, &()).unwrap();

    let store = RunStore::new(dir.path().join("store"));
    let run = RunId::generate();
    store.save_trace(&run, &original).unwrap();
    let loaded = store.load_run(&run).unwrap();
    // Crop pixels are not serialized, so compare the persisted form.
    assert_eq!(loaded.len(), 1);
    assert_eq!(loaded[0].to_json_pretty(), original.to_json_pretty());
    for fp in original.responses().keys() {
        assert!(store.root().join("blobs").join(format!("{fp}.json")).is_file());
    }

    // One exact-fingerprint script drives both stages and reproduces the bytes.
    let script = Arc::new(MockBackend::new(RunTrace::to_mock_script(&loaded)));
    let replay = Pipeline::with_gateways(
        cfg.clone(),
        gateway(script.clone(), &cfg.navigator_gateway),
        gateway(script, &cfg.reasoner_gateway),
    )
    .unwrap();
    let again = replay.ask(&doc, "q1", "How many?", None, &()).unwrap();
    assert_eq!(again.to_json_pretty(), original.to_json_pretty());
}

#[test]
fn rewritten_bundle_loads_identically() {
    let dir = tempfile::tempdir().unwrap();
    let doc = bundle(&dir.path().join("doc"), 3);
    doc.write_bundle(&dir.path().join("copy")).unwrap();
    let copy = load_document(dir.path().join("copy")).unwrap();
    assert!(copy.same_content(&doc));
    assert_eq!(copy.manifest_json(), doc.manifest_json());
}

#[test]
fn navigator_failure_is_stage_tagged() {
    let dir = tempfile::tempdir().unwrap();
    let doc = bundle(&dir.path().join("doc"), 4);
    let cfg = config(&dir.path().join("cache"));
    let mut garbage = MockScript::default();
    garbage.push("prompt:page_navigator", vec![vec!["nope".into(); 3]]);
    let pipeline = Pipeline::with_gateways(
        cfg.clone(),
        gateway(Arc::new(MockBackend::new(garbage)), &cfg.navigator_gateway),
        gateway(Arc::new(MockBackend::new(reasoner_script())), &cfg.reasoner_gateway),
    )
    .unwrap();
    let failure = pipeline.ask(&doc, "q1", "How many?", None, &()).unwrap_err();
    assert_eq!(failure.stage, Stage::Navigation);
    assert_eq!(failure.trace.error.as_ref().unwrap().stage, Stage::Navigation);
    assert_eq!(failure.trace.stage_status(Stage::Navigation), Some(StageStatus::Failed));
    assert!(failure.trace.sampling.is_none());
}
