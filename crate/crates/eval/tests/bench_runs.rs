use std::path::{Path, PathBuf};
use std::sync::Arc;

use doclens_core::gateway::{Gateway, GatewayConfig, InflightLimiter, MockBackend, MockScript};
use doclens_core::store::{RunId, RunStore};
use doclens_core::tools::ToolBackendConfig;
use doclens_core::trace::{RunTrace, Stage};
use doclens_core::PipelineConfig;
use doclens_eval::bench::{persist_run, recompute_stored, run_benchmark, Ablation, BenchError, BenchOptions};
use doclens_eval::records::{load_records, parse_records, to_jsonl, BenchmarkRecord};
use doclens_eval::report::ReportError;
use doclens_eval::scoring::{ScoreMode, Scorer};
use proptest::prelude::*;

fn golden() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden")
}

fn answer(analysis: &str, prediction: &str) -> String {
    serde_json::json!({"analysis": analysis, "prediction": prediction}).to_string()
}

fn script() -> MockScript {
    let nav = |p: &str| format!(r#"{{"analysis":"a","located_pages":"{p}","prediction":"x"}}"#);
    // One identical round per question, so call order does not matter.
    let rounds = |r: Vec<String>| vec![r; 2];
    let mut s = MockScript::default();
    s.push("prompt:page_navigator", rounds(vec![nav("[2]"), nav("[4]"), nav("[2]")]));
    s.push(
        "prompt:answer_sampler",
        rounds(vec![answer("a", "14"), answer("b", "14"), answer("c", "7")]),
    );
    s.push("prompt:adjudicator", rounds(vec![answer("majority", "14")]));
    s.push(
        "prompt:answer_judge",
        rounds(vec![r#"{"score": 1, "reasoning": "same value"}"#.to_string()]),
    );
    s
}

struct Fixture {
    dir: tempfile::TempDir,
    cfg: PipelineConfig,
    records: Vec<BenchmarkRecord>,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let script_path = dir.path().join("script.json");
    std::fs::write(&script_path, script().to_json_pretty()).unwrap();
    let mut cfg = PipelineConfig::mock(&script_path);
    cfg.navigator.t_e = 3;
    cfg.reasoner.t_a = 3;
    cfg.tools = ToolBackendConfig {
        cache_dir: dir.path().join("cache"),
        ..Default::default()
    };
    let mut records = load_records(&golden().join("records.jsonl")).unwrap();
    let mut second = records[0].clone();
    second.question_id = "golden-2".into();
    second.answer = "7".into();
    second.evidence_pages = vec![3];
    second.evidence_boxes = None;
    second.sources = vec!["TXT".into()];
    records.push(second);
    Fixture { dir, cfg, records }
}

fn opts(scorer: Scorer) -> BenchOptions {
    BenchOptions {
        base_dir: golden(),
        parallelism: 2,
        scorer,
    }
}

#[test]
fn full_run_scores_and_persists() {
    let f = fixture();
    let run = run_benchmark(&f.records, &f.cfg, Ablation::Full, &opts(Scorer::ExactNorm)).unwrap();
    assert_eq!(run.report.n_records, 2);
    assert_eq!(run.report.n_errors, 0);
    assert_eq!(run.report.accuracy, 0.5);
    assert_eq!(run.report.per_source["CHA"].accuracy, 1.0);
    assert_eq!(run.report.per_source["TXT"].accuracy, 0.0);
    let first = &run.report.records[0];
    assert_eq!(first.retrieved_pages, vec![2, 4]);
    assert_eq!(first.page_metrics.f1, 1.0);
    // Page 2 has a chart and a table, page 4 a figure; two of three match gold.
    let el = first.element_metrics.unwrap();
    assert_eq!((el.tp, el.fp, el.fn_), (2, 1, 0));
    assert!(run.report.records[1].element_metrics.is_none());

    let store = RunStore::new(f.dir.path().join("store"));
    let id = RunId::generate();
    persist_run(&store, &id, &run).unwrap();
    let again = recompute_stored(&store, &id, &f.records).unwrap();
    assert!(again.identical);
    assert!(again.discrepancies.is_empty());
    assert_eq!(again.report, run.report);
    assert!(store.run_dir(&id).join("report.md").is_file());
}

#[test]
fn truncated_trace_is_rejected() {
    let f = fixture();
    let run = run_benchmark(&f.records, &f.cfg, Ablation::Full, &opts(Scorer::ExactNorm)).unwrap();
    let store = RunStore::new(f.dir.path().join("store"));
    let id = RunId::generate();
    persist_run(&store, &id, &run).unwrap();

    let mut t = store.load_trace(&id, "golden-2").unwrap();
    t.final_answer = None;
    t.adjudication = None;
    store.save_trace(&id, &t).unwrap();
    match recompute_stored(&store, &id, &f.records) {
        Err(BenchError::Report(ReportError::TraceIncomplete { question_id, .. })) => {
            assert_eq!(question_id, "golden-2")
        }
        other => panic!("expected TraceIncomplete, got {other:?}"),
    }

    std::fs::remove_file(store.trace_path(&id, "golden-2").unwrap()).unwrap();
    assert!(matches!(
        recompute_stored(&store, &id, &f.records),
        Err(BenchError::Report(ReportError::TraceIncomplete { .. }))
    ));
}

#[test]
fn edited_trace_shows_discrepancies() {
    let f = fixture();
    let run = run_benchmark(&f.records, &f.cfg, Ablation::Full, &opts(Scorer::ExactNorm)).unwrap();
    let store = RunStore::new(f.dir.path().join("store"));
    let id = RunId::generate();
    persist_run(&store, &id, &run).unwrap();

    let mut t = store.load_trace(&id, "golden-1").unwrap();
    t.evidence.as_mut().unwrap().items.truncate(1);
    t.final_answer = Some("15".into());
    store.save_trace(&id, &t).unwrap();
    let again = recompute_stored(&store, &id, &f.records).unwrap();
    assert!(!again.identical);
    assert_eq!(again.discrepancies.len(), 1);
    let d = &again.discrepancies[0];
    assert_eq!(d.question_id, "golden-1");
    for field in ["score", "retrieved_pages", "page_metrics", "final_answer"] {
        assert!(d.fields.iter().any(|x| x == field), "{field} missing from {:?}", d.fields);
    }
}

#[test]
fn judge_verdicts_are_stored_and_reused() {
    let f = fixture();
    let gw = Gateway::new(
        Arc::new(MockBackend::new(script())),
        GatewayConfig::mock("unused"),
        Arc::new(InflightLimiter::unbounded()),
    );
    let run = run_benchmark(&f.records, &f.cfg, Ablation::Full, &opts(Scorer::LlmJudge(gw))).unwrap();
    assert_eq!(run.meta.scoring, ScoreMode::LlmJudge);
    assert_eq!(run.judgments.len(), 2);
    assert_eq!(run.report.accuracy, 1.0);

    let store = RunStore::new(f.dir.path().join("store"));
    let id = RunId::generate();
    persist_run(&store, &id, &run).unwrap();
    // No gateway is involved in recomputation.
    let again = recompute_stored(&store, &id, &f.records).unwrap();
    assert!(again.identical);

    std::fs::write(store.run_dir(&id).join("judgments.json"), "{}").unwrap();
    assert!(recompute_stored(&store, &id, &f.records).is_err());
}

#[test]
fn every_ablation_runs() {
    let f = fixture();
    for ablation in Ablation::ALL {
        let run = run_benchmark(&f.records, &f.cfg, ablation, &opts(Scorer::ExactNorm)).unwrap();
        assert_eq!(run.report.n_errors, 0, "{ablation:?}");
        assert_eq!(run.report.mode, ablation.as_str());
        if ablation == Ablation::OraclePages {
            assert_eq!(run.report.page.f1, 1.0);
        }
        if ablation == Ablation::NoLens {
            assert_eq!(run.report.mean_retrieved_pages, 5.0);
        }
    }
}

#[test]
fn oracle_mode_needs_gold_pages() {
    let mut f = fixture();
    f.records[1].evidence_pages.clear();
    let err = run_benchmark(&f.records, &f.cfg, Ablation::OraclePages, &opts(Scorer::ExactNorm)).unwrap_err();
    assert!(matches!(err, BenchError::MissingGoldPages(id) if id == "golden-2"));
}

#[test]
fn missing_document_becomes_ingest_error() {
    let mut f = fixture();
    f.records[1].doc = "no-such-bundle".into();
    let run = run_benchmark(&f.records, &f.cfg, Ablation::Full, &opts(Scorer::ExactNorm)).unwrap();
    assert_eq!(run.report.n_errors, 1);
    let t: &RunTrace = run.traces.iter().find(|t| t.question_id == "golden-2").unwrap();
    assert_eq!(t.error.as_ref().unwrap().stage, Stage::Ingest);
    assert_eq!(run.report.records[1].score, 0.0);
}

fn record_strategy() -> impl Strategy<Value = BenchmarkRecord> {
    (
        "[a-z0-9-]{1,12}",
        "[ -~]{0,40}",
        "[ -~]{0,20}",
        proptest::collection::btree_set(1u32..50, 0..6),
        proptest::collection::vec("[A-Z]{3}", 0..3),
        any::<bool>(),
    )
        .prop_map(|(id, question, answer, pages, sources, answerable)| BenchmarkRecord {
            question_id: id,
            doc: "docs/x".into(),
            question,
            answer,
            evidence_pages: pages.into_iter().collect(),
            evidence_boxes: None,
            sources,
            answerable,
        })
}

proptest! {
    #[test]
    fn records_round_trip_through_jsonl(recs in proptest::collection::vec(record_strategy(), 0..6)) {
        let mut seen = std::collections::BTreeSet::new();
        let recs: Vec<_> = recs.into_iter().filter(|r| seen.insert(r.question_id.clone())).collect();
        let back = parse_records(&to_jsonl(&recs), "mem").unwrap();
        prop_assert_eq!(back, recs);
    }
}
