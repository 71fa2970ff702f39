use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use doclens_core::document::load_document;
use doclens_core::gateway::{Gateway, GatewayConfig, InflightLimiter};
use doclens_core::store::{RunId, RunStore};
use doclens_core::tools::ParsingTools;
use doclens_core::{Pipeline, PipelineConfig};
use doclens_eval::bench::{
    persist_run, recompute_stored, run_benchmark, Ablation, BenchError, BenchOptions, RunMeta, JUDGMENTS_FILE,
    RUN_META_FILE,
};
use doclens_eval::records::{load_records, parse_records, to_jsonl, BenchmarkRecord};
use doclens_eval::scoring::{Judgment, ScoreMode, Scorer};
use doclens_eval::sweep::{sweep, SweepInputs, SweepParam, SweepPoint};

use crate::{AskArgs, Cli, Command, EvalArgs, ReplayArgs, ServeArgs, SweepArgs};

/// Stored beside each benchmark run so `replay` and `sweep` need no inputs.
const RECORDS_FILE: &str = "records.jsonl";

/// Bad input that clap cannot detect; exits with the usage code.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

struct Env {
    base: PipelineConfig,
    data_dir: PathBuf,
}

fn base_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path).map_err(|e| usage(e.to_string()))?,
        None => PipelineConfig::default(),
    };
    if let Some(script) = &cli.mock_script {
        if !script.is_file() {
            return Err(usage(format!("mock script {} not found", script.display())));
        }
        cfg.navigator_gateway = GatewayConfig::mock(script);
        cfg.reasoner_gateway = GatewayConfig::mock(script);
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let ctx = Env {
        base: base_config(&cli)?,
        data_dir: cli.data_dir.clone(),
    };
    match cli.command {
        Command::Ingest { bundle } => ingest(&ctx, &bundle),
        Command::Ask(args) => ask(&ctx, args),
        Command::Eval(args) => eval(&ctx, args),
        Command::Sweep(args) => sweep_cmd(&ctx, args),
        Command::Serve(args) => serve(&ctx, args),
        Command::Replay(args) => replay(&ctx, args),
    }
}

impl Env {
    fn store(&self, explicit: Option<&Path>) -> RunStore {
        RunStore::new(explicit.map_or_else(|| self.data_dir.join("store"), Path::to_path_buf))
    }
}

fn ingest(ctx: &Env, bundle: &Path) -> Result<ExitCode> {
    let doc = load_document(bundle).map_err(|e| usage(format!("invalid bundle: {e}")))?;
    let tools = ParsingTools::new(ctx.base.tools.clone())?;
    let mut elements = 0;
    let mut ocr_missing = Vec::new();
    for page in doc.pages() {
        if let Err(e) = tools.ocr_page(&doc, page) {
            eprintln!("warning: page {}: {e}", page.index);
            ocr_missing.push(page.index);
        }
        elements += tools
            .detect_layout(&doc, page)
            .with_context(|| format!("layout for page {}", page.index))?
            .elements
            .len();
    }
    let summary = serde_json::json!({
        "doc_id": doc.doc_id,
        "pages": doc.page_count(),
        "elements": elements,
        "ocr_missing": ocr_missing,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(ExitCode::SUCCESS)
}

fn ask(ctx: &Env, args: AskArgs) -> Result<ExitCode> {
    let mut overrides = args.flags.overrides();
    overrides.oracle_pages = args.oracle_pages.clone();
    let cfg = overrides.applied_to(&ctx.base).map_err(|e| usage(e.to_string()))?;
    let doc = load_document(&args.bundle).map_err(|e| usage(format!("invalid bundle: {e}")))?;
    if let Some(bad) = args.oracle_pages.iter().flatten().find(|p| **p > doc.page_count()) {
        return Err(usage(format!("oracle page {bad} outside 1..={}", doc.page_count())));
    }
    let pipeline = Pipeline::new(cfg)?;
    let run_id = RunId::generate();
    let question_id = run_id.to_string();
    let (trace, ok) = match pipeline.ask(&doc, &question_id, &args.question, None, &()) {
        Ok(t) => (t, true),
        Err(failure) => {
            eprintln!("error: {failure}");
            (*failure.trace, false)
        }
    };
    let store = ctx.store(None);
    let path = store.save_trace(&run_id, &trace)?;
    if args.json {
        print!("{}", trace.to_json_pretty());
    } else if let Some(answer) = &trace.final_answer {
        println!("{answer}");
    }
    eprintln!("run {run_id} saved to {}", path.display());
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn judge_gateway(cfg: &PipelineConfig, model: Option<&str>) -> Result<Gateway> {
    let mut gw = cfg.reasoner_gateway.clone();
    if let Some(m) = model {
        gw.model_name = m.to_string();
    }
    Ok(Gateway::from_config(&gw, Arc::new(InflightLimiter::new(cfg.max_inflight)))?)
}

fn scorer_for(mode: ScoreMode, cfg: &PipelineConfig, model: Option<&str>) -> Result<Scorer> {
    Ok(match mode {
        ScoreMode::ExactNorm => Scorer::ExactNorm,
        ScoreMode::LlmJudge => Scorer::LlmJudge(judge_gateway(cfg, model)?),
    })
}

fn eval(ctx: &Env, args: EvalArgs) -> Result<ExitCode> {
    let records = load_records(&args.records).map_err(|e| usage(e.to_string()))?;
    let cfg = args
        .flags
        .overrides()
        .applied_to(&ctx.base)
        .map_err(|e| usage(e.to_string()))?;
    let mut modes = args.flags.ablations();
    if args.oracle_pages {
        modes.push(Ablation::OraclePages);
    }
    let ablation = match (args.ablation, modes.as_slice()) {
        (Some(a), _) => a,
        (None, []) => Ablation::Full,
        (None, [first, ..]) => *first,
    };
    if args.oracle_pages && ablation != Ablation::OraclePages {
        return Err(usage("--oracle-pages conflicts with the selected ablation"));
    }
    if args.parallelism == 0 {
        return Err(usage("--parallelism must be >= 1"));
    }
    let base_dir = args
        .records
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let opts = BenchOptions {
        base_dir: base_dir.clone(),
        parallelism: args.parallelism,
        scorer: scorer_for(args.scoring, &cfg, args.judge_model.as_deref())?,
    };
    let mut run = match run_benchmark(&records, &cfg, ablation, &opts) {
        Err(e @ BenchError::MissingGoldPages(_)) => return Err(usage(e.to_string())),
        other => other?,
    };
    if modes.len() > 1 {
        let label = modes.iter().map(|m| m.as_str()).collect::<Vec<_>>().join("+");
        run.meta.mode = label.clone();
        run.report.mode = label;
    }

    let store = ctx.store(args.out.as_deref());
    let run_id = RunId::generate();
    persist_run(&store, &run_id, &run)?;
    // Stored with absolute document paths so replay works from anywhere.
    let absolute: Vec<BenchmarkRecord> = records
        .iter()
        .map(|r| BenchmarkRecord {
            doc: std::path::absolute(r.resolve_doc(&base_dir)).unwrap_or_else(|_| r.resolve_doc(&base_dir)),
            ..r.clone()
        })
        .collect();
    store.save_artifact(&run_id, RECORDS_FILE, to_jsonl(&absolute).as_bytes())?;
    print!("{}", run.report.to_markdown());
    println!("run {run_id} saved to {}", store.run_dir(&run_id).display());
    Ok(ExitCode::SUCCESS)
}

fn stored_records(store: &RunStore, run_id: &RunId, explicit: Option<&Path>) -> Result<Vec<BenchmarkRecord>> {
    match explicit {
        Some(path) => load_records(path).map_err(|e| usage(e.to_string())),
        None => {
            let path = store.run_dir(run_id).join(RECORDS_FILE);
            let raw = std::fs::read_to_string(&path)
                .with_context(|| format!("run {run_id} has no stored records; pass --records"))?;
            Ok(parse_records(&raw, &path.display().to_string())?)
        }
    }
}

fn parse_run_id(store: &RunStore, raw: Option<&str>) -> Result<RunId> {
    let id = match raw {
        Some(r) => r.parse().map_err(|_| usage(format!("invalid run id {r:?}")))?,
        None => store
            .list_runs()?
            .into_iter()
            .rfind(|id| store.run_dir(id).join(RUN_META_FILE).is_file())
            .ok_or_else(|| usage("no stored benchmark runs"))?,
    };
    if !store.run_dir(&id).is_dir() {
        return Err(usage(format!("unknown run {id}")));
    }
    Ok(id)
}

fn replay(ctx: &Env, args: ReplayArgs) -> Result<ExitCode> {
    let store = ctx.store(args.store.as_deref());
    let run_id = parse_run_id(&store, Some(&args.run_id))?;
    let records = stored_records(&store, &run_id, args.records.as_deref())?;
    let result = recompute_stored(&store, &run_id, &records)?;
    print!("{}", result.report.to_markdown());
    if result.identical {
        println!("report identical to stored run {run_id}");
        return Ok(ExitCode::SUCCESS);
    }
    for d in &result.discrepancies {
        println!("discrepancy {}: {}", d.question_id, d.fields.join(", "));
    }
    println!("report differs from stored run {run_id}");
    Ok(ExitCode::FAILURE)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let raw = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
    serde_json::from_str(&raw).with_context(|| path.display().to_string())
}

fn sweep_cmd(ctx: &Env, args: SweepArgs) -> Result<ExitCode> {
    let store = ctx.store(args.store.as_deref());
    let run_id = parse_run_id(&store, args.run.as_deref())?;
    let dir = store.run_dir(&run_id);
    let meta: RunMeta = read_json(&dir.join(RUN_META_FILE))?;
    let judgments: BTreeMap<String, Judgment> = read_json(&dir.join(JUDGMENTS_FILE))?;
    let records = stored_records(&store, &run_id, None)?;
    let traces = store.load_run(&run_id)?;

    let scorer = scorer_for(meta.scoring, &ctx.base, None)?;
    let adjudicator = match args.param {
        SweepParam::Ta => Some(judge_gateway(&ctx.base, None)?),
        SweepParam::Te => None,
    };
    let reasoner = ctx.base.reasoner.clone();
    let inputs = SweepInputs {
        records: &records,
        traces: &traces,
        judgments: &judgments,
        scoring: meta.scoring,
        scorer: &scorer,
        adjudicator: adjudicator.as_ref().map(|g| (g, &reasoner)),
    };
    let points = sweep(&inputs, args.param, &args.values).map_err(|e| match e {
        doclens_eval::sweep::SweepError::BadValues | doclens_eval::sweep::SweepError::BeyondRun { .. } => {
            usage(e.to_string())
        }
        other => other.into(),
    })?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&points)?);
    } else {
        print!("{}", sweep_table(args.param, &points));
    }
    Ok(ExitCode::SUCCESS)
}

fn sweep_table(param: SweepParam, points: &[SweepPoint]) -> String {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    let mut out = String::new();
    match param {
        SweepParam::Te => {
            out.push_str("| T_e | precision | recall | f1 | mean pages |\n|---|---|---|---|---|\n");
            for p in points {
                out.push_str(&format!(
                    "| {} | {} | {} | {} | {} |\n",
                    p.value,
                    fmt(p.page.map(|m| m.precision)),
                    fmt(p.page.map(|m| m.recall)),
                    fmt(p.page.map(|m| m.f1)),
                    fmt(p.mean_pages),
                ));
            }
        }
        SweepParam::Ta => {
            out.push_str("| T_a | best-of-N | adjudicated |\n|---|---|---|\n");
            for p in points {
                out.push_str(&format!("| {} | {} | {} |\n", p.value, fmt(p.best_of_n), fmt(p.adjudicated)));
            }
        }
    }
    out
}

fn serve(ctx: &Env, args: ServeArgs) -> Result<ExitCode> {
    let state = doclens_server::AppState::new(doclens_server::ServerConfig {
        data_dir: ctx.data_dir.clone(),
        ui_dir: args.ui_dir,
        pipeline: ctx.base.clone(),
    })
    .map_err(|e| usage(e.message))?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((args.host.as_str(), args.port))
            .await
            .with_context(|| format!("binding {}:{}", args.host, args.port))?;
        println!("listening on http://{}", listener.local_addr()?);
        use std::io::Write;
        std::io::stdout().flush()?;
        doclens_server::serve(listener, state).await?;
        anyhow::Ok(())
    })?;
    Ok(ExitCode::SUCCESS)
}
