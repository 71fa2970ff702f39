mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use doclens_core::config::ConfigOverrides;
use doclens_eval::bench::Ablation;
use doclens_eval::scoring::ScoreMode;
use doclens_eval::sweep::SweepParam;

#[derive(Debug, Parser)]
#[command(name = "doclens", version, about = "Question answering over long visual documents")]
pub struct Cli {
    /// Pipeline configuration file (TOML). Flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Answer every model call from this mock script instead of a live backend.
    #[arg(long, global = true)]
    pub mock_script: Option<PathBuf>,
    /// Directory for run storage and uploaded documents.
    #[arg(long, global = true, env = "DOCLENS_DATA_DIR", default_value = "doclens-data")]
    pub data_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate a bundle and precompute its OCR and layout caches.
    Ingest { bundle: PathBuf },
    /// Answer one question about a document bundle.
    Ask(AskArgs),
    /// Run a benchmark file and write the report.
    Eval(EvalArgs),
    /// Metrics at smaller sample counts, recomputed from a stored maximal run.
    Sweep(SweepArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
    /// Recompute a stored run's report from its traces.
    Replay(ReplayArgs),
}

/// Flags shared by `ask` and `eval`.
#[derive(Debug, Clone, Default, Args)]
pub struct PipelineFlags {
    /// Navigator samples per question (or per chunk).
    #[arg(long)]
    pub te: Option<u32>,
    /// Candidate answers per question.
    #[arg(long)]
    pub ta: Option<u32>,
    /// Sampling temperature for navigator and answer sampler.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Pages per navigator request once chunking applies.
    #[arg(long)]
    pub chunk_size: Option<u32>,
    #[arg(long)]
    pub no_lens: bool,
    #[arg(long)]
    pub no_reasoning: bool,
    #[arg(long)]
    pub no_sampling: bool,
    #[arg(long)]
    pub no_ocr: bool,
    #[arg(long)]
    pub navigator_model: Option<String>,
    #[arg(long)]
    pub reasoner_model: Option<String>,
}

impl PipelineFlags {
    pub fn overrides(&self) -> ConfigOverrides {
        let flag = |b: bool| b.then_some(true);
        ConfigOverrides {
            te: self.te,
            ta: self.ta,
            temperature: self.temperature,
            chunk_size: self.chunk_size,
            no_lens: flag(self.no_lens),
            no_reasoning: flag(self.no_reasoning),
            no_sampling: flag(self.no_sampling),
            no_ocr: flag(self.no_ocr),
            oracle_pages: None,
            navigator_model: self.navigator_model.clone(),
            reasoner_model: self.reasoner_model.clone(),
        }
    }

    /// Ablation modes named by the boolean flags, in a fixed order.
    pub fn ablations(&self) -> Vec<Ablation> {
        [
            (self.no_lens, Ablation::NoLens),
            (self.no_reasoning, Ablation::NoReasoning),
            (self.no_sampling, Ablation::NoSampling),
            (self.no_ocr, Ablation::NoOcr),
        ]
        .into_iter()
        .filter_map(|(on, a)| on.then_some(a))
        .collect()
    }
}

#[derive(Debug, Args)]
pub struct AskArgs {
    pub bundle: PathBuf,
    #[arg(short, long)]
    pub question: String,
    #[command(flatten)]
    pub flags: PipelineFlags,
    /// Skip navigation and use these pages, e.g. `2,4,7`.
    #[arg(long, value_delimiter = ',')]
    pub oracle_pages: Option<Vec<u32>>,
    /// Print the full trace as JSON instead of the answer.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub records: PathBuf,
    #[command(flatten)]
    pub flags: PipelineFlags,
    /// Use each record's gold evidence pages instead of navigation.
    #[arg(long)]
    pub oracle_pages: bool,
    /// Ablation mode; the boolean flags select one too.
    #[arg(long)]
    pub ablation: Option<Ablation>,
    #[arg(long, default_value = "exact_norm")]
    pub scoring: ScoreMode,
    /// Judge model for `llm_judge` scoring; defaults to the reasoner model.
    #[arg(long)]
    pub judge_model: Option<String>,
    /// Run store root. Defaults to `<data-dir>/store`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Questions processed concurrently.
    #[arg(long, default_value_t = 4)]
    pub parallelism: usize,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub param: SweepParam,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<u32>,
    /// Stored run to sweep; defaults to the most recent one.
    #[arg(long)]
    pub run: Option<String>,
    /// Run store root. Defaults to `<data-dir>/store`.
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Static UI assets served under /ui.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub run_id: String,
    /// Run store root. Defaults to `<data-dir>/store`.
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Records file; defaults to the copy stored with the run.
    #[arg(long)]
    pub records: Option<PathBuf>,
}

/// Exit code for invalid input that clap cannot catch.
const USAGE_EXIT: u8 = 2;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            if e.downcast_ref::<commands::UsageError>().is_some() {
                eprintln!("usage error: {e:#}");
                ExitCode::from(USAGE_EXIT)
            } else {
                eprintln!("error: {e:#}");
                ExitCode::FAILURE
            }
        }
    }
}
