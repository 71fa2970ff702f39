//! Evaluation harness: retrieval metrics, answer scoring, benchmark runs
//! under ablations, sample-count sweeps and report recomputation.

pub mod bench;
pub mod metrics;
pub mod records;
pub mod report;
pub mod scoring;
pub mod sweep;

pub use bench::{run_benchmark, Ablation, BenchOptions, BenchmarkRun};
pub use metrics::{iou, match_elements, page_metrics, PageMetrics};
pub use records::{load_records, BenchmarkRecord};
pub use report::{build_report, Report};
