//! Exact retrieval, method comparison and latency measurement.

mod bench;
mod cascade;
mod eval;
mod index;

pub use bench::{bench_latency, median, BenchReport, MethodLatency, MIN_REPEATS, WARMUP_REPEATS};
pub use cascade::{cascaded_pipeline, corrupt_tokens, query_embedding, Method};
pub use eval::{best_threshold_accuracy, eval_suite, format_table, topk_accuracy, EvalReport, LatencyStats, TaskScores};
pub use index::{build_index, RetrievalIndex, INDEX_BLOB, INDEX_FORMAT, INDEX_MANIFEST};
