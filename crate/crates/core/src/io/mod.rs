//! On-disk formats: rollout traces as JSON lines, metric streams as CSV.
//!
//! Floats are written in shortest round-trip decimal form, so reading a file
//! back reproduces every value bit for bit. Strict trace files additionally
//! carry the raw IEEE-754 bits of each float as hex strings.

mod metrics;
mod traces;

pub use metrics::{
    append_metrics, append_metrics_jsonl, read_metrics, write_metrics, MetricsRow, METRICS_SCHEMA,
    NUM_BANDS,
};
pub use traces::{
    read_trace_file, read_traces, write_traces, write_traces_with, TraceFile, TraceHeader,
    TraceRecordLine, TRACE_SCHEMA,
};
