//! Inference latency against sequence length.

mod report;
mod transformer;

pub use report::{
    scaling_report, summary, sweep, time_inference, to_csv, BenchOptions, BenchReport, LengthTiming, Timing,
};
pub use transformer::{attention_head, attention_weights, TransformerBaseline, TransformerConfig};
