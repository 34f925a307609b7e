//! Prefill cost model and toy-scale latency measurements for full-context,
//! standard RAG and pooled-state (INTRA) answering.

pub mod cost;
pub mod fit;
pub mod timing;

pub use cost::{cost_model, BenchMode, Cost, CostParams};
pub use fit::{polyfit, PolyFit};
pub use timing::{
    measure, measure_scoring, measure_throughput, measure_ttft, random_workload, sweep_chunk_len,
    sweep_csv, sweep_k, write_sweep_csv, BenchResult, BenchSetup, Dispersion, HostDescriptor,
    MeasureOptions, SweepAxis, SweepRow, SWEEP_HEADER,
};
