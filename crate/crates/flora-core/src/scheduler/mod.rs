//! Continuous-batching serving simulator with per-request adapter routing,
//! a static-batching baseline, workload generation and throughput/latency
//! accounting.

mod sim;
mod sweep;
mod workload;

pub use sim::{
    run_continuous, run_static, Completion, CostSource, OccupancySample, Rejection, SampleEvent,
    ServeConfig, ServeMetrics, ServeStrategy,
};
pub use sweep::{
    latency_inflection, sweep, throughput_inflection, SweepRow, SweepSpec, METRICS_CSV_HEADER,
};
pub use workload::{
    generate_workload, read_workload_csv, write_workload_csv, ArrivalProcess, Request,
    WORKLOAD_CSV_HEADER,
};
