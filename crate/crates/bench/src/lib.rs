//! Benchmark harness: YCSB-style workload generation, amplification and
//! efficiency metrics, experiment orchestration over the single-process
//! cluster, and CSV/JSON report emission.

pub mod harness;
pub mod metrics;
pub mod report;
pub mod workload;
