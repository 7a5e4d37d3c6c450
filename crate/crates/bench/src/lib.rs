//! Benchmark harness, oracle verification, index statistics and scripted
//! end-to-end scenarios.

pub mod bench;
pub mod scenario;
pub mod stats;
pub mod verify;

use scbr_core::workload::{WorkloadSpec, WORKLOAD_NAMES};

pub use bench::{bench_match, read_csv, write_csv, BenchConfig, BenchRecord, Mode};
pub use stats::{report_stats, StatsRow};
pub use verify::{verify_oracle, VerifyOptions, VerifyReport};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("unknown workload {0:?}; expected one of {names}", names = WORKLOAD_NAMES.join(", "))]
    UnknownWorkload(String),
    #[error("invalid configuration: {0}")]
    Invalid(&'static str),
}

pub fn workload(name: &str, seed: u64) -> Result<WorkloadSpec, BenchError> {
    WorkloadSpec::named(name, seed).ok_or_else(|| BenchError::UnknownWorkload(name.to_string()))
}
