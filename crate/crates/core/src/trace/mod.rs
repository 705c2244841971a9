//! Trace and index files, plus the synthetic workload generator.

mod generator;
mod io;

pub use generator::{
    generate_workload, ConfigError, GeneratedWorkload, ModalityProfile, RetrieveCount,
    WorkloadConfig,
};
pub use io::{
    read_ground_truth, read_index, read_jsonl_from, read_trace, write_ground_truth, write_index,
    write_jsonl, write_trace, GroundTruth, TraceError,
};
