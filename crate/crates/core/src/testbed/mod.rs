//! Scenario files, synthetic datasets, the simulated testbed runner and
//! its reports.

mod config;
mod dataset;
mod report;
mod runner;

pub use config::{
    parse_size, producer_id, ByteSize, ContentMode, Expectation, FaultSpec, HybridRequestSpec,
    NetworkConfig, PackageConfig, RestoredExpectation, ScenarioConfig, TrafficSpec, BROKER_ID,
    ORCHESTRATOR_ID,
};
pub use dataset::{
    dataset_files, generate_dataset, image_file_name, read_manifest, synth_image, MANIFEST_FILE,
};
pub use report::{
    compare_runs, write_report, DiffSummary, MetricsReport, RequestReport, TransferRow,
    TransportSummary,
};
pub use runner::{outcome_counts, run_scenario, run_scenario_in};

use std::io;

use thiserror::Error;

use crate::nodes::NodeError;
use crate::transport::TransportError;

#[derive(Debug, Error)]
pub enum TestbedError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("verification failed: {}", failures.join("; "))]
    VerificationFailure {
        failures: Vec<String>,
        report: Box<MetricsReport>,
    },
    #[error("runs are not comparable: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("testbed i/o: {0}")]
    Io(#[from] io::Error),
}
