//! Scenario files, the cluster run loop and the artifacts it writes.

pub mod config;
pub mod experiments;
pub mod report;
pub mod sim;
pub mod sweep;

pub use config::{parse_scenario, parse_scenario_str, preset, preset_names, ScenarioConfig};
pub use report::{execute, render_report, run_scenario, Rendered, RunReport, Summary};
pub use sim::{simulate_cluster, ClusterOutcome, JobSummary};
pub use sweep::{sweep, Stat, SweepAxis, SweepTable};

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("io: {0}")]
    Io(String),
    #[error("runtime: {0}")]
    Runtime(String),
    #[error("missing artifacts: {0}")]
    MissingArtifacts(String),
    #[error("sweep grid is empty")]
    EmptyGrid,
    #[error("power safety violated: {0}")]
    Safety(String),
}

impl ScenarioError {
    /// Process exit code: 2 schema, 3 safety verdict, 4 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::Schema { .. } | ScenarioError::UnknownPreset(_) => 2,
            ScenarioError::Safety(_) => 3,
            _ => 4,
        }
    }
}
