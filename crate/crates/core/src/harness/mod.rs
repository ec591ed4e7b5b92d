//! Training orchestration, configuration, replay, metrics, checkpoints and
//! the benchmark, ablation and export runners.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod plots;
pub mod replay;
pub mod rng;
pub mod train;

use thiserror::Error;

pub use bench::{run_bench, TimingCell, TimingTable};
pub use checkpoint::CheckpointError;
pub use config::{AblationMode, Config, ConfigError};
pub use metrics::{aggregate_metrics, EpisodeRecord, MetricRecord, MetricsError, Summary};
pub use plots::export_plots;
pub use replay::{ReplayBuffer, ReplayStep};
pub use train::{ablation_config, run_ablation, run_train, RunSummary, Trainer};

use crate::agent::AgentError;
use crate::envs::EnvError;
use crate::metaplanner::MetaError;
use crate::planner::PlannerError;
use crate::worldmodel::WorldModelError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("world model: {0}")]
    WorldModel(#[from] WorldModelError),
    #[error("actor-critic: {0}")]
    Agent(#[from] AgentError),
    #[error("planner: {0}")]
    Planner(#[from] PlannerError),
    #[error("meta-planner: {0}")]
    Meta(#[from] MetaError),
    #[error("environment: {0}")]
    Env(#[from] EnvError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Whether training diverged rather than being misconfigured or I/O-bound.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            HarnessError::WorldModel(WorldModelError::NonFiniteLoss { .. })
                | HarnessError::Agent(AgentError::NonFiniteLoss { .. })
                | HarnessError::Planner(PlannerError::Agent(AgentError::NonFiniteLoss { .. }))
                | HarnessError::Meta(MetaError::NonFiniteLoss { .. })
        )
    }
}
