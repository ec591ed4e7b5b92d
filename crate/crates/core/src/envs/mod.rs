//! Environments: a porous gridworld maze and two small diagnostic tasks.

mod diagnostic;
mod maze;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use diagnostic::{NoisyTv, RareTransition, DiagnosticKind};
pub use maze::{
    connectivity_check, generate_maze, interior_wall_count, interior_wall_slots, proximity_reward, Goal, Heading, Maze, MazeAction,
    MazeSpec, MazeState,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid action {action}; the environment has {num_actions} actions")]
    InvalidAction { action: usize, num_actions: usize },
    #[error("step called on a finished episode")]
    EpisodeOver,
}

/// Raw reward components of one step, before any scaling.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub exploration: f64,
    pub proximity: f64,
    pub goal: f64,
    pub base: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn new(exploration: f64, proximity: f64, goal: f64, base: f64) -> Self {
        Self { exploration, proximity, goal, base, total: base + exploration + proximity + goal }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub obs: Vec<f32>,
    /// Reward fed to the agent (scaled).
    pub reward: f64,
    pub breakdown: RewardBreakdown,
    /// The task ended on its own terms (e.g. all goals found).
    pub terminated: bool,
    /// The time limit cut the episode.
    pub truncated: bool,
}

impl Step {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

pub trait Environment {
    fn obs_dim(&self) -> usize;
    fn num_actions(&self) -> usize;
    fn time_limit(&self) -> usize;
    /// Starts a new episode and returns its first observation.
    fn reset(&mut self) -> Vec<f32>;
    fn step(&mut self, action: usize) -> Result<Step, EnvError>;
    /// Steps taken in the current episode.
    fn steps(&self) -> usize;
}

/// Every environment the harness can run, behind one serializable type so
/// checkpoints capture the environment state along with everything else.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AnyEnv {
    Maze(Maze),
    NoisyTv(NoisyTv),
    RareTransition(RareTransition),
}

impl AnyEnv {
    fn inner(&self) -> &dyn Environment {
        match self {
            AnyEnv::Maze(e) => e,
            AnyEnv::NoisyTv(e) => e,
            AnyEnv::RareTransition(e) => e,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn Environment {
        match self {
            AnyEnv::Maze(e) => e,
            AnyEnv::NoisyTv(e) => e,
            AnyEnv::RareTransition(e) => e,
        }
    }
}

impl Environment for AnyEnv {
    fn obs_dim(&self) -> usize {
        self.inner().obs_dim()
    }
    fn num_actions(&self) -> usize {
        self.inner().num_actions()
    }
    fn time_limit(&self) -> usize {
        self.inner().time_limit()
    }
    fn reset(&mut self) -> Vec<f32> {
        self.inner_mut().reset()
    }
    fn step(&mut self, action: usize) -> Result<Step, EnvError> {
        self.inner_mut().step(action)
    }
    fn steps(&self) -> usize {
        self.inner().steps()
    }
}

pub fn make_diagnostic_env(kind: DiagnosticKind, seed: u64) -> AnyEnv {
    match kind {
        DiagnosticKind::NoisyTv => AnyEnv::NoisyTv(NoisyTv::new(seed)),
        DiagnosticKind::RareTransition => AnyEnv::RareTransition(RareTransition::new(seed)),
    }
}
