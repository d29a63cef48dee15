//! Toy environments, scripted experts and demonstration datasets.

mod data;
mod grid;
mod reach;

pub use data::{generate_demos, DemoAction, DemonstrationSet, Episode, MAX_FAILURE_RATE};
pub use grid::{GridConfig, GridEnv, GridExpert, GridState, Template, COLORS, GRID_ACTIONS, KINDS};
pub use reach::{ReachConfig, ReachEnv, ReachExpert};

use serde::{Deserialize, Serialize};

use crate::action::{Action, ActionSpace};
use crate::error::Result;

/// Outcome of one environment step.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub success: bool,
}

pub trait Env: Send {
    fn action_space(&self) -> ActionSpace;

    fn obs_dim(&self) -> usize;

    /// The leading observation components that describe the agent's own
    /// state.
    fn proprio_dim(&self) -> usize {
        0
    }

    fn num_instructions(&self) -> usize;

    /// Human-readable name of an instruction id.
    fn instruction_name(&self, id: usize) -> String;

    fn reset(&mut self, seed: u64) -> Vec<f64>;

    fn instruction(&self) -> usize;

    fn step(&mut self, action: &Action<f64>) -> Result<Step>;

    fn is_done(&self) -> bool;
}

/// Scripted demonstrator for an environment.
pub trait Expert<E: Env + ?Sized> {
    /// Called after each `reset`.
    fn begin(&mut self, env: &E, seed: u64);

    fn act(&mut self, env: &E) -> Result<Action<f64>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EnvConfig {
    Reach(ReachConfig),
    Grid(GridConfig),
}

impl EnvConfig {
    pub fn build(&self) -> Box<dyn Env> {
        match self {
            EnvConfig::Reach(c) => Box::new(ReachEnv::new(c.clone())),
            EnvConfig::Grid(c) => Box::new(GridEnv::new(c.clone())),
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        self.build().action_space()
    }
}

pub(crate) fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}
