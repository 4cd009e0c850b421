//! Constrained, explainable deep Q-learning.
//!
//! This crate trains DQN agents whose actions pass through runtime safety
//! constraints, and explains the resulting policies with Shapley-value and
//! input-gradient attribution. The pieces compose but stand alone:
//!
//! * [`env`] — environment trait plus a deterministic, dependency-free
//!   CartPole with the classic control dynamics.
//! * [`safety`] — constraint margins `C(s, a) <= 0`, enforcement modes
//!   (observe / penalize / project / terminate), and the wrapper that
//!   filters every step.
//! * [`qnet`] — a small double-precision MLP with exact gradients for both
//!   parameters and inputs.
//! * [`agent`] — replay buffer, epsilon-greedy exploration, and
//!   target-network Q-learning over wrapped transitions.
//! * [`explain`] — exact Shapley values, KernelSHAP sampling, and saliency
//!   maps over the Q-function.
//! * [`telemetry`] — append-only run logs exported as CSV and JSON.
//! * [`config`] / [`cli`] — a TOML-driven pipeline: `train`, `eval`,
//!   `explain`, `report`.
//!
//! The `examples/` directory has one runnable program per capability; start
//! with `cartpole_dynamics` and `train_penalized`.

pub mod agent;
pub mod cli;
pub mod config;
pub mod env;
pub mod explain;
pub mod qnet;
pub mod safety;
pub mod telemetry;

pub use agent::{AgentConfig, DqnAgent, EpisodeStats, ReplayBuffer, Transition};
pub use env::{CartPole, CartPoleParams, EnvSpec, Environment, State, StepResult};
pub use explain::{AttributionMethod, AttributionRecord, BaselineSet};
pub use qnet::{Activation, MlpConfig, MlpParams};
pub use safety::{
    Comparison, Constraint, ConstraintSet, EnforcementMode, SafeEnvWrapper, ViolationEvent,
    WrappedStepResult,
};
pub use telemetry::{RunLog, RunSummary};
