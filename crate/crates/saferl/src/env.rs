//! Environment abstraction and a dependency-free CartPole implementation.
//!
//! The CartPole dynamics follow the classic control formulation: a cart on a
//! frictionless track with a pole hinged on top, pushed left or right with a
//! fixed-magnitude force, integrated with an explicit Euler step. Constants
//! match the de-facto standard values so results are comparable with other
//! implementations.

use std::fmt;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Static description of an environment: dimensions, action count, and
/// feature naming used by constraints, attribution reports, and exports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub state_dim: usize,
    pub action_count: usize,
    pub feature_names: Vec<String>,
    pub max_episode_steps: usize,
}

impl EnvSpec {
    pub fn new(
        state_dim: usize,
        action_count: usize,
        feature_names: Vec<String>,
        max_episode_steps: usize,
    ) -> Result<Self, EnvError> {
        if state_dim < 1 {
            return Err(EnvError::InvalidSpec("state_dim must be at least 1".into()));
        }
        if action_count < 2 {
            return Err(EnvError::InvalidSpec("action_count must be at least 2".into()));
        }
        if feature_names.len() != state_dim {
            return Err(EnvError::InvalidSpec(format!(
                "expected {} feature names, got {}",
                state_dim,
                feature_names.len()
            )));
        }
        for (i, a) in feature_names.iter().enumerate() {
            if feature_names[..i].contains(a) {
                return Err(EnvError::InvalidSpec(format!("duplicate feature name {a:?}")));
            }
        }
        if max_episode_steps == 0 {
            return Err(EnvError::InvalidSpec("max_episode_steps must be positive".into()));
        }
        Ok(Self { state_dim, action_count, feature_names, max_episode_steps })
    }

    /// Index of a feature by name, if present.
    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }
}

/// Observation vector. For CartPole the order is fixed as
/// (cart position, cart velocity, pole angle, pole angular velocity).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    values: Vec<f64>,
}

impl State {
    pub fn new(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite()), "state must be finite");
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

impl std::ops::Index<usize> for State {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, v) in self.values.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.4}")?;
        }
        write!(f, ")")
    }
}

/// Outcome of a single environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: State,
    pub reward: f64,
    pub done: bool,
    pub truncated: bool,
}

/// Physical constants of the cart-pole system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CartPoleParams {
    pub gravity: f64,
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub pole_half_length: f64,
    pub force_magnitude: f64,
    pub tau: f64,
    pub angle_limit: f64,
    pub position_limit: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        Self {
            gravity: 9.8,
            cart_mass: 1.0,
            pole_mass: 0.1,
            pole_half_length: 0.5,
            force_magnitude: 10.0,
            tau: 0.02,
            angle_limit: 12.0 * std::f64::consts::PI / 180.0,
            position_limit: 2.4,
        }
    }
}

impl CartPoleParams {
    pub fn validate(&self) -> Result<(), EnvError> {
        let fields = [
            ("gravity", self.gravity),
            ("cart_mass", self.cart_mass),
            ("pole_mass", self.pole_mass),
            ("pole_half_length", self.pole_half_length),
            ("force_magnitude", self.force_magnitude),
            ("tau", self.tau),
            ("angle_limit", self.angle_limit),
            ("position_limit", self.position_limit),
        ];
        for (name, v) in fields {
            if !(v > 0.0) || !v.is_finite() {
                return Err(EnvError::InvalidSpec(format!("{name} must be strictly positive")));
            }
        }
        if self.angle_limit >= std::f64::consts::FRAC_PI_2 {
            return Err(EnvError::InvalidSpec("angle_limit must be below pi/2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("invalid action index {action}: must be below {action_count}")]
    InvalidAction { action: usize, action_count: usize },
    #[error("state has dimension {got}, environment expects {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),
}

/// A discrete-action environment whose dynamics are a pure function of the
/// supplied state; the only hidden state is the per-episode step counter.
pub trait Environment {
    fn spec(&self) -> &EnvSpec;

    /// Start a new episode, returning the initial state. Deterministic in `seed`.
    fn reset(&mut self, seed: u64) -> State;

    /// Advance one step from `state` under `action`.
    fn step(&mut self, state: &State, action: usize) -> Result<StepResult, EnvError>;
}

/// Deterministic CartPole with explicit Euler integration.
///
/// Actions: 0 pushes left (force -F), 1 pushes right (force +F). Reward is
/// 1.0 for every executed step. The episode is done once the cart leaves
/// `[-position_limit, position_limit]` or the pole tips past `angle_limit`,
/// and truncated after `max_episode_steps` steps.
#[derive(Debug, Clone)]
pub struct CartPole {
    params: CartPoleParams,
    spec: EnvSpec,
    steps_taken: usize,
}

impl CartPole {
    pub fn new(params: CartPoleParams) -> Result<Self, EnvError> {
        params.validate()?;
        let spec = EnvSpec::new(4, 2, cartpole_feature_names(), 500)?;
        Ok(Self { params, spec, steps_taken: 0 })
    }

    pub fn with_max_steps(params: CartPoleParams, max_episode_steps: usize) -> Result<Self, EnvError> {
        params.validate()?;
        let spec = EnvSpec::new(4, 2, cartpole_feature_names(), max_episode_steps)?;
        Ok(Self { params, spec, steps_taken: 0 })
    }

    pub fn params(&self) -> &CartPoleParams {
        &self.params
    }

    /// One explicit Euler step of the cart-pole equations, as a pure function.
    ///
    /// Positions integrate with the old velocities, then velocities with the
    /// freshly computed accelerations. Termination flags are not evaluated
    /// here; see [`CartPole::step`].
    pub fn next_state(params: &CartPoleParams, state: &State, action: usize) -> Result<State, EnvError> {
        if action >= 2 {
            return Err(EnvError::InvalidAction { action, action_count: 2 });
        }
        if state.dim() != 4 {
            return Err(EnvError::DimensionMismatch { got: state.dim(), expected: 4 });
        }
        let force = if action == 1 { params.force_magnitude } else { -params.force_magnitude };
        let x = state[0];
        let x_dot = state[1];
        let theta = state[2];
        let theta_dot = state[3];

        let total_mass = params.cart_mass + params.pole_mass;
        let pole_mass_length = params.pole_mass * params.pole_half_length;
        let cos_theta = theta.cos();
        let sin_theta = theta.sin();

        let temp = (force + pole_mass_length * theta_dot * theta_dot * sin_theta) / total_mass;
        let theta_acc = (params.gravity * sin_theta - cos_theta * temp)
            / (params.pole_half_length
                * (4.0 / 3.0 - params.pole_mass * cos_theta * cos_theta / total_mass));
        let x_acc = temp - pole_mass_length * theta_acc * cos_theta / total_mass;

        Ok(State::new(vec![
            x + params.tau * x_dot,
            x_dot + params.tau * x_acc,
            theta + params.tau * theta_dot,
            theta_dot + params.tau * theta_acc,
        ]))
    }
}

impl Environment for CartPole {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> State {
        self.steps_taken = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..4).map(|_| rng.gen_range(-0.05..0.05)).collect();
        State::new(values)
    }

    fn step(&mut self, state: &State, action: usize) -> Result<StepResult, EnvError> {
        let next_state = Self::next_state(&self.params, state, action)?;
        self.steps_taken += 1;
        let done = next_state[0].abs() > self.params.position_limit
            || next_state[2].abs() > self.params.angle_limit;
        let truncated = self.steps_taken >= self.spec.max_episode_steps;
        Ok(StepResult { next_state, reward: 1.0, done, truncated })
    }
}

fn cartpole_feature_names() -> Vec<String> {
    ["cart_position", "cart_velocity", "pole_angle", "pole_angular_velocity"]
        .into_iter()
        .map(String::from)
        .collect()
}
