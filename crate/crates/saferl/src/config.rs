//! Run configuration: one TOML file drives an entire experiment.
//!
//! A config names the environment, declares constraints, picks the
//! enforcement mode, and carries the agent, network, and explainer settings.
//! Every bound is validated at parse time; command-line flags may override
//! the seed, mode, lambda, episode count, and output directory.
//!
//! ```toml
//! run_id = "cartpole-penalize"
//! seed = 0
//!
//! [env]
//! name = "cartpole"
//!
//! [safety]
//! mode = "penalize"
//! lambda = 0.1
//!
//! [[constraint]]
//! name = "cart_velocity_limit"
//! feature_index = 1
//! comparison = "abs_leq"
//! threshold = 0.5
//! ```
//!
//! Feature constraints are assessed on the state the action would produce,
//! so enforcement can discriminate between actions; see
//! [`crate::safety::cartpole_feature_limit`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::AgentConfig;
use crate::env::{CartPole, CartPoleParams, EnvError};
use crate::explain::AttributionMethod;
use crate::qnet::{Activation, MlpConfig};
use crate::safety::{cartpole_feature_limit, Comparison, ConstraintSet, EnforcementMode};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config field {field}: {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.into(), message: message.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub name: String,
    pub max_episode_steps: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { name: "cartpole".into(), max_episode_steps: 500 }
    }
}

/// Declarative constraint: a bound on one state feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintDecl {
    pub name: String,
    pub feature_index: usize,
    pub comparison: Comparison,
    pub threshold: f64,
    /// Acceptable discounted-violation budget, reporting only.
    #[serde(default)]
    pub budget: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub hidden_layers: Vec<usize>,
    pub activation: Activation,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { hidden_layers: vec![64, 64], activation: Activation::Relu }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    pub method: AttributionMethod,
    /// Background states sampled from early-training replay (a zero state is
    /// always appended).
    pub baseline_size: usize,
    /// Coalition budget for the kernel method.
    pub n_samples: usize,
    /// Attribute every k-th step of a rollout.
    pub every_k_steps: usize,
    /// Greedy episodes rolled out by the explain command.
    pub episodes: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            method: AttributionMethod::ShapExact,
            baseline_size: 100,
            n_samples: 2000,
            every_k_steps: 1,
            episodes: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub run_id: Option<String>,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub env: EnvConfig,
    #[serde(rename = "constraint")]
    pub constraints: Vec<ConstraintDecl>,
    pub safety: EnforcementMode,
    pub agent: AgentConfig,
    pub network: NetworkConfig,
    pub explain: ExplainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_id: None,
            seed: 0,
            out_dir: None,
            env: EnvConfig::default(),
            constraints: Vec::new(),
            safety: EnforcementMode::Observe,
            agent: AgentConfig::default(),
            network: NetworkConfig::default(),
            explain: ExplainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parse and validate; `origin` names the source in diagnostics.
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let config: RunConfig = toml::from_str(text)
            .map_err(|e| ConfigError::Parse { path: origin.into(), message: e.to_string() })?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.env.name != "cartpole" {
            return Err(invalid("env.name", format!("unknown environment {:?}", self.env.name)));
        }
        if self.env.max_episode_steps == 0 {
            return Err(invalid("env.max_episode_steps", "must be positive"));
        }
        if let EnforcementMode::Penalize { lambda } = self.safety {
            if !(lambda >= 0.0) || !lambda.is_finite() {
                return Err(invalid("safety.lambda", format!("must be nonnegative, got {lambda}")));
            }
        }
        self.agent.validate().map_err(|m| invalid("agent", m))?;
        let state_dim = 4;
        for (i, c) in self.constraints.iter().enumerate() {
            let field = format!("constraint[{i}]");
            if c.name.is_empty() {
                return Err(invalid(&field, "name must not be empty"));
            }
            if c.name.contains(',') || c.name.contains('\n') {
                return Err(invalid(&field, "name must not contain commas or newlines"));
            }
            if self.constraints[..i].iter().any(|o| o.name == c.name) {
                return Err(invalid(&field, format!("duplicate constraint name {:?}", c.name)));
            }
            if c.feature_index >= state_dim {
                return Err(invalid(
                    &field,
                    format!("feature_index {} out of range (state_dim {state_dim})", c.feature_index),
                ));
            }
            if !c.threshold.is_finite() {
                return Err(invalid(&field, "threshold must be finite"));
            }
        }
        if self.network.hidden_layers.iter().any(|&h| h == 0) {
            return Err(invalid("network.hidden_layers", "layer sizes must be positive"));
        }
        if self.explain.baseline_size == 0 {
            return Err(invalid("explain.baseline_size", "must be at least 1"));
        }
        if self.explain.every_k_steps == 0 {
            return Err(invalid("explain.every_k_steps", "must be at least 1"));
        }
        if self.explain.episodes == 0 {
            return Err(invalid("explain.episodes", "must be at least 1"));
        }
        if self.explain.method == AttributionMethod::ShapKernel
            && self.explain.n_samples < 2 * state_dim + 2
        {
            return Err(invalid(
                "explain.n_samples",
                format!("kernel method needs at least {}", 2 * state_dim + 2),
            ));
        }
        if self.explain.method == AttributionMethod::Saliency {
            return Err(invalid(
                "explain.method",
                "explain runs always emit saliency; pick shap_exact or shap_kernel here",
            ));
        }
        Ok(())
    }

    /// Identifier used in exports; defaults to `<env>-<mode>-seed<seed>`.
    pub fn run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| {
            let mode = match self.safety {
                EnforcementMode::Observe => "observe",
                EnforcementMode::Penalize { .. } => "penalize",
                EnforcementMode::Project => "project",
                EnforcementMode::Terminate => "terminate",
            };
            format!("{}-{}-seed{}", self.env.name, mode, self.seed)
        })
    }

    pub fn build_env(&self) -> Result<CartPole, EnvError> {
        CartPole::with_max_steps(CartPoleParams::default(), self.env.max_episode_steps)
    }

    pub fn build_constraints(&self) -> ConstraintSet {
        let constraints = self
            .constraints
            .iter()
            .map(|c| {
                cartpole_feature_limit(
                    c.name.clone(),
                    CartPoleParams::default(),
                    c.feature_index,
                    c.comparison,
                    c.threshold,
                    c.budget,
                )
            })
            .collect();
        ConstraintSet::new(constraints).expect("validated names are unique")
    }

    /// Agent settings with the run seed applied.
    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig { seed: self.seed, ..self.agent.clone() }
    }

    pub fn network_config(&self) -> MlpConfig {
        MlpConfig {
            input_dim: 4,
            hidden_layers: self.network.hidden_layers.clone(),
            output_dim: 2,
            activation: self.network.activation,
            init_seed: 0, // the agent derives the real seed from the run seed
        }
    }

    pub fn snapshot_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PENALIZE: &str = r#"
seed = 7

[env]
name = "cartpole"

[safety]
mode = "penalize"
lambda = 0.1

[[constraint]]
name = "cart_velocity_limit"
feature_index = 1
comparison = "abs_leq"
threshold = 0.5
"#;

    #[test]
    fn parses_a_penalize_config() {
        let cfg = RunConfig::parse(PENALIZE, "inline").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.safety, EnforcementMode::Penalize { lambda: 0.1 });
        assert_eq!(cfg.constraints.len(), 1);
        assert_eq!(cfg.constraints[0].comparison, Comparison::AbsLeq);
        assert_eq!(cfg.agent.gamma, 0.99);
        assert_eq!(cfg.run_id(), "cartpole-penalize-seed7");
    }

    #[test]
    fn toml_snapshot_round_trips() {
        let cfg = RunConfig::parse(PENALIZE, "inline").unwrap();
        let text = cfg.to_toml_string();
        let again = RunConfig::parse(&text, "snapshot").unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn rejects_bad_bounds_with_field_names() {
        let bad = PENALIZE.replace("lambda = 0.1", "lambda = -1.0");
        let err = RunConfig::parse(&bad, "inline").unwrap_err();
        assert!(err.to_string().contains("safety.lambda"), "{err}");

        let bad = format!("{PENALIZE}\n[agent]\ngamma = 1.5\n");
        let err = RunConfig::parse(&bad, "inline").unwrap_err();
        assert!(err.to_string().contains("agent"), "{err}");

        let bad = PENALIZE.replace("feature_index = 1", "feature_index = 9");
        let err = RunConfig::parse(&bad, "inline").unwrap_err();
        assert!(err.to_string().contains("feature_index"), "{err}");
    }

    #[test]
    fn parse_errors_carry_position_diagnostics() {
        let err = RunConfig::parse("seed = \"zero\"", "inline").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("inline"), "{msg}");
    }

    #[test]
    fn constraint_set_uses_predictive_margins() {
        let cfg = RunConfig::parse(PENALIZE, "inline").unwrap();
        let set = cfg.build_constraints();
        // At rest the next velocity magnitude is ~0.195 < 0.5 either way.
        let s = crate::env::State::new(vec![0.0; 4]);
        assert!(set.constraints()[0].margin(&s, 0) < 0.0);
        // From v = 0.45, pushing right predicts ~0.645.
        let s = crate::env::State::new(vec![0.0, 0.45, 0.0, 0.0]);
        assert!(set.constraints()[0].margin(&s, 1) > 0.0);
        assert!(set.constraints()[0].margin(&s, 0) < 0.0);
    }

    #[test]
    fn unknown_environment_is_rejected() {
        let bad = PENALIZE.replace("name = \"cartpole\"", "name = \"lunarlander\"");
        let err = RunConfig::parse(&bad, "inline").unwrap_err();
        assert!(err.to_string().contains("env.name"));
    }
}
