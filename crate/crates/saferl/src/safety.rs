//! Runtime safety: constraint evaluation, action enforcement, and reward shaping.
//!
//! A [`Constraint`] is a named margin function `C(s, a)`; values at or below
//! zero are safe, positive values measure the size of the violation. The
//! [`SafeEnvWrapper`] filters every step through the configured
//! [`EnforcementMode`]: log only, penalize the reward, project the action
//! onto the least-violating alternative, or end the episode. Constraints are
//! never folded into the optimization itself; enforcement happens strictly
//! at runtime, which keeps any off-the-shelf agent compatible.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::{CartPole, CartPoleParams, EnvError, EnvSpec, Environment, State, StepResult};

/// Margin function: `<= 0` satisfied, `> 0` violated by that amount.
pub type MarginFn = Arc<dyn Fn(&State, usize) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct Constraint {
    name: String,
    budget: f64,
    margin: MarginFn,
}

impl Constraint {
    /// `budget` is the acceptable discounted-violation threshold, used for
    /// reporting only.
    pub fn new(
        name: impl Into<String>,
        budget: f64,
        margin: impl Fn(&State, usize) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), budget, margin: Arc::new(margin) }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn margin(&self, s: &State, action: usize) -> f64 {
        (self.margin)(s, action)
    }
}

impl std::fmt::Debug for Constraint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Constraint")
            .field("name", &self.name)
            .field("budget", &self.budget)
            .finish_non_exhaustive()
    }
}

/// How a feature value is compared against a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// `|value| <= threshold`; margin is `|value| - threshold`.
    AbsLeq,
    /// `value <= threshold`; margin is `value - threshold`.
    Leq,
    /// `value >= threshold`; margin is `threshold - value`.
    Geq,
}

impl Comparison {
    pub fn margin(self, value: f64, threshold: f64) -> f64 {
        match self {
            Comparison::AbsLeq => value.abs() - threshold,
            Comparison::Leq => value - threshold,
            Comparison::Geq => threshold - value,
        }
    }
}

/// Bound on a CartPole state feature, assessed on the state that executing
/// the action would produce.
///
/// Evaluating the candidate action's one-step outcome is what makes the
/// margin depend on the action at all: it lets projection choose the push
/// that keeps the feature in bounds, and makes the violation count measure
/// the agent's unsafe intent rather than a fait accompli.
pub fn cartpole_feature_limit(
    name: impl Into<String>,
    params: CartPoleParams,
    feature_index: usize,
    comparison: Comparison,
    threshold: f64,
    budget: f64,
) -> Constraint {
    Constraint::new(name, budget, move |s: &State, action: usize| {
        match CartPole::next_state(&params, s, action) {
            Ok(next) => comparison.margin(next[feature_index], threshold),
            // Unreachable for valid actions; treat as maximally unsafe.
            Err(_) => f64::INFINITY,
        }
    })
}

/// The cart-velocity bound used throughout the CartPole experiments.
pub fn cartpole_velocity_limit(params: CartPoleParams, bound: f64) -> Constraint {
    cartpole_feature_limit("cart_velocity_limit", params, 1, Comparison::AbsLeq, bound, 0.0)
}

/// Ordered collection of constraints with unique names. May be empty, which
/// degenerates to unconstrained behavior.
#[derive(Debug, Clone, Default)]
pub struct ConstraintSet {
    constraints: Vec<Constraint>,
}

impl ConstraintSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(constraints: Vec<Constraint>) -> Result<Self, SafetyError> {
        for (i, c) in constraints.iter().enumerate() {
            if constraints[..i].iter().any(|o| o.name == c.name) {
                return Err(SafetyError::DuplicateConstraint(c.name.clone()));
            }
        }
        Ok(Self { constraints })
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SafetyError {
    #[error("duplicate constraint name {0:?}")]
    DuplicateConstraint(String),
}

/// Runtime policy for handling unsafe actions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum EnforcementMode {
    /// Log violations; never interfere.
    Observe,
    /// Keep the action but subtract `lambda` per violated constraint from
    /// the reward stored for learning.
    Penalize { lambda: f64 },
    /// Replace an unsafe action by the action minimizing the total
    /// constraint overshoot `sum_i max(0, C_i(s, a'))`.
    Project,
    /// Execute the step, then end the episode if the requested action
    /// violated any constraint.
    Terminate,
}

impl EnforcementMode {
    pub fn lambda(&self) -> f64 {
        match self {
            EnforcementMode::Penalize { lambda } => *lambda,
            _ => 0.0,
        }
    }
}

/// One constraint violation, logged with its severity (the margin).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationEvent {
    pub episode: usize,
    pub step: usize,
    pub constraint_name: String,
    pub margin: f64,
    pub requested_action: usize,
    pub executed_action: usize,
    pub timestamp: String,
}

/// Result of a step routed through the safety wrapper.
#[derive(Debug, Clone)]
pub struct WrappedStepResult {
    pub inner: StepResult,
    pub shaped_reward: f64,
    pub requested_action: usize,
    pub executed_action: usize,
    /// Violations of the requested action (the executed one is recorded in
    /// each event for post-enforcement bookkeeping).
    pub violations: Vec<ViolationEvent>,
}

/// Margins of every constraint at `(s, a)`, in declaration order.
pub fn evaluate<'a>(set: &'a ConstraintSet, s: &State, action: usize) -> Vec<(&'a str, f64)> {
    set.constraints.iter().map(|c| (c.name(), c.margin(s, action))).collect()
}

/// Total constraint overshoot of an action.
fn overshoot(set: &ConstraintSet, s: &State, action: usize) -> f64 {
    set.constraints.iter().map(|c| c.margin(s, action).max(0.0)).sum()
}

/// Apply the enforcement rule at `(s, a)`.
///
/// Returns the action to execute plus the `(name, margin)` pairs of every
/// constraint the requested action violates. If the requested action is
/// safe it passes through untouched in every mode. Projection picks the
/// argmin of the total overshoot over all actions, ties going to the lowest
/// index, so it is total: when no action is safe the least-violating one is
/// chosen.
pub fn enforce(
    set: &ConstraintSet,
    mode: EnforcementMode,
    s: &State,
    requested: usize,
    action_count: usize,
) -> (usize, Vec<(String, f64)>) {
    let violations: Vec<(String, f64)> = set
        .constraints
        .iter()
        .filter_map(|c| {
            let m = c.margin(s, requested);
            (m > 0.0).then(|| (c.name.clone(), m))
        })
        .collect();
    if violations.is_empty() {
        return (requested, violations);
    }
    let executed = match mode {
        EnforcementMode::Project => {
            let mut best = 0;
            let mut best_cost = overshoot(set, s, 0);
            for a in 1..action_count {
                let cost = overshoot(set, s, a);
                if cost < best_cost {
                    best = a;
                    best_cost = cost;
                }
            }
            best
        }
        _ => requested,
    };
    (executed, violations)
}

/// Constraint-aware reward: `r - lambda * violation_count`.
pub fn shape_reward(reward: f64, violation_count: usize, lambda: f64) -> f64 {
    debug_assert!(lambda >= 0.0);
    reward - lambda * violation_count as f64
}

/// Discounted violation overshoot of one constraint over an episode:
/// `sum_t gamma^t * max(0, margin_t)`. A reporting metric compared against
/// the constraint budget; never part of the optimization.
pub fn discounted_constraint_return(margins: &[f64], gamma: f64) -> f64 {
    assert!((0.0..1.0).contains(&gamma), "gamma must be in [0, 1)");
    let mut acc = 0.0;
    let mut discount = 1.0;
    for m in margins {
        acc += discount * m.max(0.0);
        discount *= gamma;
    }
    acc
}

fn now_timestamp() -> String {
    chrono::Utc::now().format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string()
}

/// Environment wrapper that enforces a [`ConstraintSet`] at every step.
///
/// Holds the per-episode counters used to stamp violation events; the
/// wrapped environment stays untouched otherwise.
#[derive(Debug)]
pub struct SafeEnvWrapper<E: Environment> {
    env: E,
    constraints: ConstraintSet,
    mode: EnforcementMode,
    episode: usize,
    step: usize,
    started: bool,
}

impl<E: Environment> SafeEnvWrapper<E> {
    pub fn new(env: E, constraints: ConstraintSet, mode: EnforcementMode) -> Self {
        Self { env, constraints, mode, episode: 0, step: 0, started: false }
    }

    pub fn spec(&self) -> &EnvSpec {
        self.env.spec()
    }

    pub fn mode(&self) -> EnforcementMode {
        self.mode
    }

    pub fn constraints(&self) -> &ConstraintSet {
        &self.constraints
    }

    /// Index of the episode currently in progress.
    pub fn episode(&self) -> usize {
        self.episode
    }

    /// Begin a new episode on the wrapped environment.
    pub fn reset(&mut self, seed: u64) -> State {
        if self.started {
            self.episode += 1;
        }
        self.started = true;
        self.step = 0;
        self.env.reset(seed)
    }

    /// Enforce, step, shape: the full runtime filter for one transition.
    pub fn step(&mut self, s: &State, requested: usize) -> Result<WrappedStepResult, EnvError> {
        let action_count = self.env.spec().action_count;
        let (executed, violated) = enforce(&self.constraints, self.mode, s, requested, action_count);
        let mut inner = self.env.step(s, executed)?;
        let shaped_reward = match self.mode {
            EnforcementMode::Penalize { lambda } => shape_reward(inner.reward, violated.len(), lambda),
            _ => inner.reward,
        };
        if matches!(self.mode, EnforcementMode::Terminate) && !violated.is_empty() {
            inner.done = true;
        }
        let violations = violated
            .into_iter()
            .map(|(constraint_name, margin)| ViolationEvent {
                episode: self.episode,
                step: self.step,
                constraint_name,
                margin,
                requested_action: requested,
                executed_action: executed,
                timestamp: now_timestamp(),
            })
            .collect();
        self.step += 1;
        Ok(WrappedStepResult {
            inner,
            shaped_reward,
            requested_action: requested,
            executed_action: executed,
            violations,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::CartPole;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(values: &[f64]) -> State {
        State::new(values.to_vec())
    }

    /// Constraint on the current velocity value, independent of the action.
    fn raw_velocity_limit(bound: f64) -> Constraint {
        Constraint::new("raw_velocity", 0.0, move |s: &State, _| s[1].abs() - bound)
    }

    /// Brute-force projection oracle: argmin over actions of the summed
    /// overshoot, ties to the lowest index.
    fn brute_force_projection(set: &ConstraintSet, s: &State, action_count: usize) -> usize {
        let mut best = 0;
        let mut best_cost = f64::INFINITY;
        for a in 0..action_count {
            let cost: f64 = set.constraints().iter().map(|c| c.margin(s, a).max(0.0)).sum();
            if cost < best_cost {
                best_cost = cost;
                best = a;
            }
        }
        best
    }

    #[test]
    fn evaluate_reports_margins_in_order() {
        let set = ConstraintSet::new(vec![raw_velocity_limit(0.5)]).unwrap();
        let safe = evaluate(&set, &state(&[0.0, 0.3, 0.0, 0.0]), 0);
        assert_eq!(safe.len(), 1);
        assert_eq!(safe[0].0, "raw_velocity");
        assert!((safe[0].1 - (-0.2)).abs() < 1e-12, "margin {}", safe[0].1);
        let unsafe_ = evaluate(&set, &state(&[0.0, 0.6, 0.0, 0.0]), 0);
        assert_eq!(unsafe_.len(), 1);
        assert!((unsafe_[0].1 - 0.1).abs() < 1e-12);
    }

    #[test]
    fn evaluate_empty_set_is_empty() {
        let set = ConstraintSet::empty();
        assert!(evaluate(&set, &state(&[0.0; 4]), 1).is_empty());
    }

    #[test]
    fn duplicate_names_rejected() {
        let cs = vec![raw_velocity_limit(0.5), raw_velocity_limit(0.6)];
        assert!(matches!(ConstraintSet::new(cs), Err(SafetyError::DuplicateConstraint(_))));
    }

    #[test]
    fn safe_action_passes_through_in_every_mode() {
        let set = ConstraintSet::new(vec![raw_velocity_limit(0.5)]).unwrap();
        let s = state(&[0.0, 0.1, 0.0, 0.0]);
        for mode in [
            EnforcementMode::Observe,
            EnforcementMode::Penalize { lambda: 1.0 },
            EnforcementMode::Project,
            EnforcementMode::Terminate,
        ] {
            let (executed, violations) = enforce(&set, mode, &s, 1, 2);
            assert_eq!(executed, 1);
            assert!(violations.is_empty());
        }
    }

    #[test]
    fn projection_switches_to_the_safe_push() {
        // v = 0.45: pushing right would exceed the 0.5 bound, pushing left
        // stays inside it.
        let set = ConstraintSet::new(vec![cartpole_velocity_limit(CartPoleParams::default(), 0.5)])
            .unwrap();
        let s = state(&[0.0, 0.45, 0.0, 0.0]);
        let (executed, violations) = enforce(&set, EnforcementMode::Project, &s, 1, 2);
        assert_eq!(violations.len(), 1);
        assert_eq!(executed, 0);
        assert_eq!(executed, brute_force_projection(&set, &s, 2));
    }

    #[test]
    fn projection_picks_least_violating_when_nothing_is_safe() {
        // v = 0.8 with a 0.5 bound: both pushes overshoot, left less so.
        let set = ConstraintSet::new(vec![cartpole_velocity_limit(CartPoleParams::default(), 0.5)])
            .unwrap();
        let s = state(&[0.0, 0.8, 0.0, 0.0]);
        let (executed, violations) = enforce(&set, EnforcementMode::Project, &s, 1, 2);
        assert!(!violations.is_empty());
        assert_eq!(executed, brute_force_projection(&set, &s, 2));
        assert_eq!(executed, 0);
    }

    #[test]
    fn projection_tie_breaks_to_action_zero() {
        let set = ConstraintSet::new(vec![Constraint::new("always", 0.0, |_: &State, _| 1.0)])
            .unwrap();
        let (executed, _) = enforce(&set, EnforcementMode::Project, &state(&[0.0; 4]), 1, 2);
        assert_eq!(executed, 0);
    }

    #[test]
    fn non_projecting_modes_keep_the_requested_action() {
        let set = ConstraintSet::new(vec![raw_velocity_limit(0.5)]).unwrap();
        let s = state(&[0.0, 0.9, 0.0, 0.0]);
        for mode in [
            EnforcementMode::Observe,
            EnforcementMode::Penalize { lambda: 0.3 },
            EnforcementMode::Terminate,
        ] {
            let (executed, violations) = enforce(&set, mode, &s, 1, 2);
            assert_eq!(executed, 1);
            assert_eq!(violations.len(), 1);
        }
    }

    #[test]
    fn enforce_matches_brute_force_on_random_states() {
        let set = ConstraintSet::new(vec![
            cartpole_velocity_limit(CartPoleParams::default(), 0.5),
            cartpole_feature_limit(
                "pole_angle_limit",
                CartPoleParams::default(),
                2,
                Comparison::AbsLeq,
                0.1,
                0.0,
            ),
        ])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..500 {
            let s = state(&[
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-1.5..1.5),
            ]);
            let requested = rng.gen_range(0..2);
            let (executed, violations) = enforce(&set, EnforcementMode::Project, &s, requested, 2);
            if violations.is_empty() {
                assert_eq!(executed, requested);
            } else {
                assert_eq!(executed, brute_force_projection(&set, &s, 2));
            }
        }
    }

    #[test]
    fn shape_reward_examples() {
        assert_eq!(shape_reward(1.0, 1, 0.5), 0.5);
        assert_eq!(shape_reward(1.0, 0, 7.0), 1.0);
        assert_eq!(shape_reward(1.0, 2, 0.25), 0.5);
    }

    #[test]
    fn discounted_return_examples() {
        assert_eq!(discounted_constraint_return(&[], 0.99), 0.0);
        assert_eq!(discounted_constraint_return(&[0.1], 0.99), 0.1);
        assert!((discounted_constraint_return(&[0.1, 0.1], 0.5) - 0.15).abs() < 1e-15);
        // Satisfied margins contribute nothing.
        assert_eq!(discounted_constraint_return(&[-0.3, -1.0], 0.9), 0.0);
    }

    fn wrapper(mode: EnforcementMode) -> SafeEnvWrapper<CartPole> {
        let env = CartPole::new(CartPoleParams::default()).unwrap();
        let set = ConstraintSet::new(vec![cartpole_velocity_limit(CartPoleParams::default(), 0.5)])
            .unwrap();
        SafeEnvWrapper::new(env, set, mode)
    }

    #[test]
    fn wrapped_safe_step_is_a_no_op_path() {
        let mut w = wrapper(EnforcementMode::Penalize { lambda: 1.0 });
        let s = w.reset(3);
        let r = w.step(&s, 1).unwrap();
        assert_eq!(r.shaped_reward, r.inner.reward);
        assert_eq!(r.requested_action, 1);
        assert_eq!(r.executed_action, 1);
        assert!(r.violations.is_empty());

        let mut env = CartPole::new(CartPoleParams::default()).unwrap();
        let plain = env.step(&s, 1).unwrap();
        assert_eq!(r.inner.next_state, plain.next_state);
    }

    #[test]
    fn penalize_subtracts_lambda_per_violation() {
        let mut w = wrapper(EnforcementMode::Penalize { lambda: 1.0 });
        w.reset(0);
        // Fast enough that either push keeps |v| above the bound.
        let s = state(&[0.0, 0.9, 0.0, 0.0]);
        let r = w.step(&s, 1).unwrap();
        assert_eq!(r.violations.len(), 1);
        assert_eq!(r.shaped_reward, r.inner.reward - 1.0);
        assert_eq!(r.executed_action, 1);
    }

    #[test]
    fn terminate_forces_done_after_the_step() {
        let mut w = wrapper(EnforcementMode::Terminate);
        w.reset(0);
        let s = state(&[0.0, 0.9, 0.0, 0.0]);
        let r = w.step(&s, 1).unwrap();
        assert!(r.inner.done);
        assert_eq!(r.inner.reward, 1.0);
        assert_eq!(r.executed_action, 1);
    }

    #[test]
    fn observe_never_alters_anything() {
        let mut w = wrapper(EnforcementMode::Observe);
        w.reset(0);
        let s = state(&[0.0, 0.9, 0.0, 0.0]);
        let r = w.step(&s, 1).unwrap();
        assert_eq!(r.executed_action, 1);
        assert_eq!(r.shaped_reward, r.inner.reward);
        assert!(!r.inner.done);
        assert_eq!(r.violations.len(), 1);
    }

    #[test]
    fn violation_events_carry_episode_and_step_indices() {
        let mut w = wrapper(EnforcementMode::Observe);
        let fast = state(&[0.0, 0.9, 0.0, 0.0]);
        w.reset(0);
        w.step(&fast, 1).unwrap();
        let r = w.step(&fast, 1).unwrap();
        assert_eq!(r.violations[0].episode, 0);
        assert_eq!(r.violations[0].step, 1);
        w.reset(1);
        let r = w.step(&fast, 0).unwrap();
        assert_eq!(r.violations[0].episode, 1);
        assert_eq!(r.violations[0].step, 0);
        assert!(r.violations[0].timestamp.ends_with('Z'));
    }

    #[test]
    fn projection_keeps_reachable_states_safe() {
        let params = CartPoleParams::default();
        let set = ConstraintSet::new(vec![cartpole_velocity_limit(params.clone(), 0.5)]).unwrap();
        let env = CartPole::new(params.clone()).unwrap();
        let mut w = SafeEnvWrapper::new(env, set, EnforcementMode::Project);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = w.reset(11);
        for _ in 0..300 {
            let requested = rng.gen_range(0..2);
            let r = w.step(&s, requested).unwrap();
            let next_v = CartPole::next_state(&params, &s, r.executed_action).unwrap()[1];
            assert!(next_v.abs() <= 0.5 + 1e-12, "projected step left the bound: {next_v}");
            if r.inner.done {
                s = w.reset(rng.gen());
            } else {
                s = r.inner.next_state;
            }
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn shaped_reward_never_exceeds_raw(
                reward in -10.0f64..10.0,
                count in 0usize..5,
                lambda in 0.0f64..3.0,
            ) {
                prop_assert!(shape_reward(reward, count, lambda) <= reward);
            }

            #[test]
            fn projection_is_safe_whenever_any_action_is(
                x in -2.0f64..2.0,
                v in -1.2f64..1.2,
                theta in -0.2f64..0.2,
                omega in -2.0f64..2.0,
                requested in 0usize..2,
            ) {
                let set = ConstraintSet::new(vec![cartpole_velocity_limit(
                    CartPoleParams::default(),
                    0.5,
                )])
                .unwrap();
                let s = State::new(vec![x, v, theta, omega]);
                let (executed, _) = enforce(&set, EnforcementMode::Project, &s, requested, 2);
                let any_safe = (0..2).any(|a| {
                    set.constraints().iter().all(|c| c.margin(&s, a) <= 0.0)
                });
                if any_safe {
                    prop_assert!(set.constraints().iter().all(|c| c.margin(&s, executed) <= 0.0));
                }
            }

            #[test]
            fn violation_list_length_matches_positive_margins(
                v in -1.5f64..1.5,
                requested in 0usize..2,
            ) {
                let set = ConstraintSet::new(vec![
                    cartpole_velocity_limit(CartPoleParams::default(), 0.5),
                    Constraint::new("left_only", 0.0, |_: &State, a| if a == 0 { 1.0 } else { -1.0 }),
                ])
                .unwrap();
                let s = State::new(vec![0.0, v, 0.0, 0.0]);
                let expected = set
                    .constraints()
                    .iter()
                    .filter(|c| c.margin(&s, requested) > 0.0)
                    .count();
                let (_, violations) = enforce(&set, EnforcementMode::Observe, &s, requested, 2);
                prop_assert_eq!(violations.len(), expected);
            }
        }
    }
}
