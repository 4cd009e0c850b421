//! Constrained DQN agent: replay buffer, epsilon-greedy behavior, and
//! target-network Q-learning over safety-wrapped transitions.
//!
//! The agent consumes [`WrappedStepResult`]s, so penalty-shaped rewards and
//! violation counters flow straight into training. Two action indices are
//! tracked per transition: learning updates use the action the environment
//! actually executed (in projection mode the transition was produced by the
//! projected action, so crediting the requested one would corrupt the
//! Bellman backup), while the violation count measures the requested action.
//!
//! All randomness comes from one master seed, split into independent streams
//! for initialization, exploration, replay sampling, and episode resets, so
//! a full training run is reproducible bit for bit.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvError, Environment, State};
use crate::qnet::{self, MlpConfig, MlpParams};
use crate::safety::{SafeEnvWrapper, ViolationEvent};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_episodes: usize,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub target_sync_interval: usize,
    pub train_start_size: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_episodes: 150,
            buffer_capacity: 10_000,
            batch_size: 64,
            learning_rate: 1e-3,
            target_sync_interval: 200,
            train_start_size: 500,
            episodes: 200,
            seed: 0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(format!("gamma must be in [0, 1), got {}", self.gamma));
        }
        for (name, v) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if self.epsilon_end > self.epsilon_start {
            return Err("epsilon_end must not exceed epsilon_start".into());
        }
        if self.batch_size == 0 || self.batch_size > self.buffer_capacity {
            return Err(format!(
                "batch_size must be in 1..={}, got {}",
                self.buffer_capacity, self.batch_size
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.target_sync_interval == 0 {
            return Err("target_sync_interval must be positive".into());
        }
        if self.episodes == 0 {
            return Err("episodes must be positive".into());
        }
        Ok(())
    }
}

/// One stored step: the replay unit.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: State,
    pub requested_action: usize,
    pub executed_action: usize,
    /// Shaped reward (equals the raw reward outside penalize mode).
    pub reward: f64,
    pub next_state: State,
    pub done: bool,
}

/// Fixed-capacity FIFO ring buffer with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { items: Vec::with_capacity(capacity.min(4096)), capacity, next: 0 }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// Uniform sample with replacement.
    pub fn sample(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<&Transition> {
        assert!(!self.items.is_empty(), "cannot sample from an empty buffer");
        (0..n).map(|_| &self.items[rng.gen_range(0..self.items.len())]).collect()
    }
}

/// Per-episode training metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episode: usize,
    pub total_raw_reward: f64,
    pub total_shaped_reward: f64,
    /// Steps whose requested action violated at least one constraint.
    pub cvc: usize,
    pub steps: usize,
    pub epsilon_used: f64,
}

/// Stats plus the violation events raised during the episode.
#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub stats: EpisodeStats,
    pub violations: Vec<ViolationEvent>,
}

/// Epsilon-greedy action choice; greedy ties resolve to the lowest index.
pub fn select_action(params: &MlpParams, s: &State, epsilon: f64, rng: &mut ChaCha8Rng) -> usize {
    debug_assert!((0.0..=1.0).contains(&epsilon));
    let action_count = params.output_dim();
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        rng.gen_range(0..action_count)
    } else {
        qnet::forward(params, s).expect("state dimension matches the network").argmax()
    }
}

/// Q-learning targets: `y = r` on terminal transitions, otherwise
/// `y = r + gamma * max_a' Q_target(s', a')`.
pub fn td_targets(target_params: &MlpParams, batch: &[&Transition], gamma: f64) -> Vec<f64> {
    batch
        .iter()
        .map(|t| {
            if t.done {
                t.reward
            } else {
                let q = qnet::forward(target_params, &t.next_state)
                    .expect("state dimension matches the network");
                t.reward + gamma * q.max()
            }
        })
        .collect()
}

/// Linear interpolation from `epsilon_start` to `epsilon_end` over
/// `epsilon_decay_episodes`, clamped afterwards.
pub fn epsilon_schedule(config: &AgentConfig, episode: usize) -> f64 {
    if config.epsilon_decay_episodes == 0 || episode >= config.epsilon_decay_episodes {
        return config.epsilon_end;
    }
    let frac = episode as f64 / config.epsilon_decay_episodes as f64;
    config.epsilon_start + (config.epsilon_end - config.epsilon_start) * frac
}

/// Deep Q-learning agent with a periodically synchronized target network.
#[derive(Debug)]
pub struct DqnAgent {
    config: AgentConfig,
    online: MlpParams,
    target: MlpParams,
    replay: ReplayBuffer,
    action_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
    reset_rng: ChaCha8Rng,
    global_step: usize,
    episodes_trained: usize,
}

impl DqnAgent {
    /// Build an agent. The network's `init_seed` is derived from
    /// `config.seed`, so one seed fixes the entire run.
    pub fn new(config: AgentConfig, net: &MlpConfig) -> Self {
        let mut master = ChaCha8Rng::seed_from_u64(config.seed);
        let net = MlpConfig { init_seed: master.gen(), ..net.clone() };
        let action_rng = ChaCha8Rng::seed_from_u64(master.gen());
        let replay_rng = ChaCha8Rng::seed_from_u64(master.gen());
        let reset_rng = ChaCha8Rng::seed_from_u64(master.gen());
        let online = MlpParams::init(&net);
        let target = online.clone();
        let replay = ReplayBuffer::new(config.buffer_capacity);
        Self {
            config,
            online,
            target,
            replay,
            action_rng,
            replay_rng,
            reset_rng,
            global_step: 0,
            episodes_trained: 0,
        }
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn online_params(&self) -> &MlpParams {
        &self.online
    }

    pub fn target_params(&self) -> &MlpParams {
        &self.target
    }

    pub fn replay(&self) -> &ReplayBuffer {
        &self.replay
    }

    pub fn episodes_trained(&self) -> usize {
        self.episodes_trained
    }

    /// Run one training episode against the wrapped environment.
    ///
    /// Per step: select with the current epsilon, route through the safety
    /// wrapper, store the transition, and once the buffer holds
    /// `train_start_size` transitions do one SGD update on a uniform batch.
    /// The target network is refreshed every `target_sync_interval`
    /// environment steps.
    pub fn train_episode<E: Environment>(
        &mut self,
        wrapper: &mut SafeEnvWrapper<E>,
    ) -> Result<EpisodeOutcome, EnvError> {
        let epsilon = epsilon_schedule(&self.config, self.episodes_trained);
        let reset_seed = self.reset_rng.gen::<u64>();
        let mut state = wrapper.reset(reset_seed);
        let episode = wrapper.episode();

        let mut stats = EpisodeStats {
            episode,
            total_raw_reward: 0.0,
            total_shaped_reward: 0.0,
            cvc: 0,
            steps: 0,
            epsilon_used: epsilon,
        };
        let mut violations = Vec::new();

        loop {
            let requested = select_action(&self.online, &state, epsilon, &mut self.action_rng);
            let result = wrapper.step(&state, requested)?;

            stats.total_raw_reward += result.inner.reward;
            stats.total_shaped_reward += result.shaped_reward;
            stats.steps += 1;
            if !result.violations.is_empty() {
                stats.cvc += 1;
            }
            violations.extend(result.violations);

            let done = result.inner.done;
            let truncated = result.inner.truncated;
            self.replay.push(Transition {
                state,
                requested_action: result.requested_action,
                executed_action: result.executed_action,
                reward: result.shaped_reward,
                next_state: result.inner.next_state.clone(),
                done,
            });

            if self.replay.len() >= self.config.train_start_size {
                let batch = self.replay.sample(&mut self.replay_rng, self.config.batch_size);
                let targets = td_targets(&self.target, &batch, self.config.gamma);
                let items: Vec<(&State, usize, f64)> = batch
                    .iter()
                    .zip(&targets)
                    .map(|(t, y)| (&t.state, t.executed_action, *y))
                    .collect();
                let grads = qnet::backward_params(&self.online, &items)
                    .expect("batch is nonempty and dimensions match");
                qnet::sgd_update(&mut self.online, &grads, self.config.learning_rate);
            }

            self.global_step += 1;
            if self.global_step % self.config.target_sync_interval == 0 {
                self.target = self.online.clone();
            }

            if done || truncated {
                break;
            }
            state = result.inner.next_state;
        }

        self.episodes_trained += 1;
        Ok(EpisodeOutcome { stats, violations })
    }
}

/// One step of a greedy (no-learning) rollout.
#[derive(Debug, Clone)]
pub struct RolloutStep {
    pub episode: usize,
    pub step: usize,
    pub state: State,
    pub requested_action: usize,
    pub executed_action: usize,
    pub reward_raw: f64,
    pub reward_shaped: f64,
    pub violations: Vec<ViolationEvent>,
    /// Constraints still violated by the executed action (post-enforcement).
    pub executed_violations: usize,
}

#[derive(Debug, Clone)]
pub struct RolloutEpisode {
    pub stats: EpisodeStats,
    pub steps: Vec<RolloutStep>,
}

/// Roll out the greedy policy of `params` for `episodes` episodes.
pub fn greedy_rollout<E: Environment>(
    params: &MlpParams,
    wrapper: &mut SafeEnvWrapper<E>,
    episodes: usize,
    seed: u64,
) -> Result<Vec<RolloutEpisode>, EnvError> {
    let mut reset_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut state = wrapper.reset(reset_rng.gen());
        let episode = wrapper.episode();
        let mut stats = EpisodeStats {
            episode,
            total_raw_reward: 0.0,
            total_shaped_reward: 0.0,
            cvc: 0,
            steps: 0,
            epsilon_used: 0.0,
        };
        let mut steps = Vec::new();
        loop {
            let requested = qnet::forward(params, &state)
                .expect("state dimension matches the network")
                .argmax();
            let result = wrapper.step(&state, requested)?;
            let executed_violations = wrapper
                .constraints()
                .constraints()
                .iter()
                .filter(|c| c.margin(&state, result.executed_action) > 0.0)
                .count();

            stats.total_raw_reward += result.inner.reward;
            stats.total_shaped_reward += result.shaped_reward;
            stats.steps += 1;
            if !result.violations.is_empty() {
                stats.cvc += 1;
            }
            steps.push(RolloutStep {
                episode,
                step: stats.steps - 1,
                state: state.clone(),
                requested_action: result.requested_action,
                executed_action: result.executed_action,
                reward_raw: result.inner.reward,
                reward_shaped: result.shaped_reward,
                violations: result.violations,
                executed_violations,
            });

            if result.inner.done || result.inner.truncated {
                break;
            }
            state = result.inner.next_state;
        }
        out.push(RolloutEpisode { stats, steps });
    }
    Ok(out)
}
