//! Command-line pipeline: `train`, `eval`, `explain`, and `report`.
//!
//! Each subcommand is driven by one TOML config (see [`crate::config`]) plus
//! a few override flags. A training run produces a self-contained run
//! directory:
//!
//! ```text
//! runs/<run_id>/
//!   config.toml       # snapshot of the effective config
//!   checkpoint.mlp    # trained Q-network
//!   baselines.csv     # background states frozen for attribution
//!   episodes.csv      # per-episode stats
//!   violations.csv    # violation events (when any occurred)
//!   run.json          # the full run log
//! ```
//!
//! `explain` adds `attributions.csv`, heatmap matrices, and a SHAP
//! importance table; `report` turns those artifacts into tidy plot-ready
//! series. Exit codes: 0 success, 2 config error, 3 I/O error, 4 runtime
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::agent::{greedy_rollout, DqnAgent, RolloutEpisode};
use crate::config::{ConfigError, RunConfig};
use crate::env::{EnvError, State};
use crate::explain::{
    heatmap_matrix, mean_abs_attribution, saliency, shap_exact, shap_kernel, AttributionMethod,
    AttributionRecord, BaselineSet, ExplainError,
};
use crate::qnet::{self, MlpParams, QnetError};
use crate::safety::{EnforcementMode, SafeEnvWrapper};
use crate::telemetry::{self, fmt_float, RunLog, RunSummary, TelemetryError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Telemetry(#[from] TelemetryError),
    #[error("missing required files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingFiles(Vec<PathBuf>),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error("checkpoint error: {0}")]
    Checkpoint(QnetError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Validation(_) => 2,
            CliError::Telemetry(e) => match e {
                TelemetryError::Io { .. } | TelemetryError::Malformed { .. } => 3,
                _ => 4,
            },
            CliError::MissingFiles(_) | CliError::Io { .. } => 3,
            CliError::Checkpoint(e) => match e {
                QnetError::Io(_) => 3,
                _ => 2,
            },
            CliError::Env(_) | CliError::Explain(_) => 4,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

#[derive(Parser)]
#[command(
    name = "saferl",
    version,
    about = "Constrained, explainable Q-learning on CartPole: train, evaluate, explain, report"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent under the configured constraints; writes a run directory
    Train(RunArgs),
    /// Greedy evaluation of a trained checkpoint (no learning)
    Eval(CheckpointArgs),
    /// Attribute a checkpoint's decisions with SHAP and saliency
    Explain(CheckpointArgs),
    /// Derive plot-ready CSV series from a run directory
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to the TOML run config
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: runs/<run_id>)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the enforcement mode: observe | penalize | project | terminate
    #[arg(long)]
    mode: Option<String>,
    /// Penalty weight; requires penalize mode (default 0.1 when switching)
    #[arg(long)]
    lambda: Option<f64>,
    /// Override the episode count (training episodes, or rollout episodes
    /// for eval/explain)
    #[arg(long)]
    episodes: Option<usize>,
}

#[derive(Args)]
struct CheckpointArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Checkpoint written by `train`
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory containing episodes.csv and attributions.csv
    #[arg(long)]
    run: PathBuf,
    /// Feature names for temporal SHAP series (comma separated)
    #[arg(long, value_delimiter = ',')]
    features: Vec<String>,
    /// Output directory (default: <run>/report)
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Entry point for the `saferl` binary.
pub fn run() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Train(args) => {
            let config = load_with_overrides(&args)?;
            let out_dir = resolve_out_dir(&args, &config);
            let outputs = cmd_train(&config, &out_dir)?;
            println!("run directory: {}", outputs.run_dir.display());
            Ok(())
        }
        Command::Eval(args) => {
            let config = load_with_overrides(&args.run)?;
            let episodes = args.run.episodes.unwrap_or(config.explain.episodes);
            let out_dir = args
                .run
                .out
                .clone()
                .unwrap_or_else(|| parent_dir(&args.checkpoint));
            let report = cmd_eval(&config, &args.checkpoint, episodes, Some(&out_dir))?;
            print_eval(&report);
            Ok(())
        }
        Command::Explain(args) => {
            let config = load_with_overrides(&args.run)?;
            let episodes = args.run.episodes.unwrap_or(config.explain.episodes);
            let out_dir = args
                .run
                .out
                .clone()
                .unwrap_or_else(|| parent_dir(&args.checkpoint));
            let outputs = cmd_explain(&config, &args.checkpoint, episodes, &out_dir)?;
            print_importance(&outputs.importance);
            println!("attributions: {}", outputs.attributions.display());
            Ok(())
        }
        Command::Report(args) => {
            let outputs = cmd_report(&args.run, &args.features, args.out.as_deref())?;
            println!("violation trend: {}", outputs.violation_trend.display());
            for (name, path) in &outputs.temporal_series {
                println!("temporal series ({name}): {}", path.display());
            }
            Ok(())
        }
    }
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

fn load_with_overrides(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(mode) = &args.mode {
        config.safety = match mode.as_str() {
            "observe" => EnforcementMode::Observe,
            "penalize" => EnforcementMode::Penalize {
                lambda: args.lambda.unwrap_or(match config.safety {
                    EnforcementMode::Penalize { lambda } => lambda,
                    _ => 0.1,
                }),
            },
            "project" => EnforcementMode::Project,
            "terminate" => EnforcementMode::Terminate,
            other => {
                return Err(CliError::Validation(format!(
                    "unknown mode {other:?}: expected observe, penalize, project, or terminate"
                )))
            }
        };
    } else if let Some(lambda) = args.lambda {
        match config.safety {
            EnforcementMode::Penalize { .. } => {
                config.safety = EnforcementMode::Penalize { lambda };
            }
            _ => {
                return Err(CliError::Validation(
                    "--lambda requires penalize mode (set --mode penalize)".into(),
                ))
            }
        }
    }
    if let Some(episodes) = args.episodes {
        config.agent.episodes = episodes;
        config.explain.episodes = episodes;
    }
    config.validate()?;
    Ok(config)
}

fn resolve_out_dir(args: &RunArgs, config: &RunConfig) -> PathBuf {
    args.out
        .clone()
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(config.run_id()))
}

pub struct TrainOutputs {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub log: RunLog,
}

/// Train for `config.agent.episodes` episodes and write the run directory.
pub fn cmd_train(config: &RunConfig, out_dir: &Path) -> Result<TrainOutputs, CliError> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let env = config.build_env()?;
    let mut wrapper = SafeEnvWrapper::new(env, config.build_constraints(), config.safety);
    let agent_config = config.agent_config();
    let episodes = agent_config.episodes;
    let train_start = agent_config.train_start_size;
    let mut agent = DqnAgent::new(agent_config, &config.network_config());

    let mut log = RunLog::new(config.run_id(), config.snapshot_json());
    let mut baselines: Option<Vec<State>> = None;
    let mut baseline_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x62617365);

    let progress_every = (episodes / 10).max(1);
    for i in 0..episodes {
        let outcome = agent.train_episode(&mut wrapper)?;
        if i % progress_every == 0 || i + 1 == episodes {
            println!(
                "episode {:>4}/{}: reward {:>6.1}, cvc {:>3}, epsilon {:.3}",
                i + 1,
                episodes,
                outcome.stats.total_raw_reward,
                outcome.stats.cvc,
                outcome.stats.epsilon_used
            );
        }
        log.record_episode(outcome.stats)?;
        for v in outcome.violations {
            log.record_violation(v)?;
        }
        // Freeze the attribution background once early replay is available.
        if baselines.is_none() && agent.replay().len() >= train_start {
            baselines = Some(sample_baselines(&agent, config.explain.baseline_size, &mut baseline_rng));
        }
    }
    let baselines = baselines
        .unwrap_or_else(|| sample_baselines(&agent, config.explain.baseline_size, &mut baseline_rng));

    let checkpoint = out_dir.join("checkpoint.mlp");
    qnet::save_checkpoint(agent.online_params(), &checkpoint).map_err(CliError::Checkpoint)?;
    let config_path = out_dir.join("config.toml");
    std::fs::write(&config_path, config.to_toml_string()).map_err(io_err(&config_path))?;
    save_baselines(&baselines, &wrapper.spec().feature_names, &out_dir.join("baselines.csv"))?;

    telemetry::export_episodes_csv(&log, &out_dir.join("episodes.csv"))?;
    if !log.violation_events.is_empty() {
        telemetry::export_violations_csv(&log, &out_dir.join("violations.csv"))?;
    }
    telemetry::export_json(&log, &out_dir.join("run.json"))?;

    let summary = telemetry::summarize(&log, config.agent.gamma)?;
    println!(
        "trained {} episodes: mean reward {:.1}, mean cvc {:.2}, safe from episode {}",
        summary.episodes,
        summary.mean_raw_reward,
        summary.mean_cvc,
        summary
            .first_all_safe_episode
            .map_or_else(|| "never".to_string(), |e| e.to_string())
    );
    Ok(TrainOutputs { run_dir: out_dir.to_path_buf(), checkpoint, log })
}

/// Background states for attribution: a seeded sample of early replay
/// states plus the zero state.
fn sample_baselines(agent: &DqnAgent, size: usize, rng: &mut ChaCha8Rng) -> Vec<State> {
    let replay = agent.replay();
    let mut states = Vec::with_capacity(size + 1);
    if replay.len() > 0 {
        let pool: Vec<&State> = replay.iter().map(|t| &t.state).collect();
        for _ in 0..size {
            states.push(pool[rng.gen_range(0..pool.len())].clone());
        }
    }
    states.push(State::new(vec![0.0; 4]));
    states
}

pub fn save_baselines(
    states: &[State],
    feature_names: &[String],
    path: &Path,
) -> Result<(), CliError> {
    let mut out = feature_names.join(",");
    out.push('\n');
    for s in states {
        let row: Vec<String> = s.values().iter().map(|v| fmt_float(*v)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_err(path))
}

pub fn load_baselines(path: &Path) -> Result<Vec<State>, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut states = Vec::new();
    for line in text.lines().skip(1) {
        if line.is_empty() {
            continue;
        }
        let values = line
            .split(',')
            .map(|t| {
                t.parse::<f64>().map_err(|_| {
                    CliError::Validation(format!("bad baseline value {t:?} in {}", path.display()))
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
        states.push(State::new(values));
    }
    if states.is_empty() {
        return Err(CliError::Validation(format!("no baseline states in {}", path.display())));
    }
    Ok(states)
}

fn load_checkpoint_for(config: &RunConfig, path: &Path) -> Result<MlpParams, CliError> {
    let params = qnet::load_checkpoint(path).map_err(CliError::Checkpoint)?;
    let env = config.build_env()?;
    let spec = crate::env::Environment::spec(&env);
    if params.input_dim() != spec.state_dim || params.output_dim() != spec.action_count {
        return Err(CliError::Validation(format!(
            "checkpoint {} maps {} -> {} but the environment needs {} -> {}",
            path.display(),
            params.input_dim(),
            params.output_dim(),
            spec.state_dim,
            spec.action_count
        )));
    }
    Ok(params)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub summary: RunSummary,
    /// Steps whose requested action violated a constraint.
    pub requested_violation_steps: usize,
    /// Steps whose executed action still violated a constraint
    /// (post-enforcement; zero under projection whenever a safe action existed).
    pub executed_violation_steps: usize,
}

/// Greedy rollouts of a checkpoint, no learning; summary printed and saved.
pub fn cmd_eval(
    config: &RunConfig,
    checkpoint: &Path,
    episodes: usize,
    out_dir: Option<&Path>,
) -> Result<EvalReport, CliError> {
    if episodes == 0 {
        return Err(CliError::Validation("eval needs at least one episode".into()));
    }
    let params = load_checkpoint_for(config, checkpoint)?;
    let env = config.build_env()?;
    let mut wrapper = SafeEnvWrapper::new(env, config.build_constraints(), config.safety);
    let rollouts = greedy_rollout(&params, &mut wrapper, episodes, config.seed)?;

    let mut log = RunLog::new(config.run_id(), config.snapshot_json());
    let mut requested_violation_steps = 0;
    let mut executed_violation_steps = 0;
    for ep in &rollouts {
        log.record_episode(ep.stats.clone())?;
        for step in &ep.steps {
            if !step.violations.is_empty() {
                requested_violation_steps += 1;
            }
            if step.executed_violations > 0 {
                executed_violation_steps += 1;
            }
            for v in &step.violations {
                log.record_violation(v.clone())?;
            }
        }
    }
    let summary = telemetry::summarize(&log, config.agent.gamma)?;
    let report = EvalReport { summary, requested_violation_steps, executed_violation_steps };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("eval_summary.json");
        let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(report)
}

fn print_eval(report: &EvalReport) {
    let s = &report.summary;
    println!(
        "eval: {} episodes, mean reward {:.1}, mean cvc {:.2}",
        s.episodes, s.mean_raw_reward, s.mean_cvc
    );
    println!(
        "violating steps: {} requested, {} executed",
        report.requested_violation_steps, report.executed_violation_steps
    );
}

pub struct ExplainOutputs {
    pub attributions: PathBuf,
    pub shap_heatmap: PathBuf,
    pub saliency_heatmap: PathBuf,
    pub saliency_heatmap_signed: PathBuf,
    pub importance_csv: PathBuf,
    /// `(feature, mean |SHAP|)` sorted descending.
    pub importance: Vec<(String, f64)>,
    pub log: RunLog,
}

/// Roll out the greedy policy and attribute every k-th step with both the
/// configured SHAP method and input-gradient saliency.
pub fn cmd_explain(
    config: &RunConfig,
    checkpoint: &Path,
    episodes: usize,
    out_dir: &Path,
) -> Result<ExplainOutputs, CliError> {
    if episodes == 0 {
        return Err(CliError::Validation("explain needs at least one episode".into()));
    }
    let params = load_checkpoint_for(config, checkpoint)?;
    let env = config.build_env()?;
    let mut wrapper = SafeEnvWrapper::new(env, config.build_constraints(), config.safety);
    let feature_names = wrapper.spec().feature_names.clone();
    let rollouts = greedy_rollout(&params, &mut wrapper, episodes, config.seed)?;

    // Prefer the baseline set frozen at training time; otherwise fall back
    // to a seeded sample of the states visited by these rollouts.
    let baseline_path = parent_dir(checkpoint).join("baselines.csv");
    let baseline_states = if baseline_path.is_file() {
        load_baselines(&baseline_path)?
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x62617365);
        let pool: Vec<&State> =
            rollouts.iter().flat_map(|ep| ep.steps.iter().map(|st| &st.state)).collect();
        let mut states: Vec<State> = (0..config.explain.baseline_size)
            .map(|_| pool[rng.gen_range(0..pool.len())].clone())
            .collect();
        states.push(State::new(vec![0.0; 4]));
        states
    };
    let baselines = BaselineSet::new(baseline_states)?;

    let mut kernel_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6b65726e);
    let mut log = RunLog::new(config.run_id(), config.snapshot_json());
    attribute_rollouts(
        &rollouts,
        &params,
        &baselines,
        config.explain.method,
        config.explain.n_samples,
        config.explain.every_k_steps,
        &mut kernel_rng,
        &mut log,
    )?;

    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let attributions = out_dir.join("attributions.csv");
    telemetry::export_attributions_csv(&log, &attributions)?;

    let shap_heatmap = out_dir.join("heatmap_shap.csv");
    let shap_matrix = heatmap_matrix(&log.attribution_records, config.explain.method, false)
        .expect("shap records exist");
    telemetry::export_heatmap_csv(&shap_matrix, &feature_names, &shap_heatmap)?;

    let saliency_heatmap = out_dir.join("heatmap_saliency.csv");
    let saliency_matrix =
        heatmap_matrix(&log.attribution_records, AttributionMethod::Saliency, false)
            .expect("saliency records exist");
    telemetry::export_heatmap_csv(&saliency_matrix, &feature_names, &saliency_heatmap)?;

    // Signed variant for gradient polarity inspection.
    let saliency_heatmap_signed = out_dir.join("heatmap_saliency_signed.csv");
    let signed_matrix =
        heatmap_matrix(&log.attribution_records, AttributionMethod::Saliency, true)
            .expect("saliency records exist");
    telemetry::export_heatmap_csv(&signed_matrix, &feature_names, &saliency_heatmap_signed)?;

    let means = mean_abs_attribution(&log.attribution_records, config.explain.method)
        .expect("shap records exist");
    let mut importance: Vec<(String, f64)> =
        feature_names.iter().cloned().zip(means).collect();
    importance.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let importance_csv = out_dir.join("shap_importance.csv");
    let mut text = String::from("feature,mean_abs_shap\n");
    for (name, value) in &importance {
        text.push_str(&format!("{name},{}\n", fmt_float(*value)));
    }
    std::fs::write(&importance_csv, text).map_err(io_err(&importance_csv))?;

    Ok(ExplainOutputs {
        attributions,
        shap_heatmap,
        saliency_heatmap,
        saliency_heatmap_signed,
        importance_csv,
        importance,
        log,
    })
}

#[allow(clippy::too_many_arguments)]
fn attribute_rollouts(
    rollouts: &[RolloutEpisode],
    params: &MlpParams,
    baselines: &BaselineSet,
    method: AttributionMethod,
    n_samples: usize,
    every_k: usize,
    kernel_rng: &mut ChaCha8Rng,
    log: &mut RunLog,
) -> Result<(), CliError> {
    for ep in rollouts {
        log.record_episode(ep.stats.clone())?;
    }
    for ep in rollouts {
        for step in ep.steps.iter().filter(|st| st.step % every_k == 0) {
            // Attribute the action the policy chose (its greedy request).
            let action = step.requested_action;
            let shap: AttributionRecord = match method {
                AttributionMethod::ShapKernel => {
                    shap_kernel(params, &step.state, action, baselines, n_samples, kernel_rng)?.0
                }
                _ => shap_exact(params, &step.state, action, baselines)?,
            };
            log.record_attribution(shap.at(step.episode, step.step))?;
            let grad = saliency(params, &step.state, action)?;
            log.record_attribution(grad.at(step.episode, step.step))?;
        }
    }
    Ok(())
}

fn print_importance(importance: &[(String, f64)]) {
    println!("{:<24} {}", "feature", "mean |SHAP|");
    for (name, value) in importance {
        println!("{name:<24} {value:.6}");
    }
}

pub struct ReportOutputs {
    pub violation_trend: PathBuf,
    pub shap_heatmap: PathBuf,
    pub saliency_heatmap: Option<PathBuf>,
    /// `(feature, path)` per requested temporal series.
    pub temporal_series: Vec<(String, PathBuf)>,
}

/// Turn a run directory into tidy plot-data series: the per-episode
/// violation trend and per-feature temporal attribution lines.
pub fn cmd_report(
    run_dir: &Path,
    features: &[String],
    out_dir: Option<&Path>,
) -> Result<ReportOutputs, CliError> {
    let episodes_path = run_dir.join("episodes.csv");
    let attributions_path = run_dir.join("attributions.csv");
    let missing: Vec<PathBuf> = [&episodes_path, &attributions_path]
        .into_iter()
        .filter(|p| !p.is_file())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(CliError::MissingFiles(missing));
    }

    let out = out_dir.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join("report"));
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;

    // Violation trend: (episode, cvc).
    let episodes = telemetry::import_episodes_csv(&episodes_path)?;
    let violation_trend = out.join("violation_trend.csv");
    let mut text = String::from("episode,cvc\n");
    for s in &episodes.stats {
        text.push_str(&format!("{},{}\n", s.episode, s.cvc));
    }
    std::fs::write(&violation_trend, text).map_err(io_err(&violation_trend))?;

    let attributions = telemetry::import_attributions_csv(&attributions_path)?;
    let records = &attributions.records;
    let shap_method = records
        .iter()
        .map(|r| r.method)
        .find(|m| m.is_shap())
        .ok_or_else(|| CliError::Validation("no SHAP records in attributions.csv".into()))?;

    // Feature names: the CartPole ordering (reports always use names, never
    // bare indices).
    let env = crate::env::CartPole::new(crate::env::CartPoleParams::default())?;
    let feature_names = crate::env::Environment::spec(&env).feature_names.clone();

    let shap_matrix =
        heatmap_matrix(records, shap_method, false).expect("shap records are present");
    let shap_heatmap = out.join("heatmap_shap.csv");
    telemetry::export_heatmap_csv(&shap_matrix, &feature_names, &shap_heatmap)?;

    let saliency_heatmap = match heatmap_matrix(records, AttributionMethod::Saliency, false) {
        Some(matrix) => {
            let path = out.join("heatmap_saliency.csv");
            telemetry::export_heatmap_csv(&matrix, &feature_names, &path)?;
            Some(path)
        }
        None => None,
    };

    // Temporal attribution lines: (episode, mean |phi_j|) per feature.
    let selected: Vec<String> = if features.is_empty() {
        vec!["pole_angle".into(), "pole_angular_velocity".into()]
    } else {
        features.to_vec()
    };
    let mut temporal_series = Vec::with_capacity(selected.len());
    for name in &selected {
        let Some(j) = feature_names.iter().position(|f| f == name) else {
            return Err(CliError::Validation(format!(
                "unknown feature {name:?}; expected one of {feature_names:?}"
            )));
        };
        let path = out.join(format!("temporal_shap_{name}.csv"));
        let mut text = String::from("episode,mean_abs_shap\n");
        for (col, ep) in shap_matrix.episodes.iter().enumerate() {
            text.push_str(&format!("{ep},{}\n", fmt_float(shap_matrix.rows[j][col])));
        }
        std::fs::write(&path, text).map_err(io_err(&path))?;
        temporal_series.push((name.clone(), path));
    }

    Ok(ReportOutputs { violation_trend, shap_heatmap, saliency_heatmap, temporal_series })
}
