//! Experiment configuration, orchestration and result export.

use std::fmt;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{
    dp_optimal_trajectory, DpGrid, GreedyPolicy, HeuristicPolicy, LeaderPath, Tldqn, TldqnLearner, TLDQN_CRUISE_GAMMA,
    TLDQN_THRESHOLD, TLDQN_TRAJECTORY_GAMMA,
};
use crate::intersection::{run_intersection, scaled_traffic_level, IeConfig, FULL_HORIZON_S, FULL_TRAFFIC_LEVELS};
use crate::kinematics::{derive_seed, Action, LaneId, SimConfig, TrajectoryLog, TrajectoryRow, NUM_ACTIONS};
use crate::md_rl::{
    train, DiscountVector, DqnLearner, EpsilonSchedule, TargetRule, TrainConfig, TrainError, TrainLog,
};
use crate::mdp::{make_ve_episode, rollout, DrivingPolicy, EpisodeConfig, LeaderMode, Observation, VeEpisode};
use crate::metrics::{
    action_latency_stats, trajectory_diff, trajectory_performance_x, write_summary_csv, EvalReport, LatencyStats,
    SummaryRow,
};
use crate::nn::{ActionValues, Activation, Checkpoint, Mlp, MlpSpec, NnError, OptimizerKind, CHECKPOINT_VERSION};
use crate::polling::{write_schedule_log, PollingPolicy, SchedulerKind};
use crate::verify::{run_all, VerifyReport, VerifySettings};

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("property failure: {0}")]
    Property(String),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("{0}")]
    Runtime(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Runtime(_) => 1,
            HarnessError::Property(_) => 2,
            HarnessError::Divergence(_) => 3,
        }
    }
}

impl From<TrainError> for HarnessError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } => HarnessError::Divergence(e.to_string()),
            TrainError::InvalidConfig(m) => HarnessError::Config(m),
            other => HarnessError::Runtime(other.to_string()),
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for HarnessError {
            fn from(e: $t) -> Self {
                HarnessError::Runtime(e.to_string())
            }
        }
    )*};
}
runtime_from!(
    NnError,
    crate::mdp::MdpError,
    crate::intersection::IeError,
    crate::metrics::MetricsError,
    crate::polling::ScheduleError,
    crate::kinematics::SimError,
    csv::Error,
    serde_json::Error
);

fn io_err(path: &Path, e: std::io::Error) -> HarnessError {
    HarnessError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setup {
    #[default]
    Ve,
    Ie,
}

impl FromStr for Setup {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ve" => Ok(Setup::Ve),
            "ie" => Ok(Setup::Ie),
            _ => Err(HarnessError::Config(format!("unknown setup {s:?} (ve, ie)"))),
        }
    }
}

/// Agent names as written in configs and on the command line:
/// `md_dqn`, `dqn_fixed(0.9)`, `tldqn`, `heuristic`, `dp_oracle`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AgentKind {
    #[default]
    MdDqn,
    DqnFixed(f64),
    Tldqn,
    Heuristic,
    DpOracle,
}

impl AgentKind {
    pub fn is_learned(&self) -> bool {
        matches!(self, AgentKind::MdDqn | AgentKind::DqnFixed(_) | AgentKind::Tldqn)
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentKind::MdDqn => write!(f, "md_dqn"),
            AgentKind::DqnFixed(g) => write!(f, "dqn_fixed({g})"),
            AgentKind::Tldqn => write!(f, "tldqn"),
            AgentKind::Heuristic => write!(f, "heuristic"),
            AgentKind::DpOracle => write!(f, "dp_oracle"),
        }
    }
}

impl FromStr for AgentKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let kind = match s {
            "md_dqn" => AgentKind::MdDqn,
            "tldqn" => AgentKind::Tldqn,
            "heuristic" => AgentKind::Heuristic,
            "dp_oracle" => AgentKind::DpOracle,
            _ => {
                let g = s
                    .strip_prefix("dqn_fixed(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|g| g.trim().parse::<f64>().ok())
                    .ok_or_else(|| HarnessError::Config(format!("unknown agent {s:?}")))?;
                if !(0.0..=1.0).contains(&g) {
                    return Err(HarnessError::Config(format!("discount {g} outside [0, 1]")));
                }
                AgentKind::DqnFixed(g)
            }
        };
        Ok(kind)
    }
}

impl TryFrom<String> for AgentKind {
    type Error = HarnessError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<AgentKind> for String {
    fn from(a: AgentKind) -> Self {
        a.to_string()
    }
}

/// `fcfs`, `polling` (exhaustive), `polling(gated)`, `polling(exhaustive)`
/// or `polling(k_limited:K)`.
pub fn parse_scheduler(s: &str) -> Result<SchedulerKind, HarnessError> {
    let bad = || HarnessError::Config(format!("unknown scheduler {s:?}"));
    match s.trim() {
        "fcfs" => return Ok(SchedulerKind::Fcfs),
        "polling" => return Ok(SchedulerKind::Polling(PollingPolicy::Exhaustive)),
        _ => {}
    }
    let inner = s.trim().strip_prefix("polling(").and_then(|r| r.strip_suffix(')')).ok_or_else(bad)?;
    let policy = match inner {
        "exhaustive" => PollingPolicy::Exhaustive,
        "gated" => PollingPolicy::Gated,
        _ => {
            let k = inner.strip_prefix("k_limited:").and_then(|k| k.parse::<usize>().ok()).ok_or_else(bad)?;
            if k == 0 {
                return Err(bad());
            }
            PollingPolicy::KLimited(k)
        }
    };
    Ok(SchedulerKind::Polling(policy))
}

pub fn scheduler_name(kind: &SchedulerKind) -> String {
    match kind {
        SchedulerKind::Fcfs => "fcfs".into(),
        SchedulerKind::Polling(PollingPolicy::Exhaustive) => "polling(exhaustive)".into(),
        SchedulerKind::Polling(PollingPolicy::Gated) => "polling(gated)".into(),
        SchedulerKind::Polling(PollingPolicy::KLimited(k)) => format!("polling(k_limited:{k})"),
    }
}

/// Two-vehicle episodes for training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VeSettings {
    pub t_sched_min: f64,
    pub t_sched_max: f64,
    pub leader_gap_min: f64,
    pub leader_gap_max: f64,
    /// Leader used while training.
    pub leader: LeaderMode,
    /// Leader used by `eval` and `oracle`.
    pub eval_leader: LeaderMode,
    /// The evaluation leader drives at the speed limit instead of a
    /// sampled speed, so it never blocks an early schedule.
    pub eval_leader_full_speed: bool,
    pub hard_timeout: f64,
    /// Scheduled times swept by `eval` and `oracle`.
    pub eval_schedules: Vec<f64>,
}

impl Default for VeSettings {
    fn default() -> Self {
        let e = EpisodeConfig::default();
        Self {
            t_sched_min: e.t_sched_min,
            t_sched_max: e.t_sched_max,
            leader_gap_min: e.leader_gap_min,
            leader_gap_max: e.leader_gap_max,
            leader: e.leader,
            eval_leader: LeaderMode::Autonomous,
            eval_leader_full_speed: true,
            hard_timeout: e.hard_timeout,
            eval_schedules: (20..=32).map(f64::from).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IeSettings {
    pub horizon: f64,
    /// Vehicles over the whole horizon.
    pub traffic_level: usize,
    pub scheduler: SchedulerKind,
    pub min_schedule_lead: f64,
    pub entry_gap: f64,
    pub drain: f64,
    pub record_trajectories: bool,
}

impl Default for IeSettings {
    fn default() -> Self {
        let c = IeConfig::default();
        Self {
            horizon: c.horizon,
            traffic_level: c.traffic_level,
            scheduler: c.scheduler,
            min_schedule_lead: c.min_schedule_lead,
            entry_gap: c.entry_gap,
            drain: c.drain,
            record_trajectories: true,
        }
    }
}

/// Training settings used at desk scale: Adam on a Huber loss, 5-step
/// returns, heuristic guide episodes while ε is high, 120k steps with ε
/// reaching zero after 100k.
pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        n_step: 5,
        lr: 3e-4,
        optimizer: OptimizerKind::adam(),
        epsilon: EpsilonSchedule {
            anneal_steps: 100_000,
            ..EpsilonSchedule::default()
        },
        max_steps: 120_000,
        guide_fraction: 0.5,
        huber_delta: Some(1.0),
        net: MlpSpec::new(crate::mdp::NUM_FEATURES, &[64, 64], Activation::Relu, 0),
        ..TrainConfig::default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub setup: Setup,
    pub agent: AgentKind,
    pub sim: SimConfig,
    pub ve: VeSettings,
    pub ie: IeSettings,
    pub train: TrainConfig,
    /// Per-objective discounts of the multi-discount agent.
    pub discounts: DiscountVector,
    pub tldqn_threshold: f64,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Trained agent for `eval`, or the starting point when training resumes.
    pub checkpoint: Option<PathBuf>,
    /// Full 30-minute horizon, full traffic levels and 360k training steps.
    pub paper_scale: bool,
    /// Worker threads for `batch`; 0 uses every available core.
    pub threads: usize,
    pub verify: VerifySettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            setup: Setup::Ve,
            agent: AgentKind::MdDqn,
            sim: SimConfig::default(),
            ve: VeSettings::default(),
            ie: IeSettings::default(),
            train: desk_train_config(),
            discounts: DiscountVector::default(),
            tldqn_threshold: TLDQN_THRESHOLD,
            seeds: vec![0],
            out_dir: PathBuf::from("runs"),
            checkpoint: None,
            paper_scale: false,
            threads: 0,
            verify: VerifySettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// Keys absent from `text`, at any depth, keep their default values.
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let err = |e: serde_json::Error| HarnessError::Config(e.to_string());
        let given: serde_json::Value = serde_json::from_str(text).map_err(err)?;
        let mut merged = serde_json::to_value(Self::default()).map_err(err)?;
        merge(&mut merged, given);
        serde_json::from_value(merged).map_err(err)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let cfg = |e: String| HarnessError::Config(e);
        self.sim.validate().map_err(|e| cfg(e.to_string()))?;
        self.train.validate().map_err(|e| cfg(e.to_string()))?;
        self.discounts.validate().map_err(|e| cfg(e.to_string()))?;
        if self.train.net.input_size() != crate::mdp::NUM_FEATURES {
            return Err(cfg(format!("network input must be {}", crate::mdp::NUM_FEATURES)));
        }
        if self.seeds.is_empty() {
            return Err(cfg("at least one seed is required".into()));
        }
        let v = &self.ve;
        if !(v.t_sched_min > 0.0 && v.t_sched_min <= v.t_sched_max) || !(0.0 <= v.leader_gap_min && v.leader_gap_min <= v.leader_gap_max) {
            return Err(cfg("ve schedule or gap range is empty".into()));
        }
        if v.eval_schedules.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(cfg("eval schedules must be positive".into()));
        }
        if !(self.ie.horizon >= 0.0 && self.ie.drain >= 0.0 && self.ie.min_schedule_lead >= 0.0 && self.ie.entry_gap >= 0.0) {
            return Err(cfg("ie durations and gaps must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.tldqn_threshold) {
            return Err(cfg("tldqn_threshold must lie in [0, 1]".into()));
        }
        if let SchedulerKind::Polling(PollingPolicy::KLimited(0)) = self.ie.scheduler {
            return Err(cfg("k_limited needs k ≥ 1".into()));
        }
        Ok(())
    }

    /// Applies the full-scale switch; a no-op when it is off.
    pub fn effective(&self) -> Self {
        let mut c = self.clone();
        if c.paper_scale {
            let rate = if c.ie.horizon > 0.0 { c.ie.traffic_level as f64 / c.ie.horizon } else { 0.0 };
            c.ie.traffic_level = (rate * FULL_HORIZON_S).round() as usize;
            c.ie.horizon = FULL_HORIZON_S;
            c.train.max_steps = c.train.max_steps.max(360_000);
            c.train.epsilon.anneal_steps = c.train.epsilon.anneal_steps.max(120_000);
        }
        c
    }

    pub fn episode_config(&self, leader: LeaderMode) -> EpisodeConfig {
        EpisodeConfig {
            sim: self.sim,
            t_sched_min: self.ve.t_sched_min,
            t_sched_max: self.ve.t_sched_max,
            leader_gap_min: self.ve.leader_gap_min,
            leader_gap_max: self.ve.leader_gap_max,
            leader,
            hard_timeout: self.ve.hard_timeout,
        }
    }

    pub fn ie_config(&self, seed: u64) -> IeConfig {
        IeConfig {
            sim: self.sim,
            horizon: self.ie.horizon,
            traffic_level: self.ie.traffic_level,
            scheduler: self.ie.scheduler,
            seed,
            min_schedule_lead: self.ie.min_schedule_lead,
            entry_gap: self.ie.entry_gap,
            drain: self.ie.drain,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = seed;
        t.net.init_seed = seed;
        t
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) if !o.contains_key("kind") => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Desk-scale traffic levels, proportional to the full per-30-minute
/// counts.
pub fn desk_traffic_levels(horizon: f64) -> [usize; 3] {
    FULL_TRAFFIC_LEVELS.map(|l| scaled_traffic_level(l, horizon))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub code_version: String,
    pub seeds: Vec<u64>,
    pub config: ExperimentConfig,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn write_manifest(dir: &Path, command: &str, cfg: &ExperimentConfig, seeds: &[u64]) -> Result<(), HarnessError> {
    create_dir(dir)?;
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            command: command.to_string(),
            code_version: CODE_VERSION.to_string(),
            seeds: seeds.to_vec(),
            config: cfg.clone(),
        },
    )
}

/// A trained agent as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentCheckpoint {
    pub agent: AgentKind,
    pub steps_trained: u64,
    /// One network, or the cruise and trajectory networks of TLDQN.
    pub nets: Vec<Checkpoint>,
    pub threshold: Option<f64>,
}

/// A trained agent ready to act.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedPolicy {
    Single(Mlp),
    Lexicographic(Tldqn),
}

impl ActionValues for TrainedPolicy {
    fn action_values(&self, obs: &[f64]) -> Result<[f64; NUM_ACTIONS], NnError> {
        match self {
            TrainedPolicy::Single(net) => net.action_values(obs),
            TrainedPolicy::Lexicographic(t) => t.action_values(obs),
        }
    }
}

impl AgentCheckpoint {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    /// Rebuilds the policy, checking it matches `agent` and `spec`.
    pub fn policy(&self, agent: AgentKind, spec: &MlpSpec) -> Result<TrainedPolicy, HarnessError> {
        if self.agent != agent {
            return Err(HarnessError::Config(format!("checkpoint holds {} but the config asks for {agent}", self.agent)));
        }
        let nets = self
            .nets
            .iter()
            .map(|c| {
                if c.version != CHECKPOINT_VERSION || !c.spec.same_shape(spec) {
                    return Err(HarnessError::Config("checkpoint network does not match the configured spec".into()));
                }
                Mlp::from_checkpoint(c).map_err(|e| HarnessError::Config(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        match (agent, nets.as_slice()) {
            (AgentKind::Tldqn, [cruise, trajectory]) => Ok(TrainedPolicy::Lexicographic(Tldqn {
                cruise: cruise.clone(),
                trajectory: trajectory.clone(),
                threshold: self.threshold.unwrap_or(TLDQN_THRESHOLD),
            })),
            (AgentKind::MdDqn | AgentKind::DqnFixed(_), [net]) => Ok(TrainedPolicy::Single(net.clone())),
            _ => Err(HarnessError::Config(format!("checkpoint for {agent} has {} networks", nets.len()))),
        }
    }

    pub fn from_policy(agent: AgentKind, policy: &TrainedPolicy, steps_trained: u64) -> Self {
        match policy {
            TrainedPolicy::Single(net) => Self {
                agent,
                steps_trained,
                nets: vec![net.to_checkpoint()],
                threshold: None,
            },
            TrainedPolicy::Lexicographic(t) => Self {
                agent,
                steps_trained,
                nets: vec![t.cruise.to_checkpoint(), t.trajectory.to_checkpoint()],
                threshold: Some(t.threshold),
            },
        }
    }
}

enum AnyLearner {
    Single(DqnLearner),
    Lexicographic(TldqnLearner),
}

fn build_learner(cfg: &ExperimentConfig, tc: &TrainConfig) -> Result<AnyLearner, HarnessError> {
    let single = |rule| DqnLearner::new(tc.net.clone(), rule, tc.optimizer, tc.lr).map(|l| l.with_huber(tc.huber_delta));
    Ok(match cfg.agent {
        AgentKind::MdDqn => AnyLearner::Single(single(TargetRule::MultiDiscount { gammas: cfg.discounts })?),
        AgentKind::DqnFixed(gamma) => AnyLearner::Single(single(TargetRule::Fixed { gamma })?),
        AgentKind::Tldqn => {
            let mut traj_spec = tc.net.clone();
            traj_spec.init_seed = derive_seed(tc.net.init_seed, 1);
            AnyLearner::Lexicographic(TldqnLearner {
                cruise: single(TargetRule::Component {
                    index: 1,
                    gamma: TLDQN_CRUISE_GAMMA,
                })?,
                trajectory: DqnLearner::new(
                    traj_spec,
                    TargetRule::Component {
                        index: 0,
                        gamma: TLDQN_TRAJECTORY_GAMMA,
                    },
                    tc.optimizer,
                    tc.lr,
                )?
                .with_huber(tc.huber_delta),
                threshold: cfg.tldqn_threshold,
            })
        }
        other => return Err(HarnessError::Config(format!("{other} is not a learning agent"))),
    })
}

fn warm_start(learner: &mut AnyLearner, policy: TrainedPolicy) {
    match (learner, policy) {
        (AnyLearner::Single(l), TrainedPolicy::Single(net)) => {
            l.target = net.clone();
            l.online = net;
        }
        (AnyLearner::Lexicographic(l), TrainedPolicy::Lexicographic(t)) => {
            l.cruise.target = t.cruise.clone();
            l.cruise.online = t.cruise;
            l.trajectory.target = t.trajectory.clone();
            l.trajectory.online = t.trajectory;
        }
        _ => unreachable!("checkpoint kind was checked against the agent"),
    }
}

/// Trains the configured agent for one seed, warm-starting from
/// `cfg.checkpoint` when set. A resumed run continues the ε schedule where
/// the checkpoint stopped and draws fresh episodes; replay and optimizer
/// state start empty.
pub fn train_agent(cfg: &ExperimentConfig, seed: u64) -> Result<(TrainedPolicy, TrainLog, u64), HarnessError> {
    cfg.validate()?;
    let mut tc = cfg.train_config(seed);
    let mut learner = build_learner(cfg, &tc)?;
    let mut done = 0;
    if let Some(path) = &cfg.checkpoint {
        let ck = AgentCheckpoint::load(path)?;
        let policy = ck.policy(cfg.agent, &tc.net)?;
        warm_start(&mut learner, policy);
        done = ck.steps_trained;
        let eps = tc.epsilon;
        tc.epsilon = EpsilonSchedule {
            start: eps.at(done),
            end: eps.end,
            anneal_steps: eps.anneal_steps.saturating_sub(done),
        };
        tc.seed = derive_seed(seed, done);
    }
    let episodes = cfg.episode_config(cfg.ve.leader);
    let (policy, log) = match learner {
        AnyLearner::Single(mut l) => {
            let log = train(&mut l, &episodes, &tc)?;
            (TrainedPolicy::Single(l.online), log)
        }
        AnyLearner::Lexicographic(mut l) => {
            let log = train(&mut l, &episodes, &tc)?;
            (
                TrainedPolicy::Lexicographic(Tldqn {
                    cruise: l.cruise.online,
                    trajectory: l.trajectory.online,
                    threshold: l.threshold,
                }),
                log,
            )
        }
    };
    Ok((policy, log, done + tc.max_steps))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub agent: AgentKind,
    pub seed: u64,
    pub episodes: usize,
    pub steps_trained: u64,
    pub final_mean_total: f64,
}

/// Share of episodes at the end of a run that count as the final stretch.
pub const FINAL_FRACTION: f64 = 0.1;

pub const CURVE_FILES: [&str; 3] = ["curve_total.csv", "curve_r1_end.csv", "curve_r2.csv"];

pub fn write_reward_csvs(dir: &Path, log: &TrainLog) -> Result<(), HarnessError> {
    let path = dir.join("rewards.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for e in &log.episodes {
        w.serialize(e)?;
    }
    w.flush().map_err(|e| io_err(&path, e))?;
    let columns: [(&str, fn(&crate::md_rl::EpisodeLog) -> f64); 3] =
        [("total_reward", |e| e.total_reward), ("r1_end", |e| e.r1_end), ("r2_sum", |e| e.r2_sum)];
    for (file, (name, value)) in CURVE_FILES.iter().zip(columns) {
        let path = dir.join(file);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["episode", "steps", name])?;
        for e in &log.episodes {
            w.write_record([e.episode.to_string(), e.steps.to_string(), value(e).to_string()])?;
        }
        w.flush().map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

/// `train`: reward curves, checkpoint and manifest under `out`.
pub fn run_train(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<TrainSummary, HarnessError> {
    let cfg = cfg.effective();
    if cfg.setup != Setup::Ve {
        return Err(HarnessError::Config("train needs setup = ve".into()));
    }
    if !cfg.agent.is_learned() {
        return Err(HarnessError::Config(format!("{} is not trained", cfg.agent)));
    }
    write_manifest(out, "train", &cfg, &[seed])?;
    let (policy, log, steps) = train_agent(&cfg, seed)?;
    write_reward_csvs(out, &log)?;
    write_json(&out.join("checkpoint.json"), &AgentCheckpoint::from_policy(cfg.agent, &policy, steps))?;
    let summary = TrainSummary {
        agent: cfg.agent,
        seed,
        episodes: log.episodes.len(),
        steps_trained: steps,
        final_mean_total: log.final_mean_total(FINAL_FRACTION),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Times every decision of the wrapped policy.
pub struct Timed<P> {
    pub inner: P,
    pub samples: Vec<Duration>,
}

impl<P: DrivingPolicy> DrivingPolicy for Timed<P> {
    fn act(&mut self, obs: &Observation) -> Action {
        let t = Instant::now();
        let a = self.inner.act(obs);
        self.samples.push(t.elapsed());
        a
    }
}

/// The VE episode of `seed` with its schedule set to `t_sched` and the
/// follower's entry speed moved onto the oracle's speed grid, so the
/// oracle and the agent start from the same state.
pub fn ve_scenario(seed: u64, t_sched: f64, episodes: &EpisodeConfig, leader_full_speed: bool) -> VeEpisode {
    let mut e = make_ve_episode(seed, episodes);
    let grid = DpGrid::new(&episodes.sim);
    e.follower.v = grid.speeds[grid.snap(e.follower.v)];
    e.t_sched = t_sched;
    if leader_full_speed {
        if let Some(l) = &mut e.leader {
            l.state.v = episodes.sim.v_max;
        }
    }
    e
}

/// Oracle solution of a scenario and the time the solve took.
pub fn solve_scenario(e: &VeEpisode) -> (crate::baselines::DpOutcome, Duration) {
    let steps = ((e.t_sched + e.hard_timeout) / e.cfg.dt).ceil() as usize + 2;
    let started = Instant::now();
    let path = e.leader.as_ref().map(|l| LeaderPath::simulate(l, steps, &e.cfg));
    let out = dp_optimal_trajectory(&e.follower, e.t_sched, path.as_ref(), &e.cfg);
    (out, started.elapsed())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub t_sched: f64,
    pub dp_feasible: bool,
    pub x_dp: Option<f64>,
    pub dp_crossing_step: Option<usize>,
    pub dp_solve_s: f64,
    pub agent_outcome: Option<String>,
    pub x_agent: Option<f64>,
    pub diff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VeEvalResult {
    pub rows: Vec<ScheduleRow>,
    pub report: EvalReport,
    pub dp_latency: Option<LatencyStats>,
}

/// Sweeps the configured schedules on one scenario seed, comparing the
/// agent (if any) with the oracle.
pub fn evaluate_ve(
    cfg: &ExperimentConfig,
    policy: Option<&TrainedPolicy>,
    seed: u64,
    trajectories: Option<&mut Vec<TrajectoryRow>>,
) -> Result<VeEvalResult, HarnessError> {
    let episodes = cfg.episode_config(cfg.ve.eval_leader);
    let mut rows = Vec::new();
    let mut dp_times = Vec::new();
    let mut agent_times = Vec::new();
    let mut traj_rows = Vec::new();
    let mut report = EvalReport {
        label: cfg.agent.to_string(),
        ..Default::default()
    };
    for (i, &t_sched) in cfg.ve.eval_schedules.iter().enumerate() {
        let e = ve_scenario(seed, t_sched, &episodes, cfg.ve.eval_leader_full_speed);
        let (dp, solve) = solve_scenario(&e);
        dp_times.push(solve);
        let lane = LaneId::default();
        let dp_sol = dp.solution();
        if let Some(s) = dp_sol {
            traj_rows.extend(s.trajectory.rows(i as u64, lane, "dp"));
        }
        let mut row = ScheduleRow {
            t_sched,
            dp_feasible: dp_sol.is_some(),
            x_dp: dp_sol.map(|s| s.x_value),
            dp_crossing_step: dp_sol.map(|s| s.crossing_step),
            dp_solve_s: solve.as_secs_f64(),
            agent_outcome: None,
            x_agent: None,
            diff: None,
        };
        let agent_run = match (cfg.agent, policy) {
            (AgentKind::DpOracle, _) => None,
            (AgentKind::Heuristic, _) => {
                let mut p = Timed {
                    inner: HeuristicPolicy { cfg: cfg.sim },
                    samples: Vec::new(),
                };
                let r = rollout(e.clone(), &mut p)?;
                agent_times.extend(p.samples);
                Some(r)
            }
            (_, Some(q)) => {
                let mut p = Timed {
                    inner: GreedyPolicy { q, cfg: cfg.sim },
                    samples: Vec::new(),
                };
                let r = rollout(e.clone(), &mut p)?;
                agent_times.extend(p.samples);
                Some(r)
            }
            (agent, None) => return Err(HarnessError::Config(format!("{agent} needs a checkpoint"))),
        };
        if let Some(r) = agent_run {
            let x = trajectory_performance_x(&r.trajectory, cfg.sim.control_length);
            row.agent_outcome = Some(format!("{:?}", r.outcome.kind));
            row.x_agent = Some(x);
            report.x_values.push(x);
            if let Some(s) = dp_sol {
                if let Ok(d) = trajectory_diff(&r.trajectory, &s.trajectory, cfg.sim.control_length) {
                    row.diff = Some(d);
                    report.diffs.push(d);
                }
            }
            traj_rows.extend(r.trajectory.rows(i as u64, lane, "agent"));
        } else if let Some(s) = dp_sol {
            report.x_values.push(s.x_value);
        }
        rows.push(row);
    }
    report.vehicles_spawned = rows.len();
    if !agent_times.is_empty() {
        report.latency = Some(action_latency_stats(&agent_times)?);
    }
    if let Some(t) = trajectories {
        t.extend(traj_rows);
    }
    Ok(VeEvalResult {
        rows,
        report,
        dp_latency: action_latency_stats(&dp_times).ok(),
    })
}

fn write_schedule_rows(path: &Path, rows: &[ScheduleRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn write_trajectories(path: &Path, rows: &[TrajectoryRow]) -> Result<(), HarnessError> {
    let f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut log = TrajectoryLog::new(BufWriter::new(f));
    for r in rows {
        log.record(r)?;
    }
    log.finish()?;
    Ok(())
}

fn load_policy(cfg: &ExperimentConfig) -> Result<Option<TrainedPolicy>, HarnessError> {
    if !cfg.agent.is_learned() {
        return Ok(None);
    }
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| HarnessError::Config(format!("{} needs a checkpoint", cfg.agent)))?;
    Ok(Some(AgentCheckpoint::load(path)?.policy(cfg.agent, &cfg.train.net)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub agent: Option<LatencyStats>,
    pub dp_oracle: Option<LatencyStats>,
}

/// `eval`: VE writes the X-vs-schedule table; IE writes the report,
/// schedule log, trajectories and summary row.
pub fn run_eval(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<EvalReport, HarnessError> {
    let cfg = cfg.effective();
    cfg.validate()?;
    let policy = load_policy(&cfg)?;
    write_manifest(out, "eval", &cfg, &[seed])?;
    match cfg.setup {
        Setup::Ve => {
            let mut traj = Vec::new();
            let r = evaluate_ve(&cfg, policy.as_ref(), seed, Some(&mut traj))?;
            write_schedule_rows(&out.join("x_vs_schedule.csv"), &r.rows)?;
            write_trajectories(&out.join("trajectories.csv"), &traj)?;
            write_json(
                &out.join("latency.json"),
                &LatencyReport {
                    agent: r.report.latency,
                    dp_oracle: r.dp_latency,
                },
            )?;
            write_json(&out.join("report.json"), &r.report)?;
            Ok(r.report)
        }
        Setup::Ie => {
            let ie = cfg.ie_config(seed);
            let label = format!("{} + {}", cfg.agent, scheduler_name(&ie.scheduler));
            let outcome = match (&cfg.agent, &policy) {
                (AgentKind::DpOracle, _) => {
                    return Err(HarnessError::Config("dp_oracle only drives the ve setup".into()));
                }
                (AgentKind::Heuristic, _) => {
                    run_intersection(&ie, &mut HeuristicPolicy { cfg: cfg.sim }, &label, cfg.ie.record_trajectories)?
                }
                (_, Some(q)) => {
                    run_intersection(&ie, &mut GreedyPolicy { q, cfg: cfg.sim }, &label, cfg.ie.record_trajectories)?
                }
                (agent, None) => return Err(HarnessError::Config(format!("{agent} needs a checkpoint"))),
            };
            write_json(&out.join("report.json"), &outcome.report)?;
            let log_path = out.join("schedule_log.csv");
            let f = fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
            write_schedule_log(BufWriter::new(f), &outcome.schedule_log)?;
            write_trajectories(&out.join("trajectories.csv"), &outcome.trajectories)?;
            let summary_path = out.join("summary.csv");
            let f = fs::File::create(&summary_path).map_err(|e| io_err(&summary_path, e))?;
            write_summary_csv(&[SummaryRow::from_report(&outcome.report, ie.traffic_level, seed)], f)?;
            Ok(outcome.report)
        }
    }
}

/// `oracle`: the DP oracle alone over the configured schedules.
pub fn run_oracle(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<VeEvalResult, HarnessError> {
    let mut cfg = cfg.effective();
    cfg.validate()?;
    cfg.agent = AgentKind::DpOracle;
    write_manifest(out, "oracle", &cfg, &[seed])?;
    let mut traj = Vec::new();
    let r = evaluate_ve(&cfg, None, seed, Some(&mut traj))?;
    write_schedule_rows(&out.join("oracle.csv"), &r.rows)?;
    write_trajectories(&out.join("trajectories.csv"), &traj)?;
    write_json(&out.join("latency.json"), &r.dp_latency)?;
    Ok(r)
}

/// `verify`: runs every property suite and writes `verify.json`. Any
/// failing suite is a property failure.
pub fn run_verify(cfg: &ExperimentConfig, out: &Path) -> Result<VerifyReport, HarnessError> {
    cfg.validate()?;
    write_manifest(out, "verify", cfg, &[cfg.verify.seed])?;
    let injected = match &cfg.verify.matrix {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let report = run_all(&cfg.verify, &cfg.sim, injected.as_deref());
    write_json(&out.join("verify.json"), &report)?;
    if report.passed() {
        Ok(report)
    } else {
        let failed: Vec<&str> = report.suites.iter().filter(|s| !s.passed).map(|s| s.name.as_str()).collect();
        Err(HarnessError::Property(format!("failed suites: {}", failed.join(", "))))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResult {
    pub run: usize,
    pub seed: u64,
    pub dir: PathBuf,
    pub ok: bool,
    pub exit_code: i32,
    pub message: String,
}

/// Runs every (config, seed) pair on a pool of worker threads, each run in
/// its own directory `out/run<i>_seed<s>`. Failures are collected, not
/// propagated.
pub fn run_batch(configs: &[ExperimentConfig], mode: BatchMode, out: &Path, threads: usize) -> Vec<BatchResult> {
    let jobs: Vec<(usize, u64)> =
        configs.iter().enumerate().flat_map(|(i, c)| c.seeds.iter().map(move |&s| (i, s))).collect();
    let threads = if threads == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        threads
    }
    .min(jobs.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results = std::sync::Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let Some(&(i, seed)) = jobs.get(k) else { break };
                let dir = out.join(format!("run{i}_seed{seed}"));
                let res = match mode {
                    BatchMode::Train => run_train(&configs[i], seed, &dir).map(|_| ()),
                    BatchMode::Eval => run_eval(&configs[i], seed, &dir).map(|_| ()),
                };
                let (ok, exit_code, message) = match res {
                    Ok(()) => (true, 0, String::new()),
                    Err(e) => (false, e.exit_code(), e.to_string()),
                };
                results.lock().expect("no worker panics while holding the lock").push(BatchResult {
                    run: i,
                    seed,
                    dir,
                    ok,
                    exit_code,
                    message,
                });
            });
        }
    });
    let mut results = results.into_inner().expect("workers joined");
    results.sort_by_key(|r| (r.run, r.seed));
    results
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn agent_names_round_trip() {
        for a in [AgentKind::MdDqn, AgentKind::DqnFixed(0.9), AgentKind::DqnFixed(1.0), AgentKind::Tldqn, AgentKind::Heuristic, AgentKind::DpOracle] {
            assert_eq!(a.to_string().parse::<AgentKind>().unwrap(), a);
        }
        assert!("dqn_fixed(1.5)".parse::<AgentKind>().is_err());
        assert!("dqn".parse::<AgentKind>().is_err());
    }

    #[test]
    fn scheduler_names_round_trip() {
        for s in ["fcfs", "polling(exhaustive)", "polling(gated)", "polling(k_limited:3)"] {
            assert_eq!(scheduler_name(&parse_scheduler(s).unwrap()), s);
        }
        assert_eq!(parse_scheduler("polling").unwrap(), SchedulerKind::Polling(PollingPolicy::Exhaustive));
        assert!(parse_scheduler("polling(k_limited:0)").is_err());
        assert!(parse_scheduler("round_robin").is_err());
    }

    #[test]
    fn config_json_round_trips_and_rejects_unknown_keys() {
        let c = ExperimentConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), c);
        let partial = ExperimentConfig::from_json(r#"{"agent": "dqn_fixed(0.9)", "train": {"max_steps": 10}}"#).unwrap();
        assert_eq!(partial.agent, AgentKind::DqnFixed(0.9));
        assert_eq!(partial.train.max_steps, 10);
        assert_eq!(partial.train.n_step, desk_train_config().n_step);
        assert_eq!(partial.train.huber_delta, desk_train_config().huber_delta);
        let sgd = ExperimentConfig::from_json(r#"{"train": {"optimizer": {"kind": "sgd"}}, "ie": {"scheduler": {"kind": "fcfs"}}}"#).unwrap();
        assert_eq!(sgd.train.optimizer, OptimizerKind::Sgd);
        assert_eq!(sgd.ie.scheduler, SchedulerKind::Fcfs);
        assert!(matches!(ExperimentConfig::from_json(r#"{"agnet": "md_dqn"}"#), Err(HarnessError::Config(_))));
        assert!(matches!(ExperimentConfig::from_json(r#"{"train": {"bogus": 1}}"#), Err(HarnessError::Config(_))));
    }

    #[test]
    fn paper_scale_keeps_rate() {
        let mut c = ExperimentConfig::default();
        c.paper_scale = true;
        let e = c.effective();
        assert_eq!(e.ie.horizon, FULL_HORIZON_S);
        assert!(e.ie.traffic_level.abs_diff(FULL_TRAFFIC_LEVELS[0]) <= 3, "{}", e.ie.traffic_level);
        assert_eq!(e.train.max_steps, 360_000);
        assert_eq!(e.train.epsilon.anneal_steps, 120_000);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(HarnessError::Config(String::new()).exit_code(), 1);
        assert_eq!(HarnessError::Property(String::new()).exit_code(), 2);
        assert_eq!(HarnessError::Divergence(String::new()).exit_code(), 3);
        let e: HarnessError = TrainError::Divergence { step: 3, loss: f64::NAN }.into();
        assert_eq!(e.exit_code(), 3);
    }
}
