//! The episodic decision problem faced by one trajectory-control agent:
//! observation features, the two-component reward and termination.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{
    derive_seed, sample_entry_speed, step_vehicle, Action, LeadBehavior, SimConfig, SimError, Trajectory,
    VehicleState,
};

/// Normalizer for `time_remaining`; the longest schedule handed out.
pub const TIME_SCALE: f64 = 32.0;
pub const NUM_FEATURES: usize = 6;

pub const CRASH_PENALTY: f64 = -400.0;
pub const MISSED_PENALTY: f64 = -10.0;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("episode already terminated")]
    EpisodeOver,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub self_speed: f64,
    pub dist_to_intersection: f64,
    pub time_remaining: f64,
    pub lead_speed: f64,
    pub gap_to_lead: f64,
    pub lead_accel: f64,
}

impl Observation {
    pub fn raw(&self) -> [f64; NUM_FEATURES] {
        [
            self.self_speed,
            self.dist_to_intersection,
            self.time_remaining,
            self.lead_speed,
            self.gap_to_lead,
            self.lead_accel,
        ]
    }

    /// Speeds scaled by `v_max`, distances by the control length, time by
    /// [`TIME_SCALE`], acceleration by `a_max`; signed features clamp to
    /// `[-1, 1]`.
    pub fn normalized(&self, cfg: &SimConfig) -> [f64; NUM_FEATURES] {
        [
            (self.self_speed / cfg.v_max).clamp(0.0, 1.0),
            (self.dist_to_intersection / cfg.control_length).clamp(0.0, 1.0),
            (self.time_remaining / TIME_SCALE).clamp(-1.0, 1.0),
            (self.lead_speed / cfg.v_max).clamp(0.0, 1.0),
            (self.gap_to_lead / cfg.control_length).clamp(-1.0, 1.0),
            (self.lead_accel / cfg.a_max).clamp(-1.0, 1.0),
        ]
    }
}

/// Builds the six-feature observation. A missing leader is replaced by a
/// phantom one a full control length ahead, cruising at `v_max`.
pub fn observe(
    follower: &VehicleState,
    leader: Option<&VehicleState>,
    t_sched: f64,
    now: f64,
    cfg: &SimConfig,
) -> Observation {
    let (lead_speed, gap_to_lead, lead_accel) = match leader {
        Some(l) => (l.v, follower.x - l.x - l.length, l.a),
        None => (cfg.v_max, cfg.control_length, 0.0),
    };
    Observation {
        self_speed: follower.v,
        dist_to_intersection: follower.x.max(0.0),
        time_remaining: t_sched - now,
        lead_speed,
        gap_to_lead,
        lead_accel,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardVector {
    /// Trajectory-control reward.
    pub r1: f64,
    /// Cruise-control reward.
    pub r2: f64,
}

impl RewardVector {
    pub fn new(r1: f64, r2: f64) -> Self {
        Self { r1, r2 }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.r1, self.r2]
    }

    pub fn total(&self) -> f64 {
        self.r1 + self.r2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    ReachedOnTime,
    MissedSchedule,
    Crashed,
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub kind: OutcomeKind,
    pub final_speed: f64,
    /// Time at which the episode ended, relative to the episode start.
    pub crossing_time: f64,
}

pub fn step_reward_r1(x: f64, cfg: &SimConfig) -> f64 {
    -(x.clamp(0.0, cfg.control_length) / cfg.control_length)
}

pub fn terminal_reward_r1(outcome: &EpisodeOutcome) -> f64 {
    match outcome.kind {
        OutcomeKind::ReachedOnTime => 10.0 + 3.0 * outcome.final_speed,
        _ => MISSED_PENALTY,
    }
}

/// Gap of exactly 6 m counts as too close; exactly 20 m as free road.
pub fn cruise_reward_r2(gap: f64, crashed: bool) -> f64 {
    if crashed {
        CRASH_PENALTY
    } else if gap > 6.0 && gap < 20.0 {
        0.1
    } else if gap <= 6.0 {
        -0.1
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeaderMode {
    /// Random brake/hold/gas every decision period.
    Human,
    /// Holds its entry speed.
    Autonomous,
    Absent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LeaderDriver {
    Human(LeadBehavior),
    Autonomous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Leader {
    pub state: VehicleState,
    pub driver: LeaderDriver,
}

impl Leader {
    fn action(&self, elapsed: f64) -> Action {
        match self.driver {
            LeaderDriver::Human(b) => b.action_at(elapsed),
            LeaderDriver::Autonomous => Action::Noop,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub sim: SimConfig,
    pub t_sched_min: f64,
    pub t_sched_max: f64,
    pub leader_gap_min: f64,
    pub leader_gap_max: f64,
    pub leader: LeaderMode,
    /// Episodes still running this long after the schedule end as timeouts.
    pub hard_timeout: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            t_sched_min: 20.0,
            t_sched_max: 32.0,
            leader_gap_min: 10.0,
            leader_gap_max: 60.0,
            leader: LeaderMode::Human,
            hard_timeout: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepResult {
    pub obs: Observation,
    pub reward: RewardVector,
    pub terminal: bool,
    pub outcome: Option<EpisodeOutcome>,
}

/// Two-vehicle episode: a controlled follower and an uncontrolled leader.
/// Times are relative to the follower's control-region entry.
#[derive(Debug, Clone, PartialEq)]
pub struct VeEpisode {
    pub cfg: SimConfig,
    pub follower: VehicleState,
    pub leader: Option<Leader>,
    pub t_sched: f64,
    pub steps: u64,
    pub hard_timeout: f64,
    pub outcome: Option<EpisodeOutcome>,
}

impl VeEpisode {
    pub fn new(cfg: SimConfig, follower: VehicleState, leader: Option<Leader>, t_sched: f64) -> Self {
        Self {
            cfg,
            follower,
            leader,
            t_sched,
            steps: 0,
            hard_timeout: 5.0,
            outcome: None,
        }
    }

    pub fn now(&self) -> f64 {
        self.steps as f64 * self.cfg.dt
    }

    pub fn is_done(&self) -> bool {
        self.outcome.is_some()
    }

    pub fn observation(&self) -> Observation {
        observe(
            &self.follower,
            self.leader.as_ref().map(|l| &l.state),
            self.t_sched,
            self.now(),
            &self.cfg,
        )
    }

    /// Advances both vehicles one step under the follower's `action`.
    pub fn transition(&mut self, action: Action) -> Result<StepResult, MdpError> {
        if self.is_done() {
            return Err(MdpError::EpisodeOver);
        }
        let elapsed = self.now();
        if let Some(leader) = self.leader.as_mut() {
            let a = leader.action(elapsed);
            leader.state = step_vehicle(&leader.state, a, &self.cfg);
        }
        self.follower = step_vehicle(&self.follower, action, &self.cfg);
        self.steps += 1;
        let now = self.now();
        let dt = self.cfg.dt;

        let gap = self
            .leader
            .as_ref()
            .map(|l| self.follower.x - l.state.x - l.state.length);
        let crashed = gap.map_or(false, |g| g < 0.0);
        let crossed = self.follower.x <= 0.0;
        let kind = if crashed {
            Some(OutcomeKind::Crashed)
        } else if crossed {
            if (now - self.t_sched).abs() <= dt + 1e-9 {
                Some(OutcomeKind::ReachedOnTime)
            } else {
                Some(OutcomeKind::MissedSchedule)
            }
        } else if now >= self.t_sched + self.hard_timeout - 1e-9 {
            Some(OutcomeKind::Timeout)
        } else if now > self.t_sched + dt + 1e-9 {
            Some(OutcomeKind::MissedSchedule)
        } else {
            None
        };
        let outcome = kind.map(|kind| EpisodeOutcome {
            kind,
            final_speed: self.follower.v,
            crossing_time: now,
        });

        let mut r1 = step_reward_r1(self.follower.x, &self.cfg);
        if let Some(o) = &outcome {
            r1 += terminal_reward_r1(o);
        }
        let r2 = cruise_reward_r2(gap.unwrap_or(self.cfg.control_length), crashed);
        self.outcome = outcome;
        Ok(StepResult {
            obs: self.observation(),
            reward: RewardVector::new(r1, r2),
            terminal: outcome.is_some(),
            outcome,
        })
    }

    /// Like [`VeEpisode::transition`] but takes the raw action value.
    pub fn transition_value(&mut self, action: i64) -> Result<StepResult, MdpError> {
        let a = Action::from_value(action)?;
        self.transition(a)
    }
}

/// Random two-vehicle episode: follower at the control-region entry, a
/// uniformly drawn schedule and a leader a uniformly drawn gap ahead.
pub fn make_ve_episode(seed: u64, ep: &EpisodeConfig) -> VeEpisode {
    let cfg = ep.sim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_sched = rng.gen_range(ep.t_sched_min..=ep.t_sched_max);
    let mut follower = VehicleState::new(1, cfg.control_length, 0.0, &cfg);
    follower.v = sample_entry_speed(&mut rng, &cfg);
    let gap = rng.gen_range(ep.leader_gap_min..=ep.leader_gap_max);
    let mut lead_state = VehicleState::new(0, cfg.control_length - cfg.vehicle_length - gap, 0.0, &cfg);
    lead_state.v = sample_entry_speed(&mut rng, &cfg);
    let behavior_seed = derive_seed(seed, 1);
    let leader = match ep.leader {
        LeaderMode::Human => Some(Leader {
            state: lead_state,
            driver: LeaderDriver::Human(LeadBehavior::new(behavior_seed)),
        }),
        LeaderMode::Autonomous => Some(Leader {
            state: lead_state,
            driver: LeaderDriver::Autonomous,
        }),
        LeaderMode::Absent => None,
    };
    let mut episode = VeEpisode::new(cfg, follower, leader, t_sched);
    episode.hard_timeout = ep.hard_timeout;
    episode
}

/// Anything that maps an observation to a longitudinal action.
pub trait DrivingPolicy {
    fn act(&mut self, obs: &Observation) -> Action;
}

impl<F: FnMut(&Observation) -> Action> DrivingPolicy for F {
    fn act(&mut self, obs: &Observation) -> Action {
        self(obs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rollout {
    pub trajectory: Trajectory,
    pub outcome: EpisodeOutcome,
    pub r1_sum: f64,
    pub r1_end: f64,
    pub r2_sum: f64,
    pub steps: u64,
}

impl Rollout {
    pub fn total(&self) -> f64 {
        self.r1_sum + self.r2_sum
    }
}

/// Runs an episode to termination under `policy`, recording the follower.
pub fn rollout<P: DrivingPolicy + ?Sized>(mut episode: VeEpisode, policy: &mut P) -> Result<Rollout, MdpError> {
    let mut trajectory = Trajectory::starting_at(0.0, &episode.follower);
    let (mut r1_sum, mut r2_sum) = (0.0, 0.0);
    loop {
        let obs = episode.observation();
        let action = policy.act(&obs);
        let step = episode.transition(action)?;
        trajectory.push(episode.now(), &episode.follower, action);
        r1_sum += step.reward.r1;
        r2_sum += step.reward.r2;
        if let Some(outcome) = step.outcome {
            return Ok(Rollout {
                trajectory,
                r1_end: terminal_reward_r1(&outcome),
                outcome,
                r1_sum,
                r2_sum,
                steps: episode.steps,
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: f64,
    pub obs: [f64; NUM_FEATURES],
    pub action: i8,
    pub r1: f64,
    pub r2: f64,
    pub terminal: bool,
    pub outcome: Option<OutcomeKind>,
}

/// JSON-lines episode trace, one record per step.
pub struct TraceWriter<W: Write> {
    out: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn record(&mut self, rec: &TraceRecord) -> Result<(), MdpError> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }
}
