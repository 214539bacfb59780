//! Reference controllers: a dynamic-programming trajectory oracle, a
//! set-point heuristic, fixed-discount DQN and a lexicographic two-network
//! DQN.

use serde::{Deserialize, Serialize};

use crate::kinematics::{step_vehicle, Action, SimConfig, Trajectory, VehicleState, NUM_ACTIONS};
use crate::md_rl::{
    train, train_with_rule, DqnLearner, Learner, TargetRule, TrainConfig, TrainError, TrainLog, TrainedAgent, Window,
};
use crate::mdp::{DrivingPolicy, EpisodeConfig, Leader, Observation, NUM_FEATURES};
use crate::metrics::trajectory_performance_x;
use crate::nn::{argmax, ActionValues, Mlp, NnError};

/// Positions of a leader at every step from the start of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderPath {
    pub positions: Vec<f64>,
    pub length: f64,
}

impl LeaderPath {
    /// Simulates `leader` for `steps` steps.
    pub fn simulate(leader: &Leader, steps: usize, cfg: &SimConfig) -> Self {
        let mut l = *leader;
        let mut positions = vec![l.state.x];
        for j in 0..steps {
            let a = match l.driver {
                crate::mdp::LeaderDriver::Human(b) => b.action_at(j as f64 * cfg.dt),
                crate::mdp::LeaderDriver::Autonomous => Action::Noop,
            };
            l.state = step_vehicle(&l.state, a, cfg);
            positions.push(l.state.x);
        }
        Self {
            positions,
            length: l.state.length,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DpSolution {
    pub actions: Vec<Action>,
    pub trajectory: Trajectory,
    /// Step at which the vehicle first reaches `x <= 0`.
    pub crossing_step: usize,
    pub x_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum DpOutcome {
    Feasible(DpSolution),
    Infeasible,
}

impl DpOutcome {
    pub fn solution(&self) -> Option<&DpSolution> {
        match self {
            DpOutcome::Feasible(s) => Some(s),
            DpOutcome::Infeasible => None,
        }
    }
}

/// Speed grid `v_max − k·δ` with `δ = a_max·dt`; every grid transition is
/// exactly one action.
#[derive(Debug, Clone, PartialEq)]
pub struct DpGrid {
    pub delta: f64,
    pub speeds: Vec<f64>,
}

impl DpGrid {
    pub fn new(cfg: &SimConfig) -> Self {
        let delta = cfg.speed_increment();
        let top = (cfg.v_max / delta + 1e-9).floor() as usize;
        let speeds = (0..=top).map(|k| (cfg.v_max - k as f64 * delta).max(0.0)).collect();
        Self { delta, speeds }
    }

    /// Grid index holding `v`, if any.
    pub fn index_of(&self, v: f64) -> Option<usize> {
        let k = ((self.speeds[0] - v) / self.delta).round();
        if k < 0.0 || k as usize >= self.speeds.len() {
            return None;
        }
        let k = k as usize;
        ((self.speeds[k] - v).abs() < 1e-9).then_some(k)
    }

    /// Nearest grid index to `v`.
    pub fn snap(&self, v: f64) -> usize {
        let k = ((self.speeds[0] - v) / self.delta).round().max(0.0) as usize;
        k.min(self.speeds.len() - 1)
    }

    /// Grid index after applying `action` at index `k`, or `None` if the
    /// clamped speed leaves the grid.
    pub fn apply(&self, k: usize, action: Action, cfg: &SimConfig) -> Option<usize> {
        let v = (self.speeds[k] + f64::from(action.value()) * self.delta).clamp(0.0, cfg.v_max);
        self.index_of(v)
    }
}

/// Steps `m` whose time `m·dt` is within one step of `t_sched`.
fn crossing_window(t_sched: f64, dt: f64) -> (usize, usize) {
    let lo = ((t_sched - dt) / dt - 1e-9).ceil().max(1.0) as usize;
    let hi = ((t_sched + dt) / dt + 1e-9).floor().max(0.0) as usize;
    (lo, hi)
}

/// Among all grid action sequences that first reach the intersection at a
/// step within `dt` of `t_sched`, at `v_max`, without ever overlapping the
/// leader, returns one minimizing the summed normalized distance. An
/// off-grid entry speed is snapped to the nearest grid speed.
pub fn dp_optimal_trajectory(
    start: &VehicleState,
    t_sched: f64,
    leader: Option<&LeaderPath>,
    cfg: &SimConfig,
) -> DpOutcome {
    let grid = DpGrid::new(cfg);
    let nk = grid.speeds.len();
    let (dt, vmax, delta, x0) = (cfg.dt, cfg.v_max, grid.delta, start.x);
    let (m_lo, m_hi) = crossing_window(t_sched, dt);
    if m_hi < m_lo || x0 <= 0.0 {
        return DpOutcome::Infeasible;
    }
    // Cumulative slowness K = Σ k over steps; position after j steps is
    // x0 − dt·(j·v_max − δ·K). Crossing by m_hi bounds K from above.
    let k_bound = ((m_hi as f64 * vmax * dt - x0) / (dt * delta) + 1e-9).floor();
    if k_bound < 0.0 {
        return DpOutcome::Infeasible;
    }
    let k_bound = k_bound as usize;
    let pos = |j: usize, big_k: usize| x0 - dt * (j as f64 * vmax - delta * big_k as f64);
    let gap_ok = |j: usize, x: f64| match leader {
        Some(p) => p.positions.get(j).map_or(true, |lx| x - lx - p.length >= 0.0),
        None => true,
    };

    let trans: Vec<Vec<usize>> = (0..nk)
        .map(|k| Action::ALL.iter().filter_map(|a| grid.apply(k, *a, cfg)).collect())
        .collect();
    let k0 = grid.snap(start.v);
    let width = k_bound + 1;
    // cost[k * width + K]: minimal Σ K_i so far; u32::MAX is unreachable
    let mut cost = vec![u32::MAX; nk * width];
    cost[k0 * width] = 0;
    // back[j][k * width + K] = previous k + 1 (0 when unreachable)
    let mut back: Vec<Vec<u8>> = Vec::with_capacity(m_hi);
    let mut best: Option<(f64, usize, usize)> = None;
    let mut next = vec![u32::MAX; nk * width];
    for j in 0..m_hi {
        next.fill(u32::MAX);
        let mut bp = vec![0u8; nk * width];
        for k in 0..nk {
            for big_k in 0..width {
                let c = cost[k * width + big_k];
                if c == u32::MAX {
                    continue;
                }
                for &k2 in &trans[k] {
                    let big_k2 = big_k + k2;
                    if big_k2 > k_bound {
                        continue;
                    }
                    let x = pos(j + 1, big_k2);
                    if !gap_ok(j + 1, x) {
                        continue;
                    }
                    let c2 = c + big_k2 as u32;
                    let m = j + 1;
                    if x <= 0.0 {
                        if m >= m_lo && k2 == 0 {
                            // the crossing sample itself contributes max(x, 0) = 0
                            let sum_x = m as f64 * x0 - dt * vmax * (m * (m - 1) / 2) as f64
                                + dt * delta * (c2 as usize - big_k2) as f64;
                            let cand = (sum_x, m, big_k2);
                            if best.map_or(true, |b| sum_x < b.0) {
                                best = Some(cand);
                                bp[k2 * width + big_k2] = (k + 1) as u8;
                            }
                        }
                        continue;
                    }
                    let idx = k2 * width + big_k2;
                    if c2 < next[idx] {
                        next[idx] = c2;
                        bp[idx] = (k + 1) as u8;
                    }
                }
            }
        }
        back.push(bp);
        std::mem::swap(&mut cost, &mut next);
    }
    let Some((_, m, big_k)) = best else {
        return DpOutcome::Infeasible;
    };

    // walk the back-pointers from the crossing state
    let mut ks = vec![0usize; m + 1];
    ks[m] = 0;
    let mut big = big_k;
    for j in (1..=m).rev() {
        let prev = back[j - 1][ks[j] * width + big] as usize - 1;
        big -= ks[j];
        ks[j - 1] = prev;
    }
    debug_assert_eq!(ks[0], k0);
    let mut s = VehicleState {
        v: grid.speeds[k0],
        ..*start
    };
    let mut trajectory = Trajectory::starting_at(0.0, &s);
    let mut actions = Vec::with_capacity(m);
    for j in 1..=m {
        let action = Action::ALL
            .into_iter()
            .find(|a| grid.apply(ks[j - 1], *a, cfg) == Some(ks[j]))
            .expect("back-pointer follows a grid transition");
        s = step_vehicle(&s, action, cfg);
        trajectory.push(j as f64 * dt, &s, action);
        actions.push(action);
    }
    let x_value = trajectory_performance_x(&trajectory, cfg.control_length);
    DpOutcome::Feasible(DpSolution {
        actions,
        trajectory,
        crossing_step: m,
        x_value,
    })
}

/// Minimum X over every action sequence the oracle may choose from, by
/// exhaustive search. Only practical for a handful of steps.
pub fn exhaustive_min_x(start: &VehicleState, t_sched: f64, leader: Option<&LeaderPath>, cfg: &SimConfig) -> Option<f64> {
    let grid = DpGrid::new(cfg);
    let (m_lo, m_hi) = crossing_window(t_sched, cfg.dt);
    let s0 = VehicleState {
        v: grid.speeds[grid.snap(start.v)],
        ..*start
    };
    if m_hi < m_lo || s0.x <= 0.0 {
        return None;
    }
    let mut path = vec![s0];
    let mut best: Option<f64> = None;
    search(&mut path, &grid, m_lo, m_hi, leader, cfg, &mut best);
    best
}

fn search(
    path: &mut Vec<VehicleState>,
    grid: &DpGrid,
    m_lo: usize,
    m_hi: usize,
    leader: Option<&LeaderPath>,
    cfg: &SimConfig,
    best: &mut Option<f64>,
) {
    let j = path.len();
    if j > m_hi {
        return;
    }
    let last = *path.last().expect("path starts with the entry state");
    for a in Action::ALL {
        let s = step_vehicle(&last, a, cfg);
        if grid.index_of(s.v).is_none() {
            continue;
        }
        if let Some(p) = leader {
            if p.positions.get(j).map_or(false, |lx| s.x - lx - p.length < 0.0) {
                continue;
            }
        }
        if s.x <= 0.0 {
            if j >= m_lo && s.v == cfg.v_max {
                let x = path.iter().map(|p| p.x.max(0.0)).sum::<f64>() / cfg.control_length;
                if best.map_or(true, |b| x < b) {
                    *best = Some(x);
                }
            }
            continue;
        }
        path.push(s);
        search(path, grid, m_lo, m_hi, leader, cfg, best);
        path.pop();
    }
}

/// Small-scale settings on which every grid speed and position is exact in
/// binary floating point.
pub fn tiny_sim_config() -> SimConfig {
    SimConfig {
        dt: 0.5,
        v_max: 8.0,
        a_max: 2.0,
        control_length: 40.0,
        ..SimConfig::default()
    }
}

/// A random oracle instance on [`tiny_sim_config`] that ends within 14
/// steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyInstance {
    pub start: VehicleState,
    pub t_sched: f64,
    pub leader: Option<LeaderPath>,
    pub cfg: SimConfig,
}

pub fn tiny_instance(seed: u64) -> TinyInstance {
    use rand::{Rng, SeedableRng};
    let cfg = tiny_sim_config();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let grid = DpGrid::new(&cfg);
    let v0 = grid.speeds[rng.gen_range(0..grid.speeds.len() / 2 + 1)];
    let start = VehicleState::new(1, cfg.control_length, v0, &cfg);
    let t_sched = rng.gen_range(10..=13) as f64 * cfg.dt;
    let leader = match rng.gen_range(0..3) {
        0 => None,
        kind => {
            let gap = rng.gen_range(1..=12) as f64;
            let mut state = VehicleState::new(0, cfg.control_length - cfg.vehicle_length - gap, 0.0, &cfg);
            state.v = grid.speeds[rng.gen_range(0..grid.speeds.len())];
            let driver = if kind == 1 {
                crate::mdp::LeaderDriver::Autonomous
            } else {
                crate::mdp::LeaderDriver::Human(crate::kinematics::LeadBehavior::new(rng.gen()))
            };
            Some(LeaderPath::simulate(&Leader { state, driver }, 16, &cfg))
        }
    };
    TinyInstance {
        start,
        t_sched,
        leader,
        cfg,
    }
}

/// Arrival time of the profile "change speed to `cruise`, hold it, then
/// accelerate to `v_max` exactly at the intersection", or `None` if the
/// speed changes alone overrun `dist`.
fn profile_time(v: f64, cruise: f64, dist: f64, cfg: &SimConfig) -> Option<f64> {
    let a = cfg.a_max;
    let t1 = (v - cruise).abs() / a;
    let d1 = 0.5 * (v + cruise) * t1;
    let t3 = (cfg.v_max - cruise) / a;
    let d3 = 0.5 * (cruise + cfg.v_max) * t3;
    let d2 = dist - d1 - d3;
    if d2 < 0.0 {
        return None;
    }
    if d2 > 0.0 && cruise <= 0.0 {
        return Some(f64::INFINITY);
    }
    Some(t1 + if d2 > 0.0 { d2 / cruise } else { 0.0 } + t3)
}

/// Cruise speed whose profile arrives after `time_left`, found by bisection.
/// `None` when even the fastest profile is too slow or does not fit.
pub fn heuristic_cruise_speed(v: f64, dist: f64, time_left: f64, cfg: &SimConfig) -> Option<f64> {
    let fastest = profile_time(v, cfg.v_max, dist, cfg)?;
    if fastest >= time_left {
        return None;
    }
    let (mut lo, mut hi) = (0.0, cfg.v_max);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        match profile_time(v, mid, dist, cfg) {
            Some(t) if t <= time_left => hi = mid,
            _ => lo = mid,
        }
    }
    Some(hi)
}

/// Set-point heuristic: follow the bisected cruise-speed profile, brake
/// whenever the gap to the leader is 6 m or less, and drive flat out when
/// the schedule cannot be met.
pub fn heuristic_trajectory_controller(obs: &Observation, cfg: &SimConfig) -> Action {
    if obs.gap_to_lead <= 6.0 {
        return Action::Brake;
    }
    let (v, dist) = (obs.self_speed, obs.dist_to_intersection);
    let at_top = v >= cfg.v_max;
    // slack under half a step is absorbed by the arrival tolerance
    let Some(cruise) = heuristic_cruise_speed(v, dist, obs.time_remaining - 0.5 * cfg.dt, cfg) else {
        return if at_top { Action::Noop } else { Action::Gas };
    };
    // final acceleration phase from the current speed
    let d_acc = (cfg.v_max * cfg.v_max - v * v) / (2.0 * cfg.a_max);
    let half = 0.5 * cfg.speed_increment();
    if at_top && v - half <= cruise {
        Action::Noop
    } else if v + half < cruise || (dist <= d_acc + v * cfg.dt && !at_top) {
        Action::Gas
    } else if v - half > cruise {
        Action::Brake
    } else {
        Action::Noop
    }
}

/// The fastest action after which the follower could still stop behind
/// the vehicle ahead, assuming that vehicle brakes as hard as possible.
pub fn safe_following_action(obs: &Observation, cfg: &SimConfig) -> Action {
    const MARGIN: f64 = 6.0;
    let lead_next = (obs.lead_speed - cfg.a_max * cfg.dt).max(0.0);
    for action in [Action::Gas, Action::Noop] {
        let v = (obs.self_speed + f64::from(action.value()) * cfg.a_max * cfg.dt).clamp(0.0, cfg.v_max);
        let gap = obs.gap_to_lead - v * cfg.dt + lead_next * cfg.dt;
        let stopping = (v * v - lead_next * lead_next).max(0.0) / (2.0 * cfg.a_max);
        if gap >= MARGIN + stopping {
            return action;
        }
    }
    Action::Brake
}

/// The heuristic's action, never faster than [`safe_following_action`].
/// Drives the guide episodes of training.
pub fn safe_heuristic_action(obs: &Observation, cfg: &SimConfig) -> Action {
    let a = heuristic_trajectory_controller(obs, cfg);
    let cap = safe_following_action(obs, cfg);
    if cap.value() < a.value() {
        cap
    } else {
        a
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeuristicPolicy {
    pub cfg: SimConfig,
}

impl DrivingPolicy for HeuristicPolicy {
    fn act(&mut self, obs: &Observation) -> Action {
        heuristic_trajectory_controller(obs, &self.cfg)
    }
}

/// Greedy policy over any action-value function of normalized observations.
pub struct GreedyPolicy<'a, Q: ActionValues + ?Sized> {
    pub q: &'a Q,
    pub cfg: SimConfig,
}

impl<Q: ActionValues + ?Sized> DrivingPolicy for GreedyPolicy<'_, Q> {
    fn act(&mut self, obs: &Observation) -> Action {
        let idx = self.q.greedy_action(&obs.normalized(&self.cfg)).unwrap_or(Action::Noop.index());
        Action::from_index(idx).unwrap()
    }
}

pub fn train_fixed_dqn(episodes: &EpisodeConfig, cfg: &TrainConfig, gamma: f64) -> Result<TrainedAgent, TrainError> {
    train_with_rule(episodes, cfg, TargetRule::Fixed { gamma })
}

pub const TLDQN_THRESHOLD: f64 = 0.1;
pub const TLDQN_CRUISE_GAMMA: f64 = 0.9;
pub const TLDQN_TRAJECTORY_GAMMA: f64 = 1.0;

/// Cruise values are senior: actions within `threshold·|max|` of the best
/// cruise value are candidates, and the trajectory values pick among them.
pub fn tldqn_action(q_cruise: &[f64; NUM_ACTIONS], q_traj: &[f64; NUM_ACTIONS], threshold: f64) -> usize {
    let best = q_cruise.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let floor = best - threshold * best.abs();
    let mut choice: Option<usize> = None;
    for a in 0..NUM_ACTIONS {
        if q_cruise[a] >= floor && choice.map_or(true, |c| q_traj[a] > q_traj[c]) {
            choice = Some(a);
        }
    }
    choice.unwrap_or_else(|| argmax(q_cruise))
}

/// Cruise and trajectory networks selecting actions lexicographically.
#[derive(Debug, Clone, PartialEq)]
pub struct Tldqn {
    pub cruise: Mlp,
    pub trajectory: Mlp,
    pub threshold: f64,
}

impl ActionValues for Tldqn {
    /// Trajectory values with non-candidate actions pushed to −∞, so the
    /// greedy choice is the lexicographic one.
    fn action_values(&self, obs: &[f64]) -> Result<[f64; NUM_ACTIONS], NnError> {
        let qc = self.cruise.forward(obs)?;
        let qt = self.trajectory.forward(obs)?;
        let pick = tldqn_action(&qc, &qt, self.threshold);
        let mut out = [f64::NEG_INFINITY; NUM_ACTIONS];
        out[pick] = qt[pick];
        Ok(out)
    }
}

/// Both TLDQN networks learning from one shared experience stream.
pub struct TldqnLearner {
    pub cruise: DqnLearner,
    pub trajectory: DqnLearner,
    pub threshold: f64,
}

impl Learner for TldqnLearner {
    fn greedy(&self, obs: &[f64; NUM_FEATURES]) -> Result<usize, NnError> {
        let qc = self.cruise.online.forward(obs)?;
        let qt = self.trajectory.online.forward(obs)?;
        Ok(tldqn_action(&qc, &qt, self.threshold))
    }

    fn learn(&mut self, batch: &[&Window]) -> Result<f64, NnError> {
        Ok(self.cruise.learn(batch)? + self.trajectory.learn(batch)?)
    }

    fn sync_targets(&mut self) {
        self.cruise.sync();
        self.trajectory.sync();
    }
}

#[derive(Debug, Clone)]
pub struct TrainedTldqn {
    pub agent: Tldqn,
    pub log: TrainLog,
}

pub fn train_tldqn(episodes: &EpisodeConfig, cfg: &TrainConfig, threshold: f64) -> Result<TrainedTldqn, TrainError> {
    let cruise_rule = TargetRule::Component {
        index: 1,
        gamma: TLDQN_CRUISE_GAMMA,
    };
    let traj_rule = TargetRule::Component {
        index: 0,
        gamma: TLDQN_TRAJECTORY_GAMMA,
    };
    let mut traj_spec = cfg.net.clone();
    traj_spec.init_seed = crate::kinematics::derive_seed(cfg.net.init_seed, 1);
    let mut learner = TldqnLearner {
        cruise: DqnLearner::new(cfg.net.clone(), cruise_rule, cfg.optimizer, cfg.lr)?.with_huber(cfg.huber_delta),
        trajectory: DqnLearner::new(traj_spec, traj_rule, cfg.optimizer, cfg.lr)?.with_huber(cfg.huber_delta),
        threshold,
    };
    let log = train(&mut learner, episodes, cfg)?;
    Ok(TrainedTldqn {
        agent: Tldqn {
            cruise: learner.cruise.online,
            trajectory: learner.trajectory.online,
            threshold,
        },
        log,
    })
}
