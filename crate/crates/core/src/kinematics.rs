//! Discrete-time longitudinal vehicle dynamics inside a control region.
//!
//! Positions are measured as distance *to* the intersection starting point,
//! so `x` decreases toward zero as a vehicle drives in. Speed is updated
//! first and the new speed moves the vehicle (semi-implicit Euler), which
//! keeps both speed clamps exact.

use std::fmt;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type VehicleId = u64;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("vehicles {follower} and {leader} are not in the same lane")]
    DifferentLanes { follower: VehicleId, leader: VehicleId },
    #[error("action value {0} is not one of -1, 0, 1")]
    InvalidAction(i64),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Seconds per simulation step.
    pub dt: f64,
    /// Maximum speed, m/s.
    pub v_max: f64,
    /// Maximum acceleration and deceleration magnitude, m/s².
    pub a_max: f64,
    /// Control region length, meters.
    pub control_length: f64,
    pub intersection_width: f64,
    pub vehicle_length: f64,
    pub vehicle_width: f64,
    pub rng_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.2,
            v_max: 80.0 / 3.6,
            a_max: 2.0,
            control_length: 400.0,
            intersection_width: 14.0,
            vehicle_length: 5.0,
            vehicle_width: 2.0,
            rng_seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("dt", self.dt),
            ("v_max", self.v_max),
            ("a_max", self.a_max),
            ("control_length", self.control_length),
            ("vehicle_length", self.vehicle_length),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(SimError::InvalidConfig(format!("{name} must be > 0, got {value}")));
            }
        }
        if !(self.intersection_width.is_finite() && self.intersection_width >= 0.0) {
            return Err(SimError::InvalidConfig(format!(
                "intersection_width must be >= 0, got {}",
                self.intersection_width
            )));
        }
        Ok(())
    }

    /// Speed change produced by one non-saturated action.
    pub fn speed_increment(&self) -> f64 {
        self.a_max * self.dt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Movement {
    Straight,
    Left,
    Right,
}

impl fmt::Display for Movement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Movement::Straight => "straight",
            Movement::Left => "left",
            Movement::Right => "right",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub struct LaneId {
    pub road: usize,
    pub lane: usize,
}

impl fmt::Display for LaneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.road, self.lane)
    }
}

/// Longitudinal control input. Discriminants are the applied acceleration
/// sign; [`Action::index`] is the position in an action-value triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Brake,
    Noop,
    Gas,
}

pub const NUM_ACTIONS: usize = 3;

impl Action {
    pub const ALL: [Action; NUM_ACTIONS] = [Action::Brake, Action::Noop, Action::Gas];

    pub fn value(self) -> i8 {
        match self {
            Action::Brake => -1,
            Action::Noop => 0,
            Action::Gas => 1,
        }
    }

    pub fn index(self) -> usize {
        (self.value() + 1) as usize
    }

    pub fn from_index(index: usize) -> Option<Action> {
        Self::ALL.get(index).copied()
    }

    pub fn from_value(value: i64) -> Result<Action, SimError> {
        match value {
            -1 => Ok(Action::Brake),
            0 => Ok(Action::Noop),
            1 => Ok(Action::Gas),
            other => Err(SimError::InvalidAction(other)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: VehicleId,
    /// Distance from the intersection starting point to the front bumper.
    pub x: f64,
    pub v: f64,
    /// Acceleration applied on the last step (after clamping).
    pub a: f64,
    pub lane: LaneId,
    pub movement: Movement,
    pub entered_at: f64,
    pub length: f64,
}

impl VehicleState {
    pub fn new(id: VehicleId, x: f64, v: f64, cfg: &SimConfig) -> Self {
        Self {
            id,
            x,
            v,
            a: 0.0,
            lane: LaneId::default(),
            movement: Movement::Straight,
            entered_at: 0.0,
            length: cfg.vehicle_length,
        }
    }
}

/// Advances one vehicle by one step.
pub fn step_vehicle(s: &VehicleState, action: Action, cfg: &SimConfig) -> VehicleState {
    let requested = f64::from(action.value()) * cfg.a_max;
    let unclamped = s.v + requested * cfg.dt;
    let v = unclamped.clamp(0.0, cfg.v_max);
    let a = if v == unclamped { requested } else { (v - s.v) / cfg.dt };
    VehicleState {
        x: s.x - v * cfg.dt,
        v,
        a,
        ..*s
    }
}

/// Bumper-to-bumper distance from `follower` to the rear of `leader`.
/// Negative only when the two overlap.
pub fn gap_to_leader(follower: &VehicleState, leader: &VehicleState) -> Result<f64, SimError> {
    if follower.lane != leader.lane {
        return Err(SimError::DifferentLanes {
            follower: follower.id,
            leader: leader.id,
        });
    }
    Ok(follower.x - leader.x - leader.length)
}

/// Flags each adjacent pair of a lane sorted front-to-back (ascending `x`).
/// Element `i` describes the pair (`lane[i]` leading, `lane[i + 1]` following).
pub fn detect_rear_end_collisions(lane: &[VehicleState]) -> Vec<bool> {
    lane.windows(2)
        .map(|pair| pair[1].x - pair[0].x - pair[0].length < 0.0)
        .collect()
}

/// Shortest time to cover `x` meters starting at speed `v`, accelerating at
/// full rate up to `v_max` and then cruising.
pub fn min_time_to_cover(x: f64, v: f64, cfg: &SimConfig) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let v = v.clamp(0.0, cfg.v_max);
    let t_acc = (cfg.v_max - v) / cfg.a_max;
    let d_acc = (cfg.v_max * cfg.v_max - v * v) / (2.0 * cfg.a_max);
    if d_acc <= x {
        t_acc + (x - d_acc) / cfg.v_max
    } else {
        // x = v t + a t² / 2
        (-v + (v * v + 2.0 * cfg.a_max * x).sqrt()) / cfg.a_max
    }
}

/// Uniform entry speed in `[0.5 v_max, v_max]`.
pub fn sample_entry_speed<R: Rng + ?Sized>(rng: &mut R, cfg: &SimConfig) -> f64 {
    rng.gen_range(0.5 * cfg.v_max..=cfg.v_max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrivalProcess {
    /// Vehicles per second, per lane.
    pub rate: f64,
    pub horizon: f64,
    pub lanes: usize,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrivalEvent {
    pub lane: usize,
    pub time: f64,
}

/// Independent Poisson arrival streams, one per lane, merged in time order.
pub fn sample_arrivals(p: &ArrivalProcess) -> Vec<ArrivalEvent> {
    if !(p.rate > 0.0) || p.lanes == 0 || !(p.horizon > 0.0) {
        return Vec::new();
    }
    let exp = Exp::new(p.rate).expect("rate checked positive");
    let mut rng = ChaCha8Rng::seed_from_u64(p.rng_seed);
    let mut events = Vec::new();
    for lane in 0..p.lanes {
        let mut t = 0.0;
        loop {
            t += exp.sample(&mut rng);
            if t > p.horizon {
                break;
            }
            events.push(ArrivalEvent { lane, time: t });
        }
    }
    events.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.lane.cmp(&b.lane)));
    events
}

/// Human-like leader: picks brake/hold/gas uniformly at random, once per
/// decision window. Stateless: the action is a pure function of the seed and
/// the window index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeadBehavior {
    pub decision_period: f64,
    pub rng_seed: u64,
}

impl LeadBehavior {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            decision_period: 2.0,
            rng_seed,
        }
    }

    pub fn action_at(&self, t: f64) -> Action {
        let window = ((t / self.decision_period) + 1e-9).floor().max(0.0) as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(self.rng_seed ^ splitmix64(window)));
        Action::ALL[rng.gen_range(0..NUM_ACTIONS)]
    }
}

/// Convenience wrapper matching the operation name used by the experiment code.
pub fn lead_policy_action(b: &LeadBehavior, t: f64) -> Action {
    b.action_at(t)
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a base seed and a stream index.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream.wrapping_add(0x5151)))
}

/// One sample of a single vehicle's path. `action` is the input that
/// produced this sample (zero for the entry sample).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub x: f64,
    pub v: f64,
    pub action: i8,
}

/// Samples at `dt` spacing from control-region entry to the crossing step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<TrajectorySample>,
}

impl Trajectory {
    pub fn starting_at(t: f64, s: &VehicleState) -> Self {
        Self {
            samples: vec![TrajectorySample {
                t,
                x: s.x,
                v: s.v,
                action: 0,
            }],
        }
    }

    pub fn push(&mut self, t: f64, s: &VehicleState, action: Action) {
        self.samples.push(TrajectorySample {
            t,
            x: s.x,
            v: s.v,
            action: action.value(),
        });
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn last(&self) -> Option<&TrajectorySample> {
        self.samples.last()
    }

    pub fn rows(&self, vehicle_id: VehicleId, lane: LaneId, source: &str) -> Vec<TrajectoryRow> {
        self.samples
            .iter()
            .map(|s| TrajectoryRow {
                time_s: s.t,
                vehicle_id,
                lane: lane.to_string(),
                x_m: s.x,
                v_mps: s.v,
                action: s.action,
                source: source.to_string(),
            })
            .collect()
    }

    /// Rebuilds a single vehicle's trajectory from log rows.
    pub fn from_rows(rows: &[TrajectoryRow]) -> Self {
        Self {
            samples: rows
                .iter()
                .map(|r| TrajectorySample {
                    t: r.time_s,
                    x: r.x_m,
                    v: r.v_mps,
                    action: r.action,
                })
                .collect(),
        }
    }
}

/// One row of the trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub time_s: f64,
    pub vehicle_id: VehicleId,
    pub lane: String,
    pub x_m: f64,
    pub v_mps: f64,
    pub action: i8,
    pub source: String,
}

pub struct TrajectoryLog<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> TrajectoryLog<W> {
    pub fn new(inner: W) -> Self {
        Self {
            writer: csv::Writer::from_writer(inner),
        }
    }

    pub fn record(&mut self, row: &TrajectoryRow) -> Result<(), SimError> {
        self.writer.serialize(row)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<(), SimError> {
        self.writer.flush()?;
        Ok(())
    }
}

pub fn read_trajectory_log<R: std::io::Read>(inner: R) -> Result<Vec<TrajectoryRow>, SimError> {
    let mut reader = csv::Reader::from_reader(inner);
    let rows = reader.deserialize().collect::<Result<Vec<TrajectoryRow>, _>>()?;
    Ok(rows)
}
