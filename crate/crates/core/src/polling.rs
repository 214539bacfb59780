//! Polling-based schedule coordinator.
//!
//! Every (road, lane, movement) triple is a FIFO queue. A queue transition
//! matrix gives the minimum separation between serving a vehicle of one queue
//! and a vehicle of another at the intersection starting point. The
//! multi-lane polling algorithm walks the queues under a polling policy and
//! hands each vehicle the earliest time that keeps it clear of every queue
//! it conflicts with.

use std::collections::{HashMap, VecDeque};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{LaneId, Movement, SimConfig, VehicleId};

/// Slack used when comparing separations; schedules are sums of a handful of
/// matrix entries so rounding never approaches this.
pub const SEPARATION_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("invalid layout: {0}")]
    Layout(String),
    #[error("invalid transition matrix: {0}")]
    Matrix(String),
    #[error("malformed layout json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueueId {
    pub road: usize,
    pub lane: usize,
    pub movement: Movement,
}

impl QueueId {
    pub fn new(road: usize, lane: usize, movement: Movement) -> Self {
        Self { road, lane, movement }
    }

    pub fn lane_id(&self) -> LaneId {
        LaneId {
            road: self.road,
            lane: self.lane,
        }
    }
}

/// How two queues interact at the intersection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conflict {
    /// Parallel movements; served simultaneously.
    None,
    /// Two movements sharing one physical lane; only the headway applies.
    SharedLane,
    /// Paths cross inside the intersection region.
    Crossing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntersectionLayout {
    pub queues: Vec<QueueId>,
    /// `conflicts[i][j]` for every ordered queue pair; the diagonal is ignored.
    pub conflicts: Vec<Vec<Conflict>>,
}

impl IntersectionLayout {
    pub fn from_json(text: &str) -> Result<Self, ScheduleError> {
        let layout: Self = serde_json::from_str(text)?;
        layout.validate()?;
        Ok(layout)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("layout serializes")
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        let n = self.queues.len();
        if self.conflicts.len() != n || self.conflicts.iter().any(|row| row.len() != n) {
            return Err(ScheduleError::Layout(format!(
                "conflict table must be {n}x{n}"
            )));
        }
        for (i, a) in self.queues.iter().enumerate() {
            if self.queues[..i].contains(a) {
                return Err(ScheduleError::Layout(format!("duplicate queue {a:?}")));
            }
        }
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let same_lane = self.queues[i].lane_id() == self.queues[j].lane_id();
                if same_lane && self.conflicts[i][j] != Conflict::SharedLane {
                    return Err(ScheduleError::Layout(format!(
                        "queues {i} and {j} share a lane but are not marked shared_lane"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn queue_index(&self, q: &QueueId) -> Option<usize> {
        self.queues.iter().position(|x| x == q)
    }

    /// Four approach roads with two lanes each. Lane 0 carries straight and
    /// left movements, lane 1 straight and right: 16 queues in total.
    ///
    /// Roads are numbered clockwise (N, E, S, W), so road `r + 1` is the
    /// perpendicular approach whose straight movement exits where a right
    /// turn from road `r` exits.
    pub fn four_leg_two_lane() -> Self {
        let mut queues = Vec::new();
        for road in 0..4 {
            queues.push(QueueId::new(road, 0, Movement::Straight));
            queues.push(QueueId::new(road, 0, Movement::Left));
            queues.push(QueueId::new(road, 1, Movement::Straight));
            queues.push(QueueId::new(road, 1, Movement::Right));
        }
        let conflicts = queues
            .iter()
            .map(|a| queues.iter().map(|b| four_leg_conflict(a, b)).collect())
            .collect();
        Self { queues, conflicts }
    }

    /// Two perpendicular two-lane roads, straight movements only.
    pub fn two_road_straight() -> Self {
        let queues = vec![
            QueueId::new(0, 0, Movement::Straight),
            QueueId::new(0, 1, Movement::Straight),
            QueueId::new(1, 0, Movement::Straight),
            QueueId::new(1, 1, Movement::Straight),
        ];
        let conflicts = queues
            .iter()
            .map(|a| {
                queues
                    .iter()
                    .map(|b| if a.road == b.road { Conflict::None } else { Conflict::Crossing })
                    .collect()
            })
            .collect();
        Self { queues, conflicts }
    }

    /// One single-lane road per approach, every pair of roads conflicting:
    /// the classic single-server polling model.
    pub fn single_lane_roads(roads: usize) -> Self {
        let queues: Vec<_> = (0..roads).map(|r| QueueId::new(r, 0, Movement::Straight)).collect();
        let conflicts = (0..roads)
            .map(|_| (0..roads).map(|_| Conflict::Crossing).collect())
            .collect();
        Self { queues, conflicts }
    }
}

fn four_leg_conflict(a: &QueueId, b: &QueueId) -> Conflict {
    use Movement::*;
    if a == b {
        return Conflict::None;
    }
    if a.road == b.road {
        return if a.lane == b.lane { Conflict::SharedLane } else { Conflict::None };
    }
    let rel = (b.road + 4 - a.road) % 4; // 1: b is to the right-hand side, 2: opposing, 3: left-hand side
    let opposing = rel == 2;
    let crossing = match (a.movement, b.movement) {
        (Straight, Straight) => !opposing,
        (Left, Straight) | (Straight, Left) => true,
        (Left, Left) => !opposing,
        (Right, Straight) => rel == 1,
        (Straight, Right) => rel == 3,
        (Left, Right) | (Right, Left) | (Right, Right) => false,
    };
    if crossing {
        Conflict::Crossing
    } else {
        Conflict::None
    }
}

/// Minimum headway between two vehicles of one queue.
pub fn service_time(cfg: &SimConfig) -> f64 {
    (cfg.vehicle_length / cfg.v_max).max(1.0)
}

/// Time for a vehicle to fully clear the intersection region at `v_max`.
pub fn switch_over_time(cfg: &SimConfig) -> f64 {
    ((cfg.vehicle_length + cfg.intersection_width) / cfg.v_max).max(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueueTransitionMatrix {
    pub queues: Vec<QueueId>,
    /// `seconds[from][to]`: wait before serving `to` after serving `from`.
    pub seconds: Vec<Vec<f64>>,
}

impl QueueTransitionMatrix {
    pub fn len(&self) -> usize {
        self.queues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queues.is_empty()
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.seconds[from][to]
    }

    pub fn service(&self, q: usize) -> f64 {
        self.seconds[q][q]
    }

    pub fn validate(&self) -> Result<(), ScheduleError> {
        let n = self.queues.len();
        if self.seconds.len() != n || self.seconds.iter().any(|r| r.len() != n) {
            return Err(ScheduleError::Matrix(format!("matrix must be {n}x{n}")));
        }
        for (i, row) in self.seconds.iter().enumerate() {
            for (j, &s) in row.iter().enumerate() {
                if !(s.is_finite() && s >= 0.0) {
                    return Err(ScheduleError::Matrix(format!(
                        "entry [{i}][{j}] = {s} must be finite and >= 0"
                    )));
                }
            }
            if row[i] <= 0.0 {
                return Err(ScheduleError::Matrix(format!(
                    "diagonal entry {i} must be a positive service time"
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ScheduleError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("matrix serializes")
    }
}

pub fn build_transition_matrix(
    layout: &IntersectionLayout,
    cfg: &SimConfig,
) -> Result<QueueTransitionMatrix, ScheduleError> {
    layout.validate()?;
    cfg.validate()
        .map_err(|e| ScheduleError::Layout(e.to_string()))?;
    let service = service_time(cfg);
    let switch = switch_over_time(cfg);
    let n = layout.queues.len();
    let mut seconds = vec![vec![0.0; n]; n];
    for (i, row) in seconds.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = if i == j {
                service
            } else {
                match layout.conflicts[i][j] {
                    Conflict::None => 0.0,
                    Conflict::SharedLane => service,
                    Conflict::Crossing => service + switch,
                }
            };
        }
    }
    Ok(QueueTransitionMatrix {
        queues: layout.queues.clone(),
        seconds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "k")]
pub enum PollingPolicy {
    Exhaustive,
    Gated,
    KLimited(usize),
}

impl Default for PollingPolicy {
    fn default() -> Self {
        PollingPolicy::Exhaustive
    }
}

/// A vehicle waiting for (or holding a revisable) schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaitingVehicle {
    pub id: VehicleId,
    /// Index into the transition matrix.
    pub queue: usize,
    /// Earliest absolute time the front bumper can reach the starting point.
    pub earliest_arrival: f64,
    /// Control-region entry time; orders both its queue and its lane.
    pub entered_at: f64,
}

impl WaitingVehicle {
    fn order_key(&self) -> (f64, VehicleId) {
        (self.entered_at, self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub vehicle_id: VehicleId,
    pub queue: QueueId,
    pub queue_index: usize,
    pub t_sched: f64,
    pub finalized: bool,
}

/// Latest scheduled time per queue.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ServiceHistory {
    pub latest: Vec<Option<f64>>,
}

impl ServiceHistory {
    pub fn empty(queues: usize) -> Self {
        Self {
            latest: vec![None; queues],
        }
    }

    pub fn record(&mut self, queue: usize, t: f64) {
        let slot = &mut self.latest[queue];
        *slot = Some(slot.map_or(t, |old| old.max(t)));
    }

    /// Earliest time compatible with every queue that has been served.
    /// Queues that have never been served, or whose transition entry is
    /// zero, impose nothing.
    pub fn earliest_slot(&self, matrix: &QueueTransitionMatrix, queue: usize, not_before: f64) -> f64 {
        self.latest
            .iter()
            .enumerate()
            .filter_map(|(i, t)| {
                let f = matrix.get(i, queue);
                t.filter(|_| f > 0.0).map(|t| t + f)
            })
            .fold(not_before, f64::max)
    }
}

/// Per-queue FIFO contents during one polling pass.
///
/// A vehicle counts as present in its queue once its earliest arrival is no
/// later than the queue's `ready_by` time. Fresh sets treat everyone as
/// present; [`multi_lane_polling`] tightens this as its service clock runs.
#[derive(Debug, Clone)]
pub struct QueueSet {
    queues: Vec<VecDeque<WaitingVehicle>>,
    lanes: Vec<LaneId>,
    ready_by: Vec<f64>,
}

impl QueueSet {
    pub fn new(matrix: &QueueTransitionMatrix, vehicles: &[WaitingVehicle]) -> Self {
        let mut queues = vec![VecDeque::new(); matrix.len()];
        let mut sorted = vehicles.to_vec();
        sorted.sort_by(|a, b| a.order_key().partial_cmp(&b.order_key()).expect("finite entry times"));
        for v in sorted {
            queues[v.queue].push_back(v);
        }
        Self {
            ready_by: vec![f64::INFINITY; queues.len()],
            queues,
            lanes: matrix.queues.iter().map(QueueId::lane_id).collect(),
        }
    }

    pub fn len(&self, q: usize) -> usize {
        self.queues[q].len()
    }

    /// Vehicles of `q` present at its current `ready_by` time.
    pub fn present_count(&self, q: usize) -> usize {
        self.queues[q]
            .iter()
            .filter(|v| v.earliest_arrival <= self.ready_by[q] + SEPARATION_EPS)
            .count()
    }

    pub fn is_empty(&self) -> bool {
        self.queues.iter().all(VecDeque::is_empty)
    }

    pub fn pop(&mut self, q: usize) -> Option<WaitingVehicle> {
        self.queues[q].pop_front()
    }

    /// A queue's head may be served only once no unscheduled vehicle is
    /// ahead of it in the same physical lane.
    pub fn eligible(&self, q: usize) -> bool {
        let Some(head) = self.queues[q].front() else {
            return false;
        };
        self.queues.iter().enumerate().all(|(other, contents)| {
            other == q
                || self.lanes[other] != self.lanes[q]
                || contents.front().map_or(true, |h| h.order_key() > head.order_key())
        })
    }

    /// Eligible and its head has arrived.
    pub fn ready(&self, q: usize) -> bool {
        self.eligible(q) && self.queues[q][0].earliest_arrival <= self.ready_by[q] + SEPARATION_EPS
    }

    /// Moves every queue's `ready_by` to the earliest slot the server could
    /// offer it next.
    pub fn advance_clock(&mut self, matrix: &QueueTransitionMatrix, served: &ServiceHistory, clock: f64) {
        for (q, r) in self.ready_by.iter_mut().enumerate() {
            *r = served.earliest_slot(matrix, q, clock);
        }
    }

    /// Eligible queue whose head arrives first; ties go to the earliest
    /// entry.
    pub fn first_arrived(&self) -> Option<usize> {
        (0..self.queues.len())
            .filter(|&q| self.eligible(q))
            .min_by(|&a, &b| {
                let ha = &self.queues[a][0];
                let hb = &self.queues[b][0];
                ha.earliest_arrival
                    .total_cmp(&hb.earliest_arrival)
                    .then(ha.order_key().partial_cmp(&hb.order_key()).expect("finite entry times"))
            })
    }
}

/// Visit bookkeeping for the queue currently being served.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PollingState {
    pub current: usize,
    pub served_this_visit: usize,
    /// Vehicles present when the gate closed that are still unserved.
    pub gate_remaining: usize,
}

impl PollingState {
    pub fn start(current: usize, queues: &QueueSet) -> Self {
        Self {
            current,
            served_this_visit: 0,
            gate_remaining: queues.present_count(current).max(1),
        }
    }

    pub fn note_served(&mut self) {
        self.served_this_visit += 1;
        self.gate_remaining = self.gate_remaining.saturating_sub(1);
    }

    /// Moves to the queue chosen by [`next_queue`], opening a new visit when
    /// the policy rotated (even if rotation wrapped back to the same queue).
    pub fn advance(&mut self, policy: PollingPolicy, queues: &QueueSet) -> Option<usize> {
        if may_stay(policy, self, queues) {
            return Some(self.current);
        }
        let next = rotate(self.current, queues)?;
        *self = Self::start(next, queues);
        Some(next)
    }
}

fn may_stay(policy: PollingPolicy, state: &PollingState, queues: &QueueSet) -> bool {
    if !queues.ready(state.current) {
        return false;
    }
    match policy {
        PollingPolicy::Exhaustive => true,
        PollingPolicy::Gated => state.gate_remaining > 0,
        PollingPolicy::KLimited(k) => state.served_this_visit < k,
    }
}

/// Next ready queue in round-robin order. When no head has arrived yet the
/// server idles until the first arrival.
fn rotate(current: usize, queues: &QueueSet) -> Option<usize> {
    let n = queues.queues.len();
    let order = (1..=n).map(|i| (current + i) % n);
    if let Some(q) = order.clone().find(|&q| queues.ready(q)) {
        return Some(q);
    }
    let first = queues.first_arrived()?;
    let t = queues.queues[first][0].earliest_arrival;
    order.filter(|&q| queues.eligible(q)).find(|&q| queues.queues[q][0].earliest_arrival <= t)
}

/// Queue to serve next, or `None` when every queue is empty.
pub fn next_queue(policy: PollingPolicy, state: &PollingState, queues: &QueueSet) -> Option<usize> {
    if may_stay(policy, state, queues) {
        Some(state.current)
    } else {
        rotate(state.current, queues)
    }
}

fn entry_for(matrix: &QueueTransitionMatrix, v: &WaitingVehicle, t_sched: f64) -> ScheduleEntry {
    ScheduleEntry {
        vehicle_id: v.id,
        queue: matrix.queues[v.queue],
        queue_index: v.queue,
        t_sched,
        finalized: false,
    }
}

/// Multi-lane polling pass over every waiting vehicle.
///
/// `history` holds already-fixed service times; it is not modified.
pub fn multi_lane_polling(
    vehicles: &[WaitingVehicle],
    matrix: &QueueTransitionMatrix,
    policy: PollingPolicy,
    history: &ServiceHistory,
) -> Vec<ScheduleEntry> {
    let mut queues = QueueSet::new(matrix, vehicles);
    let mut served = history.clone();
    let mut out = Vec::with_capacity(vehicles.len());
    let Some(first) = queues.first_arrived() else {
        return out;
    };
    let opening = served.earliest_slot(matrix, first, vehicles.iter().map(|v| v.earliest_arrival).fold(f64::INFINITY, f64::min));
    queues.advance_clock(matrix, &served, opening);
    let mut state = PollingState::start(first, &queues);
    let mut q = first;
    while let Some(v) = queues.pop(q) {
        let t = served.earliest_slot(matrix, q, v.earliest_arrival);
        served.record(q, t);
        out.push(entry_for(matrix, &v, t));
        queues.advance_clock(matrix, &served, t);
        state.note_served();
        match state.advance(policy, &queues) {
            Some(next) => q = next,
            None => break,
        }
    }
    out
}

/// First-come-first-serve: one global service order by entry time.
pub fn fcfs_schedule(
    vehicles: &[WaitingVehicle],
    matrix: &QueueTransitionMatrix,
    history: &ServiceHistory,
) -> Vec<ScheduleEntry> {
    let mut order = vehicles.to_vec();
    order.sort_by(|a, b| a.order_key().partial_cmp(&b.order_key()).expect("finite entry times"));
    let mut served = history.clone();
    order
        .iter()
        .map(|v| {
            let t = served.earliest_slot(matrix, v.queue, v.earliest_arrival);
            served.record(v.queue, t);
            entry_for(matrix, v, t)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub first: VehicleId,
    pub second: VehicleId,
    pub required: f64,
    pub actual: f64,
}

/// All pairs of entries whose separation falls short of the matrix.
pub fn verify_schedule(entries: &[ScheduleEntry], matrix: &QueueTransitionMatrix) -> Vec<Violation> {
    let mut violations = Vec::new();
    for (i, a) in entries.iter().enumerate() {
        for b in &entries[i + 1..] {
            let (early, late) = if a.t_sched <= b.t_sched { (a, b) } else { (b, a) };
            let required = matrix.get(early.queue_index, late.queue_index);
            let actual = late.t_sched - early.t_sched;
            if actual + SEPARATION_EPS >= required {
                continue;
            }
            // On a tie, either service order is acceptable.
            if actual <= SEPARATION_EPS
                && matrix.get(late.queue_index, early.queue_index) <= SEPARATION_EPS
            {
                continue;
            }
            violations.push(Violation {
                first: early.vehicle_id,
                second: late.vehicle_id,
                required,
                actual,
            });
        }
    }
    violations
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "policy")]
pub enum SchedulerKind {
    Polling(PollingPolicy),
    Fcfs,
}

impl Default for SchedulerKind {
    fn default() -> Self {
        SchedulerKind::Polling(PollingPolicy::Exhaustive)
    }
}

/// Event-triggered coordinator. Entries within `finalize_margin` seconds of
/// their scheduled time are frozen; everything else is recomputed on each
/// event.
#[derive(Debug, Clone)]
pub struct Coordinator {
    matrix: QueueTransitionMatrix,
    kind: SchedulerKind,
    pub finalize_margin: f64,
    history: ServiceHistory,
    entries: HashMap<VehicleId, ScheduleEntry>,
}

impl Coordinator {
    pub fn new(matrix: QueueTransitionMatrix, kind: SchedulerKind) -> Self {
        let n = matrix.len();
        Self {
            matrix,
            kind,
            finalize_margin: 4.0,
            history: ServiceHistory::empty(n),
            entries: HashMap::new(),
        }
    }

    pub fn matrix(&self) -> &QueueTransitionMatrix {
        &self.matrix
    }

    pub fn entry(&self, id: VehicleId) -> Option<&ScheduleEntry> {
        self.entries.get(&id)
    }

    /// Re-plans the schedule at `now` for every vehicle still in the control
    /// region. Returns the full current schedule sorted by time.
    pub fn reschedule(&mut self, now: f64, waiting: &[WaitingVehicle]) -> Vec<ScheduleEntry> {
        let present: HashMap<VehicleId, &WaitingVehicle> = waiting.iter().map(|w| (w.id, w)).collect();
        let margin = self.finalize_margin;
        let history = &mut self.history;
        self.entries.retain(|id, e| {
            let keep = present.contains_key(id);
            if !keep || e.finalized || e.t_sched - now <= margin {
                e.finalized = true;
                history.record(e.queue_index, e.t_sched);
            }
            keep
        });
        let open: Vec<WaitingVehicle> = waiting
            .iter()
            .filter(|w| !self.entries.get(&w.id).map_or(false, |e| e.finalized))
            .copied()
            .collect();
        let fresh = match self.kind {
            SchedulerKind::Polling(policy) => multi_lane_polling(&open, &self.matrix, policy, &self.history),
            SchedulerKind::Fcfs => fcfs_schedule(&open, &self.matrix, &self.history),
        };
        for e in fresh {
            self.entries.insert(e.vehicle_id, e);
        }
        let mut all: Vec<ScheduleEntry> = self.entries.values().cloned().collect();
        all.sort_by(|a, b| a.t_sched.total_cmp(&b.t_sched).then(a.vehicle_id.cmp(&b.vehicle_id)));
        all
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleLogRow {
    pub event_time_s: f64,
    pub vehicle_id: VehicleId,
    pub road: usize,
    pub lane: usize,
    pub movement: Movement,
    pub t_sched_s: f64,
    pub finalized: u8,
}

impl ScheduleLogRow {
    pub fn new(event_time_s: f64, e: &ScheduleEntry) -> Self {
        Self {
            event_time_s,
            vehicle_id: e.vehicle_id,
            road: e.queue.road,
            lane: e.queue.lane,
            movement: e.queue.movement,
            t_sched_s: e.t_sched,
            finalized: u8::from(e.finalized),
        }
    }
}

pub fn write_schedule_log<W: Write>(out: W, rows: &[ScheduleLogRow]) -> Result<(), ScheduleError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// A randomized polling instance: layout, waiting vehicles and policy.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub layout: IntersectionLayout,
    pub vehicles: Vec<WaitingVehicle>,
    pub policy: PollingPolicy,
    pub history: ServiceHistory,
}

/// Builds a random layout (2 to 16 queues, random crossing pattern), a
/// random load and a random policy from `seed`.
pub fn random_instance(seed: u64) -> RandomInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let roads = rng.gen_range(1..=4usize);
    let mut queues = Vec::new();
    for road in 0..roads {
        for lane in 0..rng.gen_range(1..=2usize) {
            let movements: &[Movement] = if rng.gen_bool(0.5) {
                &[Movement::Straight]
            } else if lane == 0 {
                &[Movement::Straight, Movement::Left]
            } else {
                &[Movement::Straight, Movement::Right]
            };
            for &m in movements {
                queues.push(QueueId::new(road, lane, m));
            }
        }
    }
    let n = queues.len();
    let mut conflicts = vec![vec![Conflict::None; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let c = if queues[i].lane_id() == queues[j].lane_id() {
                Conflict::SharedLane
            } else if rng.gen_bool(0.5) {
                Conflict::Crossing
            } else {
                Conflict::None
            };
            conflicts[i][j] = c;
            conflicts[j][i] = c;
        }
    }
    let layout = IntersectionLayout { queues, conflicts };
    let count = rng.gen_range(0..40usize);
    let mut vehicles = Vec::with_capacity(count);
    for id in 0..count {
        let entered_at = rng.gen_range(0.0..60.0);
        vehicles.push(WaitingVehicle {
            id: id as VehicleId,
            queue: rng.gen_range(0..n),
            earliest_arrival: entered_at + rng.gen_range(18.0..30.0),
            entered_at,
        });
    }
    let policy = match rng.gen_range(0..3) {
        0 => PollingPolicy::Exhaustive,
        1 => PollingPolicy::Gated,
        _ => PollingPolicy::KLimited(rng.gen_range(1..4)),
    };
    let mut history = ServiceHistory::empty(n);
    for q in 0..n {
        if rng.gen_bool(0.3) {
            history.record(q, rng.gen_range(0.0..20.0));
        }
    }
    RandomInstance {
        layout,
        vehicles,
        policy,
        history,
    }
}
