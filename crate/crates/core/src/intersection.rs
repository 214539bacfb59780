//! Four-legged, two-lane intersection: Poisson arrivals, an event-triggered
//! schedule coordinator and one trajectory controller per vehicle.

use std::collections::{HashMap, HashSet, VecDeque};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{
    derive_seed, min_time_to_cover, sample_arrivals, sample_entry_speed, step_vehicle, Action, ArrivalProcess, LaneId,
    Movement, SimConfig, SimError, Trajectory, TrajectoryRow, VehicleId, VehicleState,
};
use crate::metrics::{action_latency_stats, deviation_count, total_average_travel_time, EvalReport};
use crate::mdp::{observe, DrivingPolicy, Observation};
use crate::polling::{
    build_transition_matrix, Coordinator, IntersectionLayout, QueueId, ScheduleError, ScheduleLogRow, SchedulerKind,
    WaitingVehicle,
};

pub const ROADS: usize = 4;
pub const LANES_PER_ROAD: usize = 2;

/// Full-scale traffic levels (vehicles per 30 minutes).
pub const FULL_TRAFFIC_LEVELS: [usize; 3] = [530, 1080, 1750];
pub const FULL_HORIZON_S: f64 = 1800.0;

/// Vehicle count over `horizon` at the same arrival rate as a full-scale level.
pub fn scaled_traffic_level(full_level: usize, horizon: f64) -> usize {
    (full_level as f64 * horizon / FULL_HORIZON_S).round() as usize
}

#[derive(Debug, Error)]
pub enum IeError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IeConfig {
    pub sim: SimConfig,
    /// Arrivals are generated over `[0, horizon)`.
    pub horizon: f64,
    /// Vehicles expected over the horizon, spread evenly over all lanes.
    pub traffic_level: usize,
    pub scheduler: SchedulerKind,
    pub seed: u64,
    /// No vehicle is scheduled earlier than this long after it enters.
    pub min_schedule_lead: f64,
    /// Free road needed behind the last vehicle of a lane before another
    /// may enter; arrivals wait otherwise.
    pub entry_gap: f64,
    /// Extra simulated time after the horizon for vehicles to clear.
    pub drain: f64,
}

impl Default for IeConfig {
    fn default() -> Self {
        Self {
            sim: SimConfig::default(),
            horizon: 300.0,
            traffic_level: scaled_traffic_level(FULL_TRAFFIC_LEVELS[0], 300.0),
            scheduler: SchedulerKind::default(),
            seed: 0,
            min_schedule_lead: 20.0,
            entry_gap: 10.0,
            drain: 600.0,
        }
    }
}

#[derive(Debug, Clone)]
struct LiveVehicle {
    state: VehicleState,
    queue: usize,
    crossed_at: Option<f64>,
    t_sched_at_crossing: Option<f64>,
    trajectory: Trajectory,
}

#[derive(Debug, Clone, Default)]
pub struct IeOutcome {
    pub report: EvalReport,
    pub schedule_log: Vec<ScheduleLogRow>,
    pub trajectories: Vec<TrajectoryRow>,
}

/// Chooses a movement for an arrival in `lane`: lane 0 goes straight or
/// left, lane 1 straight or right, with equal odds.
fn pick_movement<R: Rng>(lane: usize, rng: &mut R) -> Movement {
    match (lane, rng.gen_bool(0.5)) {
        (_, true) => Movement::Straight,
        (0, false) => Movement::Left,
        _ => Movement::Right,
    }
}

/// Action for a vehicle that has overrun its schedule.
pub fn late_fallback(obs: &Observation, cfg: &SimConfig) -> Action {
    crate::baselines::safe_following_action(obs, cfg)
}

/// Simulates the intersection with `policy` driving every vehicle. Vehicles
/// that overrun their schedule switch to [`late_fallback`].
pub fn run_intersection<P: DrivingPolicy + ?Sized>(
    cfg: &IeConfig,
    policy: &mut P,
    label: &str,
    record_trajectories: bool,
) -> Result<IeOutcome, IeError> {
    let sim = cfg.sim;
    sim.validate()?;
    let layout = IntersectionLayout::four_leg_two_lane();
    let matrix = build_transition_matrix(&layout, &sim)?;
    let mut coordinator = Coordinator::new(matrix, cfg.scheduler);
    let lanes = ROADS * LANES_PER_ROAD;
    let rate = if cfg.horizon > 0.0 {
        cfg.traffic_level as f64 / cfg.horizon / lanes as f64
    } else {
        0.0
    };
    let arrivals = sample_arrivals(&ArrivalProcess {
        rate,
        horizon: cfg.horizon,
        lanes,
        rng_seed: derive_seed(cfg.seed, 0),
    });
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let mut pending: Vec<VecDeque<(f64, Movement, f64)>> = vec![VecDeque::new(); lanes];
    for a in &arrivals {
        let m = pick_movement(a.lane % LANES_PER_ROAD, &mut rng);
        let v = sample_entry_speed(&mut rng, &sim);
        pending[a.lane].push_back((a.time, m, v));
    }

    let mut vehicles: Vec<LiveVehicle> = Vec::new();
    let mut schedule_log = Vec::new();
    let mut latencies = Vec::new();
    let mut collided: HashSet<(VehicleId, VehicleId)> = HashSet::new();
    let mut done: Vec<LiveVehicle> = Vec::new();
    let mut next_id: VehicleId = 0;
    let end = cfg.horizon + cfg.drain;
    let box_exit = -(sim.intersection_width + sim.vehicle_length);
    let mut step: u64 = 0;
    loop {
        let now = step as f64 * sim.dt;
        let active = vehicles.iter().any(|v| v.crossed_at.is_none());
        let waiting_arrivals = pending.iter().any(|q| !q.is_empty());
        if now >= end || (now >= cfg.horizon && !active && !waiting_arrivals) {
            break;
        }

        // entries
        let mut spawned = false;
        for (lane_idx, queue) in pending.iter_mut().enumerate() {
            let lane = LaneId {
                road: lane_idx / LANES_PER_ROAD,
                lane: lane_idx % LANES_PER_ROAD,
            };
            while let Some(&(t, movement, entry_speed)) = queue.front() {
                if t > now + 1e-9 {
                    break;
                }
                let last = vehicles.iter().filter(|v| v.state.lane == lane).max_by(|a, b| a.state.x.total_cmp(&b.state.x));
                let gap = last.map_or(f64::INFINITY, |l| sim.control_length - l.state.x - l.state.length);
                if gap < cfg.entry_gap {
                    break;
                }
                queue.pop_front();
                let mut v = entry_speed;
                if let Some(l) = last {
                    if gap < 3.0 * cfg.entry_gap {
                        v = v.min(l.state.v);
                    }
                }
                let q = QueueId::new(lane.road, lane.lane, movement);
                let queue_idx = layout.queue_index(&q).expect("layout has every lane movement");
                let state = VehicleState {
                    lane,
                    movement,
                    entered_at: now,
                    ..VehicleState::new(next_id, sim.control_length, v, &sim)
                };
                next_id += 1;
                vehicles.push(LiveVehicle {
                    state,
                    queue: queue_idx,
                    crossed_at: None,
                    t_sched_at_crossing: None,
                    trajectory: Trajectory::starting_at(now, &state),
                });
                spawned = true;
            }
        }
        if spawned {
            let waiting: Vec<WaitingVehicle> = vehicles
                .iter()
                .filter(|v| v.crossed_at.is_none())
                .map(|v| WaitingVehicle {
                    id: v.state.id,
                    queue: v.queue,
                    earliest_arrival: (now + min_time_to_cover(v.state.x, v.state.v, &sim))
                        .max(v.state.entered_at + cfg.min_schedule_lead),
                    entered_at: v.state.entered_at,
                })
                .collect();
            for e in coordinator.reschedule(now, &waiting) {
                schedule_log.push(ScheduleLogRow::new(now, &e));
            }
        }

        // decisions against the current positions of everyone
        let mut actions = Vec::with_capacity(vehicles.len());
        for v in &vehicles {
            if v.crossed_at.is_some() {
                actions.push(Action::Noop);
                continue;
            }
            let leader = vehicles
                .iter()
                .filter(|o| o.state.lane == v.state.lane && o.state.x < v.state.x && o.state.id != v.state.id)
                .max_by(|a, b| a.state.x.total_cmp(&b.state.x))
                .map(|o| &o.state);
            let t_sched = coordinator.entry(v.state.id).map_or(now, |e| e.t_sched);
            let obs = observe(&v.state, leader, t_sched, now, &sim);
            let action = if now > t_sched + sim.dt + 1e-9 {
                late_fallback(&obs, &sim)
            } else {
                let started = Instant::now();
                let a = policy.act(&obs);
                latencies.push(started.elapsed());
                a
            };
            actions.push(action);
        }

        step += 1;
        let now = step as f64 * sim.dt;
        for (v, a) in vehicles.iter_mut().zip(&actions) {
            v.state = step_vehicle(&v.state, *a, &sim);
            if v.crossed_at.is_none() {
                if record_trajectories {
                    v.trajectory.push(now, &v.state, *a);
                }
                if v.state.x <= 0.0 {
                    v.crossed_at = Some(now);
                    v.t_sched_at_crossing = coordinator.entry(v.state.id).map(|e| e.t_sched);
                }
            }
        }

        // rear-end overlaps, counted once per pair
        let mut by_lane: HashMap<LaneId, Vec<&VehicleState>> = HashMap::new();
        for v in &vehicles {
            by_lane.entry(v.state.lane).or_default().push(&v.state);
        }
        for lane in by_lane.values_mut() {
            lane.sort_by(|a, b| a.x.total_cmp(&b.x));
            for pair in lane.windows(2) {
                if pair[1].x - pair[0].x - pair[0].length < 0.0 {
                    collided.insert((pair[0].id, pair[1].id));
                }
            }
        }

        // drop vehicles that have cleared the intersection box
        let (gone, kept): (Vec<LiveVehicle>, Vec<LiveVehicle>) =
            vehicles.into_iter().partition(|v| v.crossed_at.is_some() && v.state.x < box_exit);
        vehicles = kept;
        done.extend(gone);
    }

    done.extend(vehicles);
    done.sort_by_key(|v| v.state.id);
    let mut trips = Vec::new();
    let mut scheduled = Vec::new();
    let mut actual = HashMap::new();
    let mut trajectories = Vec::new();
    let mut censored = 0;
    for v in &done {
        match v.crossed_at {
            Some(t) => {
                trips.push((v.state.entered_at, t));
                if let Some(ts) = v.t_sched_at_crossing {
                    scheduled.push((v.state.id, ts));
                    actual.insert(v.state.id, t);
                }
            }
            None => censored += 1,
        }
        if record_trajectories {
            trajectories.extend(v.trajectory.rows(v.state.id, v.state.lane, label));
        }
    }
    let deviations = deviation_count(&scheduled, &actual, 1.0).expect("every scheduled crossing has a time");
    let report = EvalReport {
        label: label.to_string(),
        vehicles_spawned: done.len(),
        travel_times: trips.iter().map(|(a, b)| b - a).collect(),
        mean_travel_time: total_average_travel_time(&trips),
        censored,
        x_values: Vec::new(),
        diffs: Vec::new(),
        deviations,
        collisions: collided.len(),
        latency: action_latency_stats(&latencies).ok(),
    };
    Ok(IeOutcome {
        report,
        schedule_log,
        trajectories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::HeuristicPolicy;
    use crate::polling::{verify_schedule, PollingPolicy};

    fn heuristic() -> HeuristicPolicy {
        HeuristicPolicy {
            cfg: SimConfig::default(),
        }
    }

    #[test]
    fn scaled_levels() {
        let levels: Vec<usize> = FULL_TRAFFIC_LEVELS.iter().map(|&l| scaled_traffic_level(l, 300.0)).collect();
        assert_eq!(levels, vec![88, 180, 292]);
    }

    #[test]
    fn empty_run_is_clean() {
        let cfg = IeConfig {
            traffic_level: 0,
            ..Default::default()
        };
        let out = run_intersection(&cfg, &mut heuristic(), "empty", true).unwrap();
        assert_eq!(out.report.vehicles_spawned, 0);
        assert_eq!(out.report.mean_travel_time, None);
        assert!(out.trajectories.is_empty());
    }

    #[test]
    fn light_traffic_with_heuristic() {
        let cfg = IeConfig {
            horizon: 120.0,
            traffic_level: 30,
            seed: 3,
            ..Default::default()
        };
        let a = run_intersection(&cfg, &mut heuristic(), "h", true).unwrap();
        let b = run_intersection(&cfg, &mut heuristic(), "h", true).unwrap();
        assert_eq!(a.report.travel_times, b.report.travel_times);
        assert!(a.report.vehicles_spawned > 10);
        assert_eq!(a.report.censored, 0);
        assert_eq!(a.report.collisions, 0);
        assert!(a.report.travel_times.iter().all(|t| *t >= 18.0 - 1e-9));
        assert!(a.report.latency.is_some());
    }

    #[test]
    fn published_schedules_are_safe() {
        let cfg = IeConfig {
            horizon: 120.0,
            traffic_level: 60,
            seed: 5,
            scheduler: SchedulerKind::Polling(PollingPolicy::Exhaustive),
            ..Default::default()
        };
        let out = run_intersection(&cfg, &mut heuristic(), "h", false).unwrap();
        let matrix = build_transition_matrix(&IntersectionLayout::four_leg_two_lane(), &cfg.sim).unwrap();
        let last_event = out.schedule_log.last().unwrap().event_time_s;
        let final_entries: Vec<_> = out
            .schedule_log
            .iter()
            .filter(|r| r.event_time_s == last_event)
            .map(|r| {
                let q = QueueId::new(r.road, r.lane, r.movement);
                crate::polling::ScheduleEntry {
                    vehicle_id: r.vehicle_id,
                    queue_index: matrix.queues.iter().position(|x| *x == q).unwrap(),
                    queue: q,
                    t_sched: r.t_sched_s,
                    finalized: r.finalized == 1,
                }
            })
            .collect();
        assert!(verify_schedule(&final_entries, &matrix).is_empty());
    }
}
