#![allow(dead_code)]

use aim_core::baselines::TinyInstance;
use aim_core::kinematics::{step_vehicle, Action, VehicleState};
use aim_core::md_rl::{MicroMdp, QTable};
use aim_core::polling::{QueueTransitionMatrix, ScheduleEntry};

/// Brute-force minimum X: tries every action sequence, keeps those that
/// first reach the line at full speed within one step of the schedule
/// without touching the leader.
pub fn enumerate_min_x(inst: &TinyInstance) -> Option<f64> {
    let cfg = inst.cfg;
    let horizon = ((inst.t_sched + cfg.dt) / cfg.dt + 1e-9).floor() as usize;
    let mut best: Option<f64> = None;
    let mut path = vec![inst.start];
    fn go(path: &mut Vec<VehicleState>, inst: &TinyInstance, horizon: usize, best: &mut Option<f64>) {
        let cfg = inst.cfg;
        let j = path.len();
        if j > horizon {
            return;
        }
        for a in [Action::Brake, Action::Noop, Action::Gas] {
            let s = step_vehicle(path.last().unwrap(), a, &cfg);
            let hits = inst
                .leader
                .as_ref()
                .is_some_and(|l| s.x - l.positions[j] - l.length < 0.0);
            if hits {
                continue;
            }
            if s.x <= 0.0 {
                let t = j as f64 * cfg.dt;
                if (t - inst.t_sched).abs() <= cfg.dt + 1e-9 && s.v == cfg.v_max {
                    let x: f64 = path.iter().map(|p| p.x.max(0.0)).sum::<f64>() / cfg.control_length;
                    if best.map_or(true, |b| x < b) {
                        *best = Some(x);
                    }
                }
                continue;
            }
            path.push(s);
            go(path, inst, horizon, best);
            path.pop();
        }
    }
    go(&mut path, inst, horizon, &mut best);
    best
}

/// Pairs of entries closer than the matrix allows, in either order.
pub fn separation_failures(entries: &[ScheduleEntry], m: &QueueTransitionMatrix) -> usize {
    let mut bad = 0;
    for (i, a) in entries.iter().enumerate() {
        for b in &entries[i + 1..] {
            let ab = b.t_sched - a.t_sched >= m.get(a.queue_index, b.queue_index) - 1e-9;
            let ba = a.t_sched - b.t_sched >= m.get(b.queue_index, a.queue_index) - 1e-9;
            if !(ab || ba) {
                bad += 1;
            }
        }
    }
    bad
}

/// Bellman backup written out directly from the transition table.
pub fn backup(mdp: &MicroMdp, q: &QTable, d1: f64, d2: f64) -> QTable {
    let mut out = q.clone();
    for (s, row) in out.values.iter_mut().enumerate() {
        for (a, cell) in row.iter_mut().enumerate() {
            let r = &mdp.reward[s][a];
            let f = if r[1] != 0.0 { d2 } else { d1 };
            let best = mdp.next[s][a].map_or(0.0, |n| q.values[n].iter().copied().fold(f64::NEG_INFINITY, f64::max));
            *cell = r[0] + r[1] + f * best;
        }
    }
    out
}

pub fn max_abs_diff(a: &QTable, b: &QTable) -> f64 {
    a.values
        .iter()
        .flatten()
        .zip(b.values.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Iterates the backup to numerical convergence.
pub fn value_iteration(mdp: &MicroMdp, d1: f64, d2: f64) -> QTable {
    let mut q = QTable::zeros(mdp.num_states(), mdp.num_actions());
    for _ in 0..100_000 {
        let next = backup(mdp, &q, d1, d2);
        let done = max_abs_diff(&next, &q) < 1e-13;
        q = next;
        if done {
            break;
        }
    }
    q
}
