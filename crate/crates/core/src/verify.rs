//! Property suites runnable without any trained checkpoint.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{dp_optimal_trajectory, exhaustive_min_x, tiny_instance};
use crate::kinematics::{SimConfig, NUM_ACTIONS};
use crate::md_rl::{
    contraction_ratio, fixed_point_convergence_test, md_q_update_tabular, DiscountFn, DiscountVector, MicroMdp, QTable,
    TabularTransition, VisitRate,
};
use crate::mdp::NUM_FEATURES;
use crate::nn::{gradient_check, Activation, Mlp, MlpSpec};
use crate::polling::{
    build_transition_matrix, fcfs_schedule, multi_lane_polling, random_instance, verify_schedule, PollingPolicy,
    QueueTransitionMatrix, ServiceHistory, WaitingVehicle,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySettings {
    pub schedule_instances: usize,
    pub gradient_pairs: usize,
    pub tiny_instances: usize,
    pub contraction_pairs: usize,
    pub reduction_transitions: usize,
    /// Extra transition matrix (JSON) to push through the schedule-safety suite.
    pub matrix: Option<std::path::PathBuf>,
    pub seed: u64,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self {
            schedule_instances: 1000,
            gradient_pairs: 100,
            tiny_instances: 50,
            contraction_pairs: 1000,
            reduction_transitions: 10_000,
            matrix: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    pub failures: usize,
    pub detail: String,
}

impl SuiteResult {
    fn new(name: &str, cases: usize, failures: usize, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed: failures == 0 && cases > 0,
            cases,
            failures,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VerifyReport {
    pub suites: Vec<SuiteResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(|s| s.passed)
    }
}

/// Polling and FCFS schedules on random instances, plus `injected` if
/// given. An injected matrix that fails validation fails the suite.
pub fn schedule_safety(settings: &VerifySettings, sim: &SimConfig, injected: Option<&str>) -> SuiteResult {
    let mut cases = 0;
    let mut failures = 0;
    let mut notes = Vec::new();
    for i in 0..settings.schedule_instances {
        let inst = random_instance(settings.seed.wrapping_add(i as u64));
        let matrix = match build_transition_matrix(&inst.layout, sim) {
            Ok(m) => m,
            Err(e) => {
                failures += 1;
                notes.push(format!("instance {i}: {e}"));
                continue;
            }
        };
        for entries in [
            multi_lane_polling(&inst.vehicles, &matrix, inst.policy, &inst.history),
            fcfs_schedule(&inst.vehicles, &matrix, &inst.history),
        ] {
            cases += 1;
            let bad = verify_schedule(&entries, &matrix).len() + usize::from(entries.len() != inst.vehicles.len());
            if bad > 0 {
                failures += 1;
                notes.push(format!("instance {i}: {bad} violations"));
            }
        }
    }
    if let Some(text) = injected {
        cases += 1;
        match injected_matrix_check(text, settings.seed) {
            Ok(0) => {}
            Ok(n) => {
                failures += 1;
                notes.push(format!("injected matrix: {n} violations"));
            }
            Err(e) => {
                failures += 1;
                notes.push(format!("injected matrix: {e}"));
            }
        }
    }
    notes.truncate(10);
    SuiteResult::new("schedule_safety", cases, failures, notes.join("; "))
}

fn injected_matrix_check(text: &str, seed: u64) -> Result<usize, String> {
    let matrix = QueueTransitionMatrix::from_json(text).map_err(|e| e.to_string())?;
    matrix.validate().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vehicles: Vec<WaitingVehicle> = (0..30)
        .map(|id| {
            let entered_at = rng.gen_range(0.0..40.0);
            WaitingVehicle {
                id,
                queue: rng.gen_range(0..matrix.len()),
                earliest_arrival: entered_at + 20.0,
                entered_at,
            }
        })
        .collect();
    let history = ServiceHistory::empty(matrix.len());
    let mut n = 0;
    for policy in [PollingPolicy::Exhaustive, PollingPolicy::Gated, PollingPolicy::KLimited(2)] {
        n += verify_schedule(&multi_lane_polling(&vehicles, &matrix, policy, &history), &matrix).len();
    }
    n += verify_schedule(&fcfs_schedule(&vehicles, &matrix, &history), &matrix).len();
    Ok(n)
}

/// Random network and input pairs, backprop against central differences.
pub fn gradient_suite(settings: &VerifySettings) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..settings.gradient_pairs {
        let depth = rng.gen_range(1..=3);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.gen_range(2..=12)).collect();
        let act = if rng.gen_bool(0.5) { Activation::Tanh } else { Activation::Relu };
        let mut net = Mlp::new(MlpSpec::new(NUM_FEATURES, &hidden, act, rng.gen())).expect("valid spec");
        let params: Vec<f64> = (0..net.num_params()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        net.set_params(&params).expect("sized to the net");
        let x: Vec<f64> = (0..NUM_FEATURES).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..NUM_ACTIONS).map(|_| rng.gen_range(-2.0..2.0)).collect();
        match gradient_check(&net, &x, &target, 1e-6) {
            Ok(e) => {
                worst = worst.max(e);
                if e > 1e-4 {
                    failures += 1;
                }
            }
            Err(_) => failures += 1,
        }
    }
    SuiteResult::new(
        "gradient_check",
        settings.gradient_pairs,
        failures,
        format!("worst relative error {worst:.3e}"),
    )
}

/// DP oracle against exhaustive search on tiny feasible instances.
pub fn dp_enumeration_suite(settings: &VerifySettings) -> SuiteResult {
    let mut cases = 0;
    let mut failures = 0;
    let mut notes = Vec::new();
    let mut seed = settings.seed;
    let limit = settings.seed + 50 * settings.tiny_instances as u64 + 100;
    while cases < settings.tiny_instances && seed < limit {
        let inst = tiny_instance(seed);
        let dp = dp_optimal_trajectory(&inst.start, inst.t_sched, inst.leader.as_ref(), &inst.cfg);
        let brute = exhaustive_min_x(&inst.start, inst.t_sched, inst.leader.as_ref(), &inst.cfg);
        let dp_x = dp.solution().map(|s| s.x_value);
        if brute.is_some() || dp_x.is_some() {
            cases += 1;
            if dp_x != brute {
                failures += 1;
                notes.push(format!("seed {seed}: dp {dp_x:?} vs enumeration {brute:?}"));
            }
        }
        seed += 1;
    }
    if cases < settings.tiny_instances {
        notes.push(format!("only {cases} feasible instances"));
        failures += 1;
    }
    SuiteResult::new("dp_vs_enumeration", cases, failures, notes.join("; "))
}

/// Tabular multi-discount Q-learning reaches the H fixed point, and H
/// contracts by at most the discount bound.
pub fn fixed_point_suite(settings: &VerifySettings) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut cases = 0;
    let mut failures = 0;
    let mut notes = Vec::new();
    for (i, bound) in [0.5, 0.9, 0.99].into_iter().enumerate() {
        let mdp = MicroMdp::random(4, 2, settings.seed.wrapping_add(i as u64));
        let f = DiscountFn::Aim(DiscountVector::new(bound, bound * 0.5));
        let errs = fixed_point_convergence_test(&mdp, &f, VisitRate::default(), 200_000, 1e-6);
        let last = errs.last().copied().unwrap_or(f64::INFINITY);
        cases += 1;
        if !(last < 1e-6) {
            failures += 1;
            notes.push(format!("γ′ {bound}: error {last:.2e}"));
        }
        let mut worst: f64 = 0.0;
        for _ in 0..settings.contraction_pairs {
            let mut q1 = QTable::zeros(mdp.num_states(), mdp.num_actions());
            let mut q2 = q1.clone();
            for v in q1.values.iter_mut().chain(q2.values.iter_mut()).flatten() {
                *v = rng.gen_range(-10.0..10.0);
            }
            worst = worst.max(contraction_ratio(&mdp, &f, &q1, &q2));
        }
        cases += settings.contraction_pairs;
        if worst > bound + 1e-12 {
            failures += 1;
            notes.push(format!("γ′ {bound}: contraction ratio {worst}"));
        }
    }
    SuiteResult::new("fixed_point", cases, failures, notes.join("; "))
}

/// Single-objective, constant-discount multi-discount updates against plain
/// n-step Q-learning on one random transition stream.
pub fn reduction_suite(settings: &VerifySettings) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let (states, actions, gamma) = (7, 3, 0.93);
    let f = DiscountFn::Constant { gamma };
    let mut md = QTable::zeros(states, actions);
    let mut plain = md.clone();
    let mut failures = 0;
    let mut stream: Vec<TabularTransition> = Vec::new();
    for _ in 0..settings.reduction_transitions {
        let state = stream.last().filter(|t| !t.terminal).map_or_else(|| rng.gen_range(0..states), |t| t.next_state);
        stream.push(TabularTransition {
            state,
            action: rng.gen_range(0..actions),
            reward: vec![rng.gen_range(-1.0..1.0)],
            next_state: rng.gen_range(0..states),
            terminal: rng.gen_bool(0.05),
        });
        let n = rng.gen_range(1..=4).min(stream.len());
        let window = &stream[stream.len() - n..];
        md_q_update_tabular(&mut md, window, &[gamma], &f, 0.1);
        n_step_q_update(&mut plain, window, gamma, 0.1);
        if md != plain {
            failures += 1;
            plain = md.clone();
        }
    }
    SuiteResult::new("reduction", settings.reduction_transitions, failures, String::new())
}

fn n_step_q_update(q: &mut QTable, window: &[TabularTransition], gamma: f64, lr: f64) {
    let mut ret = 0.0;
    let mut disc = 1.0;
    for t in window {
        ret += disc * t.reward[0];
        disc *= gamma;
    }
    let last = window.last().expect("non-empty window");
    let target = if last.terminal { ret } else { ret + disc * q.max(last.next_state) };
    let cell = &mut q.values[window[0].state][window[0].action];
    *cell += lr * (target - *cell);
}

pub fn run_all(settings: &VerifySettings, sim: &SimConfig, injected: Option<&str>) -> VerifyReport {
    VerifyReport {
        suites: vec![
            schedule_safety(settings, sim, injected),
            gradient_suite(settings),
            dp_enumeration_suite(settings),
            fixed_point_suite(settings),
            reduction_suite(settings),
        ],
    }
}
