//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails. `AIM_ACCEPTANCE_QUICK=1` shrinks the
//! training runs for a smoke pass, and criterion 1 then reports FAIL.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::process::ExitCode;
use std::time::Instant;

use aim_core::baselines::{dp_optimal_trajectory, tiny_instance, GreedyPolicy};
use aim_core::harness::{desk_traffic_levels, evaluate_ve, train_agent, AgentKind, ExperimentConfig, TrainedPolicy, FINAL_FRACTION};
use aim_core::intersection::run_intersection;
use aim_core::kinematics::{SimConfig, NUM_ACTIONS};
use aim_core::md_rl::{md_q_update_tabular, DiscountFn, DiscountVector, MicroMdp, QTable, TabularTransition, VisitRate};
use aim_core::mdp::NUM_FEATURES;
use aim_core::metrics::EvalReport;
use aim_core::nn::{Activation, ForwardCache, Mlp, MlpSpec};
use aim_core::polling::{
    build_transition_matrix, fcfs_schedule, multi_lane_polling, random_instance, verify_schedule, PollingPolicy,
    SchedulerKind,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const MIN_STEPS: u64 = 100_000;

fn quick() -> bool {
    std::env::var("AIM_ACCEPTANCE_QUICK").is_ok_and(|v| v == "1")
}

fn base_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    if quick() {
        c.train.max_steps = 3000;
        c.train.epsilon.anneal_steps = 2000;
    }
    c
}

fn agents() -> [AgentKind; 4] {
    [AgentKind::MdDqn, AgentKind::DqnFixed(1.0), AgentKind::DqnFixed(0.9), AgentKind::Tldqn]
}

/// Trains every agent on every seed; returns per-seed final rewards and the
/// MD-DQN policy of the first seed.
fn multi_discount_superiority(cfg: &ExperimentConfig) -> (Outcome, Option<TrainedPolicy>) {
    let mut wins = 0;
    let mut lines = Vec::new();
    let mut first = None;
    for &seed in &SEEDS {
        let mut finals = Vec::new();
        for agent in agents() {
            let mut c = cfg.clone();
            c.agent = agent;
            let started = Instant::now();
            let (policy, log, _) = train_agent(&c, seed).expect("training runs");
            let f = log.final_mean_total(FINAL_FRACTION);
            eprintln!("  seed {seed} {agent}: final {f:.2} ({} episodes, {:.0}s)", log.episodes.len(), started.elapsed().as_secs_f64());
            finals.push(f);
            if agent == AgentKind::MdDqn && first.is_none() {
                first = Some(policy);
            }
        }
        let md = finals[0];
        let won = finals[1..].iter().all(|&o| md > o);
        wins += usize::from(won);
        lines.push(format!("seed {seed}: md {md:.1} vs {:.1}/{:.1}/{:.1}", finals[1], finals[2], finals[3]));
    }
    let at_scale = cfg.train.max_steps >= MIN_STEPS;
    (
        outcome(at_scale && wins >= 4, format!("MD-DQN best on {wins}/5 seeds at {} steps; {}", cfg.train.max_steps, lines.join("; "))),
        first,
    )
}

fn near_optimal(cfg: &ExperimentConfig, policy: &TrainedPolicy) -> (Outcome, Option<(f64, f64)>) {
    let mut c = cfg.clone();
    c.agent = AgentKind::MdDqn;
    let r = evaluate_ve(&c, Some(policy), 0, None).expect("evaluation runs");
    let n = r.rows.len();
    let mut diffs: Vec<f64> = r.rows.iter().map(|row| row.diff.unwrap_or(f64::INFINITY)).collect();
    diffs.sort_by(f64::total_cmp);
    let close = diffs.iter().filter(|&&d| d < 5.0).count();
    let median = if n % 2 == 1 { diffs[n / 2] } else { 0.5 * (diffs[n / 2 - 1] + diffs[n / 2]) };
    let latency = match (r.report.latency, r.dp_latency) {
        (Some(a), Some(d)) => Some((a.avg_s, d.avg_s)),
        _ => None,
    };
    let fmt: Vec<String> = r.rows.iter().map(|row| format!("{}:{}", row.t_sched, row.diff.map_or("-".into(), |d| format!("{d:.1}")))).collect();
    (
        outcome(2 * close > n && median < 5.0, format!("{close}/{n} schedules with diff < 5, median {median:.2}; {}", fmt.join(" "))),
        latency,
    )
}

/// Mean travel time, deviation count, vehicle count and collisions of the
/// trained agent per (level, seed, scheduler).
fn intersection_runs(cfg: &ExperimentConfig, policy: &TrainedPolicy) -> Vec<(usize, u64, SchedulerKind, EvalReport)> {
    let mut out = Vec::new();
    for level in desk_traffic_levels(cfg.ie.horizon) {
        for seed in 0..3 {
            for kind in [SchedulerKind::Fcfs, SchedulerKind::Polling(PollingPolicy::Exhaustive)] {
                let mut c = cfg.clone();
                c.ie.traffic_level = level;
                c.ie.scheduler = kind;
                let ie = c.ie_config(seed);
                let mut driver = GreedyPolicy { q: policy, cfg: c.sim };
                let r = run_intersection(&ie, &mut driver, "md_dqn", false).expect("intersection runs");
                out.push((level, seed, kind, r.report));
            }
        }
    }
    out
}

fn zero_deviation(runs: &[(usize, u64, SchedulerKind, EvalReport)]) -> Outcome {
    let polling: Vec<_> = runs.iter().filter(|r| matches!(r.2, SchedulerKind::Polling(_))).collect();
    let mut ok = true;
    let mut parts = Vec::new();
    for (level, seed, _, r) in &polling {
        let frac = r.deviation_fraction();
        ok &= frac <= 0.02 && r.collisions == 0;
        parts.push(format!("L{level}/s{seed}: {} of {} deviated, {} collisions", r.deviations, r.vehicles_spawned, r.collisions));
    }
    outcome(ok && polling.len() >= 3, parts.join("; "))
}

fn scheduling_benefit(runs: &[(usize, u64, SchedulerKind, EvalReport)]) -> Outcome {
    let mut better = 0;
    let mut parts = Vec::new();
    let levels: Vec<usize> = {
        let mut l: Vec<usize> = runs.iter().map(|r| r.0).collect();
        l.dedup();
        l
    };
    for level in &levels {
        let mean = |poll: bool| {
            let times: Vec<f64> = runs
                .iter()
                .filter(|r| r.0 == *level && matches!(r.2, SchedulerKind::Polling(_)) == poll)
                .flat_map(|r| r.3.travel_times.iter().copied())
                .collect();
            times.iter().sum::<f64>() / times.len().max(1) as f64
        };
        let (p, f) = (mean(true), mean(false));
        better += usize::from(p <= f);
        parts.push(format!("level {level}: polling {p:.1}s vs fcfs {f:.1}s"));
    }
    outcome(better >= 2, format!("{better}/{} levels; {}", levels.len(), parts.join("; ")))
}

fn schedule_safety() -> Outcome {
    let sim = SimConfig::default();
    let (mut violations, mut independent, mut vehicles) = (0, 0, 0);
    for seed in 0..1000 {
        let inst = random_instance(seed);
        let m = build_transition_matrix(&inst.layout, &sim).expect("valid layout");
        let entries = multi_lane_polling(&inst.vehicles, &m, inst.policy, &inst.history);
        assert_eq!(entries.len(), inst.vehicles.len(), "every vehicle is scheduled");
        vehicles += entries.len();
        violations += verify_schedule(&entries, &m).len();
        independent += common::separation_failures(&entries, &m);
        independent += common::separation_failures(&fcfs_schedule(&inst.vehicles, &m, &inst.history), &m);
    }
    outcome(
        violations == 0 && independent == 0,
        format!("1000 instances, {vehicles} vehicles: {violations} violations reported, {independent} found by pairwise check"),
    )
}

fn convergence() -> Outcome {
    let rate = VisitRate::default();
    let mut ok = true;
    let mut parts = Vec::new();
    for bound in [0.5, 0.9, 0.99] {
        let (d1, d2) = (bound, 0.5 * bound);
        let f = DiscountFn::Aim(DiscountVector { d1, d2 });
        let mut worst_err: f64 = 0.0;
        for m in 0..3 {
            let mdp = MicroMdp::random(4, 2, 100 + m);
            let fixed = common::value_iteration(&mdp, d1, d2);
            let mut q = QTable::zeros(4, 2);
            let mut visits = 0u64;
            let mut err = f64::INFINITY;
            for _ in 0..200_000 {
                for s in 0..4 {
                    for a in 0..2 {
                        let t = TabularTransition {
                            state: s,
                            action: a,
                            reward: mdp.reward[s][a].clone(),
                            next_state: mdp.next[s][a].unwrap_or(s),
                            terminal: mdp.next[s][a].is_none(),
                        };
                        md_q_update_tabular(&mut q, &[t], &[1.0, 1.0], &f, rate.alpha(visits));
                    }
                }
                visits += 1;
                err = common::max_abs_diff(&q, &fixed);
                if err < 1e-6 {
                    break;
                }
            }
            worst_err = worst_err.max(err);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mdp = MicroMdp::random(6, 3, 200);
        let mut worst_ratio: f64 = 0.0;
        for _ in 0..1000 {
            let mut random_q = || QTable { values: (0..6).map(|_| (0..3).map(|_| rng.gen_range(-10.0..10.0)).collect()).collect() };
            let (q1, q2) = (random_q(), random_q());
            let ratio = common::max_abs_diff(&common::backup(&mdp, &q1, d1, d2), &common::backup(&mdp, &q2, d1, d2))
                / common::max_abs_diff(&q1, &q2);
            worst_ratio = worst_ratio.max(ratio);
        }
        ok &= worst_err < 1e-6 && worst_ratio <= bound + 1e-12;
        parts.push(format!("γ′={bound}: error {worst_err:.2e}, ratio {worst_ratio:.12}"));
    }
    outcome(ok, parts.join("; "))
}

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let hidden: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(2..=16)).collect();
        let act = if rng.gen_bool(0.5) { Activation::Relu } else { Activation::Tanh };
        let mut net = Mlp::new(MlpSpec::new(NUM_FEATURES, &hidden, act, rng.gen())).unwrap();
        let params: Vec<f64> = (0..net.num_params()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        net.set_params(&params).unwrap();
        let x: Vec<f64> = (0..NUM_FEATURES).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..NUM_ACTIONS).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let loss = |n: &Mlp| -> f64 { n.forward(&x).unwrap().iter().zip(&target).map(|(y, t)| 0.5 * (y - t) * (y - t)).sum() };
        let mut cache = ForwardCache::default();
        net.forward_cached(&x, &mut cache).unwrap();
        let gout: Vec<f64> = cache.output().iter().zip(&target).map(|(y, t)| y - t).collect();
        let mut grads = net.zero_gradients();
        net.backward(&cache, &gout, &mut grads);
        let analytic = grads.flat();
        let h = 1e-6;
        let mut probe = net.clone();
        for i in 0..params.len() {
            let mut p = params.clone();
            p[i] += h;
            probe.set_params(&p).unwrap();
            let up = loss(&probe);
            p[i] -= 2.0 * h;
            probe.set_params(&p).unwrap();
            let down = loss(&probe);
            let numeric = (up - down) / (2.0 * h);
            let scale = numeric.abs().max(analytic[i].abs());
            if scale > 1e-7 {
                worst = worst.max((numeric - analytic[i]).abs() / scale);
            }
        }
    }
    outcome(worst <= 1e-4, format!("100 nets, worst relative error {worst:.2e}"))
}

fn oracle_exactness() -> Outcome {
    let (mut feasible, mut mismatches, mut seed) = (0, 0, 0);
    while feasible < 50 {
        let inst = tiny_instance(seed);
        seed += 1;
        let dp = dp_optimal_trajectory(&inst.start, inst.t_sched, inst.leader.as_ref(), &inst.cfg);
        let brute = common::enumerate_min_x(&inst);
        feasible += usize::from(brute.is_some());
        mismatches += usize::from(dp.solution().map(|s| s.x_value) != brute);
    }
    outcome(mismatches == 0, format!("{seed} instances, {feasible} feasible, {mismatches} mismatches"))
}

fn reduction_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (states, actions, gamma, lr) = (7, 3, 0.93, 0.1);
    let f = DiscountFn::Constant { gamma };
    let mut md = QTable::zeros(states, actions);
    let mut plain = QTable::zeros(states, actions);
    let mut mismatches = 0;
    let mut transitions = 0;
    let mut state = 0;
    while transitions < 10_000 {
        let n = rng.gen_range(1..=4);
        let mut window = Vec::with_capacity(n);
        for k in 0..n {
            let next = rng.gen_range(0..states);
            window.push(TabularTransition {
                state,
                action: rng.gen_range(0..actions),
                reward: vec![rng.gen_range(-1.0..1.0)],
                next_state: next,
                terminal: k + 1 == n && rng.gen_bool(0.1),
            });
            state = next;
        }
        transitions += n;
        md_q_update_tabular(&mut md, &window, &[gamma], &f, lr);
        let (mut ret, mut discount) = (0.0, 1.0);
        for t in &window {
            ret += discount * t.reward[0];
            discount *= gamma;
        }
        let last = window.last().unwrap();
        let target = if last.terminal { ret } else { ret + discount * plain.max(last.next_state) };
        let cell = &mut plain.values[window[0].state][window[0].action];
        *cell += lr * (target - *cell);
        mismatches += usize::from(md != plain);
    }
    outcome(mismatches == 0, format!("{transitions} transitions, {mismatches} updates differ"))
}

fn latency(measured: Option<(f64, f64)>) -> Outcome {
    match measured {
        Some((net, dp)) => outcome(
            net * 10.0 <= dp,
            format!("net {:.2} µs per action, DP {:.2} ms per solve, ratio {:.0}x", net * 1e6, dp * 1e3, dp / net),
        ),
        None => outcome(false, "no latency samples".into()),
    }
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (5, "schedule safety", schedule_safety()),
        (6, "convergence", convergence()),
        (7, "gradient correctness", gradient_correctness()),
        (8, "oracle exactness", oracle_exactness()),
        (9, "reduction equivalence", reduction_equivalence()),
    ];
    let cfg = base_config();
    let (c1, policy) = multi_discount_superiority(&cfg);
    results.push((1, "multi-discount superiority", c1));
    let policy = policy.expect("seed 0 trains MD-DQN");
    let (c2, measured) = near_optimal(&cfg, &policy);
    results.push((2, "near-optimal trajectories", c2));
    let runs = intersection_runs(&cfg, &policy);
    results.push((3, "zero-deviation safety", zero_deviation(&runs)));
    results.push((4, "scheduling benefit", scheduling_benefit(&runs)));
    results.push((10, "latency", latency(measured)));
    results.sort_by_key(|r| r.0);
    for (id, name, o) in &results {
        println!("criterion {id:2} {} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    if results.iter().all(|r| r.2.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
