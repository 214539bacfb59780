//! Multi-discount Q-learning: tabular updates, the deep variant with replay
//! and a target network, and the contraction/fixed-point machinery used to
//! check convergence on small deterministic problems.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinematics::{derive_seed, Action, NUM_ACTIONS};
use crate::mdp::{make_ve_episode, EpisodeConfig, MdpError, RewardVector, NUM_FEATURES};
use crate::nn::{argmax, ForwardCache, Gradients, Mlp, MlpSpec, NnError, Optimizer, OptimizerKind};

/// Largest number of reward components the generic return helpers accept.
pub const MAX_OBJECTIVES: usize = 8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: u64, loss: f64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Net(#[from] NnError),
    #[error(transparent)]
    Mdp(#[from] MdpError),
}

/// Per-objective discounts: `d1` for trajectory control, `d2` for cruise control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscountVector {
    pub d1: f64,
    pub d2: f64,
}

impl Default for DiscountVector {
    fn default() -> Self {
        Self { d1: 0.9, d2: 1.0 }
    }
}

impl DiscountVector {
    pub fn new(d1: f64, d2: f64) -> Self {
        Self { d1, d2 }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(0.0..=1.0).contains(&self.d1) || !(0.0..=1.0).contains(&self.d2) {
            return Err(TrainError::InvalidConfig(format!("discounts out of [0, 1]: {self:?}")));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.d1, self.d2]
    }
}

/// Reward-dependent discount applied to the bootstrapped value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiscountFn {
    /// `d2` while the cruise reward is non-zero, `d1` otherwise.
    Aim(DiscountVector),
    Constant { gamma: f64 },
}

impl DiscountFn {
    pub fn eval(&self, r: &[f64]) -> f64 {
        match *self {
            DiscountFn::Aim(g) => discount_fn_aim(r.get(1).copied().unwrap_or(0.0), &g),
            DiscountFn::Constant { gamma } => gamma,
        }
    }

    pub fn upper_bound(&self) -> f64 {
        match *self {
            DiscountFn::Aim(g) => g.d1.max(g.d2),
            DiscountFn::Constant { gamma } => gamma,
        }
    }
}

pub fn discount_fn_aim(r2: f64, gammas: &DiscountVector) -> f64 {
    if r2 != 0.0 {
        gammas.d2
    } else {
        gammas.d1
    }
}

/// Discounted window return `Σ_τ Σ_i γ_i^τ r_{τ,i}` and the bootstrap
/// coefficient `Π_τ f(r_τ)`.
pub fn md_partial_return<'a, I, F>(rewards: I, gammas: &[f64], f: F) -> (f64, f64)
where
    I: IntoIterator<Item = &'a [f64]>,
    F: Fn(&[f64]) -> f64,
{
    assert!(gammas.len() <= MAX_OBJECTIVES);
    let mut pow = [1.0; MAX_OBJECTIVES];
    let mut ret = 0.0;
    let mut coef = 1.0;
    for r in rewards {
        for (i, g) in gammas.iter().enumerate() {
            ret += pow[i] * r[i];
            pow[i] *= g;
        }
        coef *= f(r);
    }
    (ret, coef)
}

/// Tabular Q over integer states.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub values: Vec<Vec<f64>>,
}

impl QTable {
    pub fn zeros(states: usize, actions: usize) -> Self {
        Self {
            values: vec![vec![0.0; actions]; states],
        }
    }

    pub fn max(&self, s: usize) -> f64 {
        self.values[s].iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_norm_diff(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .flatten()
            .zip(other.values.iter().flatten())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// One step over integer states with a reward vector of any length.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularTransition {
    pub state: usize,
    pub action: usize,
    pub reward: Vec<f64>,
    pub next_state: usize,
    pub terminal: bool,
}

/// Moves `Q(s_t, a_t)` toward the multi-discount n-step target of `window`.
/// The bootstrap term is dropped when the window ends in a terminal step.
pub fn md_q_update_tabular(q: &mut QTable, window: &[TabularTransition], gammas: &[f64], f: &DiscountFn, lr: f64) {
    let first = &window[0];
    let last = window.last().unwrap();
    let (ret, coef) = md_partial_return(window.iter().map(|t| t.reward.as_slice()), gammas, |r| f.eval(r));
    let target = if last.terminal {
        ret
    } else {
        ret + coef * q.max(last.next_state)
    };
    let cell = &mut q.values[first.state][first.action];
    *cell += lr * (target - *cell);
}

/// Deterministic MDP small enough for exact fixed-point iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct MicroMdp {
    /// `next[s][a]`; `None` ends the episode.
    pub next: Vec<Vec<Option<usize>>>,
    pub reward: Vec<Vec<Vec<f64>>>,
}

impl MicroMdp {
    pub fn num_states(&self) -> usize {
        self.next.len()
    }

    pub fn num_actions(&self) -> usize {
        self.next[0].len()
    }

    /// Two states, two actions; "stay" pays (1, 0), "move" pays (0, 1).
    pub fn two_state_chain() -> Self {
        Self {
            next: vec![vec![Some(0), Some(1)], vec![Some(1), Some(0)]],
            reward: vec![
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            ],
        }
    }

    /// Random deterministic MDP with rewards drawn from a small set that
    /// includes zero cruise rewards, so reward-dependent discounts vary.
    pub fn random(states: usize, actions: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = [-1.0, -0.1, 0.0, 0.0, 0.1, 0.5, 1.0];
        let mut next = Vec::new();
        let mut reward = Vec::new();
        for _ in 0..states {
            let mut ns = Vec::new();
            let mut rs = Vec::new();
            for _ in 0..actions {
                ns.push(if rng.gen_bool(0.1) { None } else { Some(rng.gen_range(0..states)) });
                rs.push(vec![rng.gen_range(-1.0..1.0), levels[rng.gen_range(0..levels.len())]]);
            }
            next.push(ns);
            reward.push(rs);
        }
        Self { next, reward }
    }

    /// `(HQ)(s, a) = Σ_i r_i(s, a) + f(r(s, a))·max_a' Q(s', a')`
    pub fn apply_h(&self, q: &QTable, f: &DiscountFn) -> QTable {
        let mut out = q.clone();
        for s in 0..self.num_states() {
            for a in 0..self.num_actions() {
                let r = &self.reward[s][a];
                let immediate: f64 = r.iter().sum();
                out.values[s][a] = match self.next[s][a] {
                    Some(n) => immediate + f.eval(r) * q.max(n),
                    None => immediate,
                };
            }
        }
        out
    }

    /// Iterates H from zero until successive iterates differ by at most `tol`.
    pub fn solve_fixed_point(&self, f: &DiscountFn, tol: f64) -> QTable {
        let mut q = QTable::zeros(self.num_states(), self.num_actions());
        loop {
            let next = self.apply_h(&q, f);
            let d = next.max_norm_diff(&q);
            q = next;
            if d <= tol {
                return q;
            }
        }
    }
}

/// `α = (1 + visits/scale)^(-exponent)`; exponents in (0.5, 1] satisfy the
/// Robbins–Monro conditions for any positive scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisitRate {
    pub exponent: f64,
    pub scale: f64,
}

impl Default for VisitRate {
    /// Harmonic decay, slowed enough that γ′ = 0.99 converges in
    /// thousands of sweeps rather than millions.
    fn default() -> Self {
        Self {
            exponent: 1.0,
            scale: 1000.0,
        }
    }
}

impl VisitRate {
    pub fn alpha(&self, visits: u64) -> f64 {
        (1.0 + visits as f64 / self.scale).powf(-self.exponent)
    }
}

/// Runs sweeps of one-step tabular multi-discount Q-learning over every
/// state-action pair and returns the max-norm distance to the H fixed point
/// after each sweep. Stops early once the distance is below `tol`.
pub fn fixed_point_convergence_test(
    mdp: &MicroMdp,
    f: &DiscountFn,
    rate: VisitRate,
    max_sweeps: usize,
    tol: f64,
) -> Vec<f64> {
    let q_star = mdp.solve_fixed_point(f, 1e-12);
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let gammas = vec![1.0; mdp.reward[0][0].len()];
    let mut q = QTable::zeros(ns, na);
    let mut visits = vec![vec![0u64; na]; ns];
    let mut errors = Vec::new();
    for _ in 0..max_sweeps {
        for s in 0..ns {
            for a in 0..na {
                let t = TabularTransition {
                    state: s,
                    action: a,
                    reward: mdp.reward[s][a].clone(),
                    next_state: mdp.next[s][a].unwrap_or(s),
                    terminal: mdp.next[s][a].is_none(),
                };
                let lr = rate.alpha(visits[s][a]);
                visits[s][a] += 1;
                md_q_update_tabular(&mut q, std::slice::from_ref(&t), &gammas, f, lr);
            }
        }
        let e = q.max_norm_diff(&q_star);
        errors.push(e);
        if e < tol {
            break;
        }
    }
    errors
}

/// `‖HQ₁ − HQ₂‖∞ / ‖Q₁ − Q₂‖∞`
pub fn contraction_ratio(mdp: &MicroMdp, f: &DiscountFn, q1: &QTable, q2: &QTable) -> f64 {
    let num = mdp.apply_h(q1, f).max_norm_diff(&mdp.apply_h(q2, f));
    let den = q1.max_norm_diff(q2);
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub obs: [f64; NUM_FEATURES],
    pub action: usize,
    pub reward: RewardVector,
    pub next_obs: [f64; NUM_FEATURES],
    pub terminal: bool,
}

/// Up to `n` consecutive transitions starting at `obs`/`action`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub obs: [f64; NUM_FEATURES],
    pub action: usize,
    pub rewards: Vec<RewardVector>,
    pub next_obs: [f64; NUM_FEATURES],
    pub terminal: bool,
}

/// Turns a transition stream into n-step windows. Full windows are emitted
/// as they complete; at episode end the shorter suffix windows follow.
#[derive(Debug, Clone)]
pub struct NStepAccumulator {
    n: usize,
    pending: VecDeque<TransitionRecord>,
}

impl NStepAccumulator {
    pub fn new(n: usize) -> Self {
        Self {
            n: n.max(1),
            pending: VecDeque::new(),
        }
    }

    fn window(&self) -> Window {
        let first = &self.pending[0];
        let last = self.pending.back().unwrap();
        Window {
            obs: first.obs,
            action: first.action,
            rewards: self.pending.iter().map(|t| t.reward).collect(),
            next_obs: last.next_obs,
            terminal: last.terminal,
        }
    }

    pub fn push(&mut self, t: TransitionRecord) -> Vec<Window> {
        let terminal = t.terminal;
        self.pending.push_back(t);
        let mut out = Vec::new();
        if terminal {
            while !self.pending.is_empty() {
                out.push(self.window());
                self.pending.pop_front();
            }
        } else if self.pending.len() == self.n {
            out.push(self.window());
            self.pending.pop_front();
        }
        out
    }
}

/// How a network's regression target is formed from a window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetRule {
    /// Per-objective discounts and the reward-dependent bootstrap discount.
    MultiDiscount { gammas: DiscountVector },
    /// Scalarized reward `r1 + r2` with one discount.
    Fixed { gamma: f64 },
    /// A single reward component (0: trajectory, 1: cruise) with one discount.
    Component { index: usize, gamma: f64 },
}

impl TargetRule {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = match *self {
            TargetRule::MultiDiscount { gammas } => return gammas.validate(),
            TargetRule::Fixed { gamma } => (0.0..=1.0).contains(&gamma),
            TargetRule::Component { index, gamma } => index < 2 && (0.0..=1.0).contains(&gamma),
        };
        if ok {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig(format!("bad target rule {self:?}")))
        }
    }

    /// Window return and bootstrap coefficient.
    pub fn window_return(&self, rewards: &[RewardVector]) -> (f64, f64) {
        match *self {
            TargetRule::MultiDiscount { gammas } => {
                let f = DiscountFn::Aim(gammas);
                let rs: Vec<[f64; 2]> = rewards.iter().map(RewardVector::as_array).collect();
                md_partial_return(rs.iter().map(|r| r.as_slice()), &gammas.as_array(), |r| f.eval(r))
            }
            TargetRule::Fixed { gamma } => {
                let rs: Vec<[f64; 2]> = rewards.iter().map(RewardVector::as_array).collect();
                md_partial_return(rs.iter().map(|r| r.as_slice()), &[gamma, gamma], |_| gamma)
            }
            TargetRule::Component { index, gamma } => {
                let rs: Vec<[f64; 1]> = rewards.iter().map(|r| [r.as_array()[index]]).collect();
                md_partial_return(rs.iter().map(|r| r.as_slice()), &[gamma], |_| gamma)
            }
        }
    }
}

/// `y = Σ_τ Σ_i γ_i^τ r_{τ,i} + Π_τ f(r_τ)·max_a' Q(s_{t+n}, a'; θ⁻)`,
/// bootstrap omitted for terminal windows.
pub fn md_dqn_target(window: &Window, target: &Mlp, rule: &TargetRule) -> Result<f64, NnError> {
    let (ret, coef) = rule.window_return(&window.rewards);
    if window.terminal {
        return Ok(ret);
    }
    let q = target.forward(&window.next_obs)?;
    Ok(ret + coef * q.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

pub fn md_dqn_targets(batch: &[&Window], target: &Mlp, rule: &TargetRule) -> Result<Vec<f64>, NnError> {
    batch.iter().map(|w| md_dqn_target(w, target, rule)).collect()
}

/// Fixed-capacity ring buffer with seeded uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: Vec<T>,
    next: usize,
    rng: ChaCha8Rng,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize, seed: u64) -> Self {
        Self {
            capacity: capacity.max(1),
            items: Vec::new(),
            next: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.next] = item;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Draws `n` items uniformly with replacement.
    pub fn sample(&mut self, n: usize) -> Vec<&T> {
        let idx: Vec<usize> = (0..n).map(|_| self.rng.gen_range(0..self.items.len())).collect();
        idx.into_iter().map(|i| &self.items[i]).collect()
    }
}

/// Linear ε from `start` to `end` over `anneal_steps`, then held at `end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_steps: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            start: 1.0,
            end: 0.0,
            anneal_steps: 120_000,
        }
    }
}

impl EpsilonSchedule {
    pub fn at(&self, step: u64) -> f64 {
        if self.anneal_steps == 0 || step >= self.anneal_steps {
            return self.end;
        }
        self.start + (self.end - self.start) * (step as f64 / self.anneal_steps as f64)
    }
}

/// Uniform action with probability ε, else the greedy one (lowest index on ties).
pub fn epsilon_greedy<R: Rng + ?Sized>(values: &[f64], epsilon: f64, rng: &mut R) -> usize {
    if rng.gen::<f64>() < epsilon {
        rng.gen_range(0..values.len())
    } else {
        argmax(values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n_step: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub epsilon: EpsilonSchedule,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub target_sync: u64,
    pub max_steps: u64,
    /// Environment steps between gradient updates.
    pub train_every: u64,
    /// Updates start once the replay holds this many windows.
    pub warmup: usize,
    /// Simulation steps each chosen action is held for.
    pub action_repeat: usize,
    /// A random exploratory action is held for a uniform 1..=this many
    /// decisions; 1 is plain ε-greedy.
    pub explore_hold: usize,
    /// Chance, scaled by the current ε, that a whole episode is driven by
    /// the gap-capped schedule-tracking heuristic instead of the learner.
    pub guide_fraction: f64,
    /// Huber loss with this threshold instead of squared error.
    pub huber_delta: Option<f64>,
    pub net: MlpSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_step: 1,
            lr: 1e-5,
            optimizer: OptimizerKind::Sgd,
            epsilon: EpsilonSchedule::default(),
            replay_capacity: 100_000,
            batch_size: 64,
            target_sync: 1000,
            max_steps: 360_000,
            train_every: 1,
            warmup: 64,
            action_repeat: 1,
            explore_hold: 1,
            guide_fraction: 0.0,
            huber_delta: None,
            net: MlpSpec::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.n_step == 0 {
            return bad("n_step must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.epsilon.start) || !(0.0..=1.0).contains(&self.epsilon.end) {
            return bad("epsilon must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.replay_capacity == 0 || self.train_every == 0 || self.target_sync == 0 {
            return bad("batch_size, replay_capacity, train_every and target_sync must be positive");
        }
        if !(0.0..=1.0).contains(&self.guide_fraction) {
            return bad("guide_fraction must lie in [0, 1]");
        }
        if self.huber_delta.is_some_and(|d| !(d > 0.0)) {
            return bad("huber_delta must be positive");
        }
        if !(self.lr >= 0.0) {
            return bad("lr must be non-negative");
        }
        self.net.validate()?;
        Ok(())
    }
}

/// Online network, frozen target network and optimizer for one target rule.
#[derive(Debug, Clone)]
pub struct DqnLearner {
    pub online: Mlp,
    pub target: Mlp,
    pub rule: TargetRule,
    pub huber_delta: Option<f64>,
    optimizer: Optimizer,
    grads: Gradients,
    cache: ForwardCache,
}

impl DqnLearner {
    pub fn new(spec: MlpSpec, rule: TargetRule, optimizer: OptimizerKind, lr: f64) -> Result<Self, TrainError> {
        rule.validate()?;
        let online = Mlp::new(spec)?;
        let target = online.clone();
        let grads = online.zero_gradients();
        Ok(Self {
            online,
            target,
            rule,
            huber_delta: None,
            optimizer: Optimizer::new(optimizer, lr),
            grads,
            cache: ForwardCache::default(),
        })
    }

    pub fn with_huber(mut self, delta: Option<f64>) -> Self {
        self.huber_delta = delta;
        self
    }

    /// One gradient step on the mean TD loss (squared or Huber); returns the loss.
    pub fn learn(&mut self, batch: &[&Window]) -> Result<f64, NnError> {
        let targets = md_dqn_targets(batch, &self.target, &self.rule)?;
        self.grads.zero();
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut gout = [0.0; NUM_ACTIONS];
        for (w, y) in batch.iter().zip(&targets) {
            self.online.forward_cached(&w.obs, &mut self.cache)?;
            let q = self.cache.output()[w.action];
            let err = q - y;
            let (l, g) = match self.huber_delta {
                Some(d) if err.abs() > d => (d * (err.abs() - 0.5 * d), d * err.signum()),
                Some(_) => (0.5 * err * err, err),
                None => (err * err, 2.0 * err),
            };
            loss += l * scale;
            gout.fill(0.0);
            gout[w.action] = g * scale;
            self.online.backward(&self.cache, &gout, &mut self.grads);
        }
        if loss.is_finite() {
            self.optimizer.step(&mut self.online, &self.grads);
        }
        Ok(loss)
    }

    pub fn sync(&mut self) {
        self.online.sync_target(&mut self.target).expect("online and target share a spec");
    }
}

/// A value-based agent that the generic training loop can drive.
pub trait Learner {
    fn greedy(&self, obs: &[f64; NUM_FEATURES]) -> Result<usize, NnError>;
    fn learn(&mut self, batch: &[&Window]) -> Result<f64, NnError>;
    fn sync_targets(&mut self);
}

impl Learner for DqnLearner {
    fn greedy(&self, obs: &[f64; NUM_FEATURES]) -> Result<usize, NnError> {
        Ok(argmax(&self.online.forward(obs)?))
    }

    fn learn(&mut self, batch: &[&Window]) -> Result<f64, NnError> {
        DqnLearner::learn(self, batch)
    }

    fn sync_targets(&mut self) {
        self.sync();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: u64,
    /// Cumulative environment steps when the episode ended.
    pub steps: u64,
    pub total_reward: f64,
    pub r1_end: f64,
    pub r2_sum: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub episodes: Vec<EpisodeLog>,
}

impl TrainLog {
    /// Mean total reward over the final `fraction` of episodes (at least one).
    pub fn final_mean_total(&self, fraction: f64) -> f64 {
        let n = self.episodes.len();
        if n == 0 {
            return f64::NAN;
        }
        let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
        self.episodes[n - k..].iter().map(|e| e.total_reward).sum::<f64>() / k as f64
    }
}

/// Drives `learner` on freshly sampled two-vehicle episodes for
/// `cfg.max_steps` environment steps. Episode `i` uses seed
/// `derive_seed(cfg.seed, i)`, so agents trained with the same seed see the
/// same sequence of scenarios.
pub fn train<L: Learner>(learner: &mut L, episodes: &EpisodeConfig, cfg: &TrainConfig) -> Result<TrainLog, TrainError> {
    cfg.validate()?;
    let sim = episodes.sim;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::MAX));
    let mut replay = ReplayBuffer::new(cfg.replay_capacity, derive_seed(cfg.seed, u64::MAX - 1));
    let mut log = TrainLog::default();
    let mut step = 0u64;
    let mut episode_idx = 0u64;
    while step < cfg.max_steps {
        let mut env = make_ve_episode(derive_seed(cfg.seed, episode_idx), episodes);
        let mut acc = NStepAccumulator::new(cfg.n_step);
        let mut obs = env.observation().normalized(&sim);
        let (mut total, mut r2_sum, mut r1_end) = (0.0, 0.0, 0.0);
        let mut action = 0;
        let mut held = 0;
        let guided = cfg.guide_fraction > 0.0 && rng.gen::<f64>() < cfg.guide_fraction * cfg.epsilon.at(step);
        for k in 0.. {
            if guided {
                action = crate::baselines::safe_heuristic_action(&env.observation(), &sim).index();
            } else if k % cfg.action_repeat.max(1) == 0 {
                if held > 0 {
                    held -= 1;
                } else if rng.gen::<f64>() < cfg.epsilon.at(step) {
                    action = rng.gen_range(0..NUM_ACTIONS);
                    held = rng.gen_range(0..cfg.explore_hold.max(1));
                } else {
                    action = learner.greedy(&obs)?;
                }
            }
            let res = env.transition(Action::from_index(action).unwrap())?;
            let next_obs = res.obs.normalized(&sim);
            total += res.reward.total();
            r2_sum += res.reward.r2;
            if let Some(o) = &res.outcome {
                r1_end = crate::mdp::terminal_reward_r1(o);
            }
            for w in acc.push(TransitionRecord {
                obs,
                action,
                reward: res.reward,
                next_obs,
                terminal: res.terminal,
            }) {
                replay.push(w);
            }
            obs = next_obs;
            step += 1;
            if replay.len() >= cfg.warmup.max(1) && step % cfg.train_every == 0 {
                let batch = replay.sample(cfg.batch_size);
                let loss = learner.learn(&batch)?;
                if !loss.is_finite() {
                    return Err(TrainError::Divergence { step, loss });
                }
            }
            if step % cfg.target_sync == 0 {
                learner.sync_targets();
            }
            if res.terminal || step >= cfg.max_steps {
                break;
            }
        }
        if env.is_done() {
            log.episodes.push(EpisodeLog {
                episode: episode_idx,
                steps: step,
                total_reward: total,
                r1_end,
                r2_sum,
                epsilon: cfg.epsilon.at(step),
            });
        }
        episode_idx += 1;
    }
    Ok(log)
}

/// A trained single-network agent and its training curve.
#[derive(Debug, Clone)]
pub struct TrainedAgent {
    pub net: Mlp,
    pub log: TrainLog,
}

pub fn train_with_rule(episodes: &EpisodeConfig, cfg: &TrainConfig, rule: TargetRule) -> Result<TrainedAgent, TrainError> {
    let mut learner = DqnLearner::new(cfg.net.clone(), rule, cfg.optimizer, cfg.lr)?.with_huber(cfg.huber_delta);
    let log = train(&mut learner, episodes, cfg)?;
    Ok(TrainedAgent {
        net: learner.online,
        log,
    })
}

pub fn train_md_dqn(episodes: &EpisodeConfig, cfg: &TrainConfig, gammas: DiscountVector) -> Result<TrainedAgent, TrainError> {
    train_with_rule(episodes, cfg, TargetRule::MultiDiscount { gammas })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rv(r1: f64, r2: f64) -> RewardVector {
        RewardVector::new(r1, r2)
    }

    #[test]
    fn aim_discount_examples() {
        let g = DiscountVector::default();
        let f = DiscountFn::Aim(g);
        assert_eq!(f.eval(&[-0.5, 0.0]), 0.9);
        assert_eq!(f.eval(&[-0.5, 0.1]), 1.0);
        assert_eq!(f.eval(&[0.0, -400.0]), 1.0);
    }

    #[test]
    fn tabular_update_examples() {
        let f = DiscountFn::Aim(DiscountVector::default());
        let g = [0.9, 1.0];
        let t = |s, r: Vec<f64>, ns, terminal| TabularTransition {
            state: s,
            action: 0,
            reward: r,
            next_state: ns,
            terminal,
        };

        let mut q = QTable::zeros(2, 2);
        md_q_update_tabular(&mut q, &[t(0, vec![1.0, 0.1], 1, true)], &g, &f, 0.5);
        assert_relative_eq!(q.values[0][0], 0.55, epsilon = 1e-15);

        let mut q = QTable::zeros(2, 2);
        q.values[1] = vec![2.0, -1.0];
        md_q_update_tabular(&mut q, &[t(0, vec![0.0, 0.0], 1, false)], &g, &f, 1.0);
        assert_relative_eq!(q.values[0][0], 1.8, epsilon = 1e-15);

        let mut q = QTable::zeros(3, 2);
        md_q_update_tabular(
            &mut q,
            &[t(0, vec![1.0, 0.0], 1, false), t(1, vec![1.0, 0.0], 2, true)],
            &g,
            &f,
            1.0,
        );
        assert_relative_eq!(q.values[0][0], 1.9, epsilon = 1e-15);
    }

    #[test]
    fn dqn_target_examples() {
        let mut net = Mlp::new(MlpSpec::default()).unwrap();
        net.zero_output_layer();
        let rule = TargetRule::MultiDiscount {
            gammas: DiscountVector::default(),
        };
        let w = Window {
            obs: [0.0; 6],
            action: 0,
            rewards: vec![rv(-10.0, 0.0)],
            next_obs: [0.0; 6],
            terminal: true,
        };
        assert_eq!(md_dqn_target(&w, &net, &rule).unwrap(), -10.0);

        let last = net.layers().len() - 1;
        let mut p = net.params();
        let n = p.len();
        // output biases are the final three parameters
        p[n - 3..].copy_from_slice(&[1.0, 3.0, 2.0]);
        net.set_params(&p).unwrap();
        assert_eq!(net.layers()[last].biases, vec![1.0, 3.0, 2.0]);
        let w = Window {
            rewards: vec![rv(-0.5, 0.1)],
            terminal: false,
            ..w
        };
        assert_relative_eq!(md_dqn_target(&w, &net, &rule).unwrap(), 2.6, epsilon = 1e-12);
        let batch = vec![&w, &w];
        assert_eq!(md_dqn_targets(&batch, &net, &rule).unwrap(), vec![md_dqn_target(&w, &net, &rule).unwrap(); 2]);
    }

    #[test]
    fn fixed_rule_is_constant_discount_multi_rule() {
        let rewards = [rv(-0.3, 0.1), rv(-0.2, 0.0), rv(-0.1, -0.1)];
        for gamma in [0.0, 0.9, 1.0] {
            let fixed = TargetRule::Fixed { gamma }.window_return(&rewards);
            let rs: Vec<[f64; 2]> = rewards.iter().map(|r| r.as_array()).collect();
            let md = md_partial_return(rs.iter().map(|r| r.as_slice()), &[gamma, gamma], |r| {
                DiscountFn::Constant { gamma }.eval(r)
            });
            assert_eq!(fixed, md);
        }
        let (ret, coef) = TargetRule::Fixed { gamma: 0.0 }.window_return(&rewards[..1]);
        assert_eq!((ret, coef), (-0.3 + 0.1, 0.0));
    }

    #[test]
    fn component_rule_uses_one_reward() {
        let rewards = [rv(-0.3, 0.1), rv(-0.2, -0.1)];
        let (r, c) = TargetRule::Component { index: 1, gamma: 0.9 }.window_return(&rewards);
        assert_relative_eq!(r, 0.1 + 0.9 * -0.1, epsilon = 1e-15);
        assert_relative_eq!(c, 0.81, epsilon = 1e-15);
        let (r, _) = TargetRule::Component { index: 0, gamma: 1.0 }.window_return(&rewards);
        assert_relative_eq!(r, -0.5, epsilon = 1e-15);
    }

    #[test]
    fn n_step_windows() {
        let rec = |i: usize, terminal| TransitionRecord {
            obs: [i as f64; 6],
            action: i % 3,
            reward: rv(i as f64, 0.0),
            next_obs: [(i + 1) as f64; 6],
            terminal,
        };
        let mut acc = NStepAccumulator::new(3);
        assert!(acc.push(rec(0, false)).is_empty());
        assert!(acc.push(rec(1, false)).is_empty());
        let w = acc.push(rec(2, false));
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].rewards.len(), 3);
        assert_eq!(w[0].next_obs, [3.0; 6]);
        let tail = acc.push(rec(3, true));
        assert_eq!(tail.len(), 3);
        assert_eq!(tail.iter().map(|w| w.rewards.len()).collect::<Vec<_>>(), vec![3, 2, 1]);
        assert!(tail.iter().all(|w| w.terminal));
        assert_eq!(tail[0].obs, [1.0; 6]);
    }

    #[test]
    fn epsilon_schedule_endpoints() {
        let s = EpsilonSchedule::default();
        assert_eq!(s.at(0), 1.0);
        assert_eq!(s.at(60_000), 0.5);
        assert_eq!(s.at(120_000), 0.0);
        assert_eq!(s.at(500_000), 0.0);
    }

    #[test]
    fn epsilon_greedy_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(epsilon_greedy(&[1.0, 5.0, 2.0], 0.0, &mut rng), 1);
        assert_eq!(epsilon_greedy(&[2.0, 2.0, 0.0], 0.0, &mut rng), 0);
        let n = 30_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[epsilon_greedy(&[0.0, 9.0, 0.0], 1.0, &mut rng)] += 1;
        }
        // binomial(n, 1/3): 4 standard deviations
        let sd = (n as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 / 3.0).abs() < 4.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn replay_is_bounded_and_seeded() {
        let mut a = ReplayBuffer::new(5, 1);
        let mut b = ReplayBuffer::new(5, 1);
        for i in 0..12 {
            a.push(i);
            b.push(i);
        }
        assert_eq!(a.len(), 5);
        let sa: Vec<i32> = a.sample(20).into_iter().copied().collect();
        let sb: Vec<i32> = b.sample(20).into_iter().copied().collect();
        assert_eq!(sa, sb);
        assert!(sa.iter().all(|v| (7..12).contains(v)));
    }

    #[test]
    fn target_net_frozen_between_syncs() {
        let cfg = TrainConfig {
            optimizer: OptimizerKind::adam(),
            lr: 1e-2,
            ..Default::default()
        };
        let rule = TargetRule::MultiDiscount {
            gammas: DiscountVector::default(),
        };
        let mut learner = DqnLearner::new(cfg.net.clone(), rule, cfg.optimizer, cfg.lr).unwrap();
        let windows: Vec<Window> = (0..8)
            .map(|i| Window {
                obs: [i as f64 / 8.0; 6],
                action: i % 3,
                rewards: vec![rv(-0.5, if i % 2 == 0 { 0.1 } else { 0.0 })],
                next_obs: [(i + 1) as f64 / 8.0; 6],
                terminal: false,
            })
            .collect();
        let batch: Vec<&Window> = windows.iter().collect();
        let before = md_dqn_targets(&batch, &learner.target, &rule).unwrap();
        let online_before = learner.online.params();
        for _ in 0..5 {
            learner.learn(&batch).unwrap();
        }
        assert_ne!(learner.online.params(), online_before);
        assert_eq!(md_dqn_targets(&batch, &learner.target, &rule).unwrap(), before);
        learner.sync();
        assert_ne!(md_dqn_targets(&batch, &learner.target, &rule).unwrap(), before);
    }

    fn smoke_cfg(steps: u64) -> TrainConfig {
        TrainConfig {
            max_steps: steps,
            net: MlpSpec::new(6, &[16], crate::nn::Activation::Relu, 1),
            epsilon: EpsilonSchedule {
                anneal_steps: steps,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let cfg = TrainConfig {
            lr: 0.0,
            ..smoke_cfg(2000)
        };
        let agent = train_md_dqn(&EpisodeConfig::default(), &cfg, DiscountVector::default()).unwrap();
        assert_eq!(agent.net.params(), Mlp::new(cfg.net.clone()).unwrap().params());
        assert!(!agent.log.episodes.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = smoke_cfg(3000);
        let a = train_md_dqn(&EpisodeConfig::default(), &cfg, DiscountVector::default()).unwrap();
        let b = train_md_dqn(&EpisodeConfig::default(), &cfg, DiscountVector::default()).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.net, b.net);
        for e in &a.log.episodes {
            assert!(e.r1_end == -10.0 || e.r1_end >= 10.0);
            assert!((0.0..=1.0).contains(&e.epsilon));
        }
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = TrainConfig {
            lr: 1e6,
            ..smoke_cfg(3000)
        };
        let res = train_md_dqn(&EpisodeConfig::default(), &cfg, DiscountVector::default());
        assert!(matches!(res, Err(TrainError::Divergence { .. })), "{res:?}");
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = TrainConfig {
            n_step: 0,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(TrainError::InvalidConfig(_))));
        assert!(TargetRule::Fixed { gamma: 1.5 }.validate().is_err());
    }

    #[test]
    fn myopic_fixed_point_is_immediate_reward() {
        let mdp = MicroMdp::random(6, 3, 4);
        let q = mdp.solve_fixed_point(&DiscountFn::Constant { gamma: 0.0 }, 1e-12);
        for s in 0..6 {
            for a in 0..3 {
                assert_eq!(q.values[s][a], mdp.reward[s][a].iter().sum::<f64>());
            }
        }
    }

    #[test]
    fn constant_discount_matches_value_iteration() {
        // scalar reward: the second component is always zero
        let mut mdp = MicroMdp::random(5, 2, 8);
        for rs in &mut mdp.reward {
            for r in rs {
                r[1] = 0.0;
            }
        }
        let gamma = 0.8;
        let q = mdp.solve_fixed_point(&DiscountFn::Constant { gamma }, 1e-13);
        // classic value iteration on V
        let mut v = vec![0.0f64; 5];
        for _ in 0..400 {
            v = (0..5)
                .map(|s| {
                    (0..2)
                        .map(|a| {
                            let r = mdp.reward[s][a][0];
                            match mdp.next[s][a] {
                                Some(n) => r + gamma * v[n],
                                None => r,
                            }
                        })
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
        }
        for s in 0..5 {
            assert_relative_eq!(q.max(s), v[s], epsilon = 1e-10);
        }
    }

    #[test]
    fn two_state_chain_converges() {
        let mdp = MicroMdp::two_state_chain();
        let f = DiscountFn::Aim(DiscountVector::new(0.9, 0.9));
        let errs = fixed_point_convergence_test(&mdp, &f, VisitRate::default(), 100_000, 1e-6);
        assert!(*errs.last().unwrap() < 1e-6, "{}", errs.last().unwrap());
        let harmonic = VisitRate { exponent: 1.0, scale: 1.0 };
        assert_eq!((harmonic.alpha(0), harmonic.alpha(1), harmonic.alpha(3)), (1.0, 0.5, 0.25));
    }

    #[test]
    fn random_micro_mdps_converge_for_each_bound() {
        for (i, g) in [0.5, 0.9, 0.99].into_iter().enumerate() {
            let mdp = MicroMdp::random(4, 2, i as u64);
            let f = DiscountFn::Aim(DiscountVector::new(g, g * 0.5));
            let errs = fixed_point_convergence_test(&mdp, &f, VisitRate::default(), 100_000, 1e-6);
            assert!(*errs.last().unwrap() < 1e-6, "γ′ {g}: {} after {} sweeps", errs.last().unwrap(), errs.len());
        }
    }
}
