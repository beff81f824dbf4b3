//! Simulated environment pairs with a controllable dynamics shift.
//!
//! Every pair has an offline member (the dynamics the logged dataset came
//! from) and an online member (the dynamics the agent interacts with). All
//! environments use the action box `[-1, 1]^k`; the patrol simulator maps that
//! box onto budgeted patrol effort internally.
//!
//! Environments are stateless value objects: the caller owns the state vector
//! and the step counter, `step` only applies the transition kernel.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One environment step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    /// True MDP termination; bootstrapping stops here.
    pub terminal: bool,
}

fn check_action(action: &[f64], dim: usize) -> Result<()> {
    if action.len() != dim {
        return Err(Error::shape(format!(
            "action has length {}, expected {dim}",
            action.len()
        )));
    }
    if action.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("action".into()));
    }
    Ok(())
}

fn check_state(state: &[f64], dim: usize) -> Result<()> {
    if state.len() != dim {
        return Err(Error::shape(format!(
            "state has length {}, expected {dim}",
            state.len()
        )));
    }
    if state.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("state".into()));
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// Linear-Gaussian dynamics

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ShiftRegion {
    Everywhere,
    /// The shift applies only where `s[axis] > 0`.
    PositiveHalf {
        axis: usize,
    },
}

/// `s' = A s + B a + δ(s) + σ ε`, with `s` drawn uniformly from the box
/// `[-1, 1]^d` at every reset.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLinearEnv {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub noise: f64,
    pub shift: Vec<f64>,
    pub region: ShiftRegion,
    pub horizon: usize,
    pub reward_bound: f64,
}

impl GaussianLinearEnv {
    pub fn shift_at(&self, state: &[f64]) -> Vec<f64> {
        let active = match self.region {
            ShiftRegion::Everywhere => true,
            ShiftRegion::PositiveHalf { axis } => state[axis] > 0.0,
        };
        if active {
            self.shift.clone()
        } else {
            vec![0.0; self.shift.len()]
        }
    }

    /// Conditional mean `A s + B a + δ(s)`.
    pub fn mean(&self, state: &[f64], action: &[f64]) -> Vec<f64> {
        let s = Array1::from(state.to_vec());
        let a = Array1::from(action.to_vec());
        let mut m = self.a.dot(&s) + self.b.dot(&a);
        for (mi, d) in m.iter_mut().zip(self.shift_at(state)) {
            *mi += d;
        }
        m.to_vec()
    }

    fn step<R: Rng + ?Sized>(&self, state: &[f64], action: &[f64], rng: &mut R) -> StepOutcome {
        let next: Vec<f64> = self
            .mean(state, action)
            .into_iter()
            .map(|m| m + self.noise * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let reward = -norm(&next).min(self.reward_bound);
        StepOutcome {
            next_state: next,
            reward,
            terminal: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLinearPair {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub sigma_off: f64,
    pub sigma_on: f64,
    pub shift: Vec<f64>,
    pub region: ShiftRegion,
    pub horizon: usize,
}

impl GaussianLinearPair {
    /// `A = a_scale · I`, `B = b_scale · I` with `a_dim = s_dim`.
    pub fn isotropic(
        dim: usize,
        a_scale: f64,
        b_scale: f64,
        sigma_off: f64,
        sigma_on: f64,
        shift: Vec<f64>,
        region: ShiftRegion,
    ) -> Result<Self> {
        if shift.len() != dim {
            return Err(Error::shape("shift vector length must equal the state dimension"));
        }
        if !(sigma_off > 0.0 && sigma_on > 0.0) {
            return Err(Error::invalid("noise scales must be positive"));
        }
        if let ShiftRegion::PositiveHalf { axis } = region {
            if axis >= dim {
                return Err(Error::invalid("shift region axis out of range"));
            }
        }
        Ok(GaussianLinearPair {
            a: Array2::eye(dim) * a_scale,
            b: Array2::eye(dim) * b_scale,
            sigma_off,
            sigma_on,
            shift,
            region,
            horizon: 1,
        })
    }

    fn member(&self, noise: f64, shift: Vec<f64>) -> GaussianLinearEnv {
        GaussianLinearEnv {
            a: self.a.clone(),
            b: self.b.clone(),
            noise,
            shift,
            region: self.region,
            horizon: self.horizon,
            reward_bound: 10.0,
        }
    }

    pub fn offline(&self) -> GaussianLinearEnv {
        self.member(self.sigma_off, vec![0.0; self.shift.len()])
    }

    pub fn online(&self) -> GaussianLinearEnv {
        self.member(self.sigma_on, self.shift.clone())
    }

    /// Exact W₂ between `N(m, σ_off² I)` and `N(m + δ(s), σ_on² I)`:
    /// `sqrt(‖δ(s)‖² + d (σ_off − σ_on)²)`.
    pub fn analytic_conditional_w2(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        let d = self.a.nrows();
        check_state(state, d)?;
        check_action(action, self.b.ncols())?;
        let shift = self.online().shift_at(state);
        let mean_part: f64 = shift.iter().map(|x| x * x).sum();
        let spread = self.sigma_off - self.sigma_on;
        Ok((mean_part + d as f64 * spread * spread).sqrt())
    }

    /// Whether the online member's shift is active at `state`.
    pub fn in_shifted_region(&self, state: &[f64]) -> bool {
        match self.region {
            ShiftRegion::Everywhere => self.shift.iter().any(|&d| d != 0.0),
            ShiftRegion::PositiveHalf { axis } => state[axis] > 0.0,
        }
    }
}

// ---------------------------------------------------------------------------
// 2-D point mass

/// State `(px, py, vx, vy)`, action = acceleration in `[-1, 1]²`.
///
/// `vel' = (1 − f) vel + a dt`, `pos' = clamp(pos + vel' dt, ±wall)`,
/// reward `−‖pos' − goal‖`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMassEnv {
    pub dt: f64,
    pub friction: f64,
    /// Kinematic shift: `(axis, limit)` clamps that action component to `±limit`.
    pub action_limit: Option<(usize, f64)>,
    pub goal: [f64; 2],
    pub horizon: usize,
    pub start_half_width: f64,
    pub wall: f64,
}

impl PointMassEnv {
    pub fn effective_action(&self, action: &[f64]) -> [f64; 2] {
        let mut a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
        if let Some((axis, limit)) = self.action_limit {
            a[axis] = a[axis].clamp(-limit, limit);
        }
        a
    }

    /// Deterministic transition, exposed so datasets can be checked against it.
    pub fn dynamics(&self, state: &[f64], action: &[f64]) -> (Vec<f64>, f64) {
        let a = self.effective_action(action);
        let mut next = vec![0.0; 4];
        for axis in 0..2 {
            let vel = (1.0 - self.friction) * state[2 + axis] + a[axis] * self.dt;
            let pos = (state[axis] + vel * self.dt).clamp(-self.wall, self.wall);
            next[axis] = pos;
            next[2 + axis] = vel;
        }
        let reward = -((next[0] - self.goal[0]).powi(2) + (next[1] - self.goal[1]).powi(2)).sqrt();
        (next, reward)
    }

    pub fn reward_bound(&self) -> f64 {
        let dx = self.wall + self.goal[0].abs();
        let dy = self.wall + self.goal[1].abs();
        (dx * dx + dy * dy).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PointMassShift {
    Friction {
        offline: f64,
        online: f64,
    },
    /// Online member clamps one action axis.
    Kinematic {
        friction: f64,
        axis: usize,
        limit: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointMassPair {
    pub shift: PointMassShift,
    pub dt: f64,
    pub horizon: usize,
}

impl PointMassPair {
    pub fn friction(offline: f64, online: f64) -> Self {
        PointMassPair {
            shift: PointMassShift::Friction { offline, online },
            dt: 0.1,
            horizon: 100,
        }
    }

    fn base(&self, friction: f64) -> PointMassEnv {
        PointMassEnv {
            dt: self.dt,
            friction,
            action_limit: None,
            goal: [0.0, 0.0],
            horizon: self.horizon,
            start_half_width: 1.0,
            wall: 2.0,
        }
    }

    pub fn offline(&self) -> PointMassEnv {
        match self.shift {
            PointMassShift::Friction { offline, .. } => self.base(offline),
            PointMassShift::Kinematic { friction, .. } => self.base(friction),
        }
    }

    pub fn online(&self) -> PointMassEnv {
        match self.shift {
            PointMassShift::Friction { online, .. } => self.base(online),
            PointMassShift::Kinematic { friction, axis, limit } => PointMassEnv {
                action_limit: Some((axis, limit)),
                ..self.base(friction)
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Green-security patrol simulator

/// Wildlife is stored on a 2⁻²⁴ grid so per-step wildlife differences sum
/// exactly to the episode's net change.
const WILDLIFE_QUANTUM: f64 = 1.0 / 16_777_216.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatrolParams {
    pub grid_side: usize,
    pub budget: f64,
    pub deterrence: f64,
    pub displacement: f64,
    pub growth: f64,
    pub loss_rate: f64,
    pub initial_wildlife: f64,
    pub horizon: usize,
}

impl Default for PatrolParams {
    fn default() -> Self {
        PatrolParams {
            grid_side: 5,
            budget: 5.0,
            deterrence: -2.0,
            displacement: 0.5,
            growth: 1.02,
            loss_rate: 0.5,
            initial_wildlife: 1.0,
            horizon: 20,
        }
    }
}

/// State layout: `[a_{t-1} (N), w_{t-1} (N), t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatrolEnv {
    pub params: PatrolParams,
    pub attractiveness: Vec<f64>,
    neighbors: Vec<Vec<usize>>,
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl PatrolEnv {
    pub fn new(params: PatrolParams, attractiveness: Vec<f64>) -> Result<Self> {
        let side = params.grid_side;
        let n = side * side;
        if attractiveness.len() != n {
            return Err(Error::shape("attractiveness length must equal the cell count"));
        }
        if !(params.deterrence < 0.0 && params.displacement > 0.0 && params.growth > 1.0 && params.loss_rate > 0.0) {
            return Err(Error::invalid(
                "patrol requires deterrence < 0, displacement > 0, growth > 1, loss rate > 0",
            ));
        }
        let neighbors = (0..n)
            .map(|i| {
                let (r, c) = (i / side, i % side);
                let mut v = Vec::with_capacity(4);
                if r > 0 {
                    v.push(i - side);
                }
                if r + 1 < side {
                    v.push(i + side);
                }
                if c > 0 {
                    v.push(i - 1);
                }
                if c + 1 < side {
                    v.push(i + 1);
                }
                v
            })
            .collect();
        Ok(PatrolEnv {
            params,
            attractiveness,
            neighbors,
        })
    }

    pub fn cells(&self) -> usize {
        self.attractiveness.len()
    }

    pub fn initial_state(&self) -> Vec<f64> {
        let n = self.cells();
        let mut s = vec![0.0; 2 * n + 1];
        s[n..2 * n].fill(quantize(self.params.initial_wildlife));
        s
    }

    /// Maps a `[-1, 1]^N` action to effort in `[0, 1]^N` with `Σ ≤ budget`.
    pub fn effort_from_action(&self, action: &[f64]) -> Vec<f64> {
        let raw: Vec<f64> = action.iter().map(|u| (0.5 * (u + 1.0)).clamp(0.0, 1.0)).collect();
        project_budget(&raw, self.params.budget)
    }

    /// Attack probabilities from the previous patrol effort.
    pub fn attack_probabilities(&self, prev_effort: &[f64]) -> Vec<f64> {
        (0..self.cells())
            .map(|i| {
                let spill: f64 = self.neighbors[i].iter().map(|&j| prev_effort[j]).sum();
                logistic(
                    self.attractiveness[i] + self.params.deterrence * prev_effort[i] + self.params.displacement * spill,
                )
            })
            .collect()
    }

    /// Transition with an explicit effort vector and realized attacks.
    pub fn step_with_attacks(&self, state: &[f64], effort: &[f64], attacks: &[bool]) -> StepOutcome {
        let n = self.cells();
        let wildlife = &state[n..2 * n];
        let t = state[2 * n];
        let mut next = Vec::with_capacity(2 * n + 1);
        next.extend_from_slice(effort);
        let mut new_w = Vec::with_capacity(n);
        for i in 0..n {
            let loss = if attacks[i] {
                self.params.loss_rate * (1.0 - effort[i])
            } else {
                0.0
            };
            new_w.push(quantize((wildlife[i].powf(self.params.growth) - loss).max(0.0)));
        }
        let reward = new_w.iter().sum::<f64>() - wildlife.iter().sum::<f64>();
        next.extend_from_slice(&new_w);
        next.push(t + 1.0);
        StepOutcome {
            next_state: next,
            reward,
            terminal: (t + 1.0) as usize >= self.params.horizon,
        }
    }

    pub fn step_effort<R: Rng + ?Sized>(&self, state: &[f64], effort: &[f64], rng: &mut R) -> StepOutcome {
        let n = self.cells();
        let probs = self.attack_probabilities(&state[..n]);
        let attacks: Vec<bool> = probs.iter().map(|&p| rng.random::<f64>() < p).collect();
        self.step_with_attacks(state, effort, &attacks)
    }

    pub fn reward_bound(&self) -> f64 {
        self.cells() as f64 * (self.params.loss_rate + self.params.initial_wildlife.max(1.0))
    }
}

fn quantize(w: f64) -> f64 {
    (w / WILDLIFE_QUANTUM).round() * WILDLIFE_QUANTUM
}

/// Clamps to `[0, 1]` and rescales onto the budget when the total exceeds it.
pub fn project_budget(effort: &[f64], budget: f64) -> Vec<f64> {
    let clamped: Vec<f64> = effort.iter().map(|e| e.clamp(0.0, 1.0)).collect();
    let total: f64 = clamped.iter().sum();
    if total > budget {
        // scale slightly under the budget so rounding never overshoots it
        let scale = budget / total * (1.0 - 1e-12);
        clamped.iter().map(|e| e * scale).collect()
    } else {
        clamped
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatrolPair {
    pub params: PatrolParams,
    pub displacement_off: f64,
    pub displacement_on: f64,
    pub attractiveness: Vec<f64>,
}

impl PatrolPair {
    /// Attractiveness `z ~ U[-1, 1]` per cell, fixed by `seed` and shared by both members.
    pub fn new<R: Rng + ?Sized>(
        params: PatrolParams,
        displacement_off: f64,
        displacement_on: f64,
        rng: &mut R,
    ) -> Self {
        let n = params.grid_side * params.grid_side;
        let attractiveness = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        PatrolPair {
            params,
            displacement_off,
            displacement_on,
            attractiveness,
        }
    }

    fn member(&self, displacement: f64) -> PatrolEnv {
        PatrolEnv::new(
            PatrolParams {
                displacement,
                ..self.params.clone()
            },
            self.attractiveness.clone(),
        )
        .expect("validated patrol parameters")
    }

    pub fn offline(&self) -> PatrolEnv {
        self.member(self.displacement_off)
    }

    pub fn online(&self) -> PatrolEnv {
        self.member(self.displacement_on)
    }
}

// ---------------------------------------------------------------------------
// Uniform interface

#[derive(Debug, Clone, PartialEq)]
pub enum Env {
    GaussianLinear(GaussianLinearEnv),
    PointMass(PointMassEnv),
    Patrol(PatrolEnv),
}

impl Env {
    pub fn state_dim(&self) -> usize {
        match self {
            Env::GaussianLinear(e) => e.a.nrows(),
            Env::PointMass(_) => 4,
            Env::Patrol(e) => 2 * e.cells() + 1,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            Env::GaussianLinear(e) => e.b.ncols(),
            Env::PointMass(_) => 2,
            Env::Patrol(e) => e.cells(),
        }
    }

    pub fn horizon(&self) -> usize {
        match self {
            Env::GaussianLinear(e) => e.horizon,
            Env::PointMass(e) => e.horizon,
            Env::Patrol(e) => e.params.horizon,
        }
    }

    pub fn reward_bound(&self) -> f64 {
        match self {
            Env::GaussianLinear(e) => e.reward_bound,
            Env::PointMass(e) => e.reward_bound(),
            Env::Patrol(e) => e.reward_bound(),
        }
    }

    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            Env::GaussianLinear(e) => (0..e.a.nrows()).map(|_| rng.random_range(-1.0..=1.0)).collect(),
            Env::PointMass(e) => {
                let h = e.start_half_width;
                vec![rng.random_range(-h..=h), rng.random_range(-h..=h), 0.0, 0.0]
            }
            Env::Patrol(e) => e.initial_state(),
        }
    }

    pub fn step<R: Rng + ?Sized>(&self, state: &[f64], action: &[f64], rng: &mut R) -> Result<StepOutcome> {
        check_state(state, self.state_dim())?;
        check_action(action, self.action_dim())?;
        Ok(match self {
            Env::GaussianLinear(e) => e.step(state, action, rng),
            Env::PointMass(e) => {
                let (next_state, reward) = e.dynamics(state, action);
                StepOutcome {
                    next_state,
                    reward,
                    terminal: false,
                }
            }
            Env::Patrol(e) => {
                let effort = e.effort_from_action(action);
                e.step_effort(state, &effort, rng)
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EnvPair {
    GaussianLinear(GaussianLinearPair),
    PointMass(PointMassPair),
    Patrol(PatrolPair),
}

impl EnvPair {
    pub fn name(&self) -> &'static str {
        match self {
            EnvPair::GaussianLinear(_) => "gaussian",
            EnvPair::PointMass(_) => "pointmass",
            EnvPair::Patrol(_) => "patrol",
        }
    }

    pub fn offline(&self) -> Env {
        match self {
            EnvPair::GaussianLinear(p) => Env::GaussianLinear(p.offline()),
            EnvPair::PointMass(p) => Env::PointMass(p.offline()),
            EnvPair::Patrol(p) => Env::Patrol(p.offline()),
        }
    }

    pub fn online(&self) -> Env {
        match self {
            EnvPair::GaussianLinear(p) => Env::GaussianLinear(p.online()),
            EnvPair::PointMass(p) => Env::PointMass(p.online()),
            EnvPair::Patrol(p) => Env::Patrol(p.online()),
        }
    }

    pub fn analytic_conditional_w2(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        match self {
            EnvPair::GaussianLinear(p) => p.analytic_conditional_w2(state, action),
            _ => Err(Error::invalid(format!(
                "analytic W2 is only available for the gaussian pair, not `{}`",
                self.name()
            ))),
        }
    }

    pub fn default_behavior(&self) -> BehaviorPolicy {
        match self {
            EnvPair::GaussianLinear(_) => BehaviorPolicy::Uniform,
            EnvPair::PointMass(_) => BehaviorPolicy::NoisyController {
                position_gain: 10.0,
                velocity_gain: 2.0,
                noise: 0.3,
            },
            EnvPair::Patrol(p) => BehaviorPolicy::UniformBudget {
                effort: p.params.budget / (p.params.grid_side * p.params.grid_side) as f64,
                noise: 0.3,
            },
        }
    }
}

/// Scripted policies used to log offline datasets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BehaviorPolicy {
    Uniform,
    /// Proportional-derivative controller toward the goal plus Gaussian noise
    /// (point mass only).
    NoisyController {
        position_gain: f64,
        velocity_gain: f64,
        noise: f64,
    },
    /// Equal effort in every cell plus Gaussian noise (patrol only).
    UniformBudget {
        effort: f64,
        noise: f64,
    },
}

impl BehaviorPolicy {
    pub fn act<R: Rng + ?Sized>(&self, env: &Env, state: &[f64], rng: &mut R) -> Vec<f64> {
        let k = env.action_dim();
        match (*self, env) {
            (
                BehaviorPolicy::NoisyController {
                    position_gain,
                    velocity_gain,
                    noise,
                },
                Env::PointMass(e),
            ) => (0..2)
                .map(|i| {
                    let u = -position_gain * (state[i] - e.goal[i]) - velocity_gain * state[2 + i]
                        + noise * rng.sample::<f64, _>(StandardNormal);
                    u.clamp(-1.0, 1.0)
                })
                .collect(),
            (BehaviorPolicy::UniformBudget { effort, noise }, Env::Patrol(_)) => (0..k)
                .map(|_| (2.0 * effort - 1.0 + noise * rng.sample::<f64, _>(StandardNormal)).clamp(-1.0, 1.0))
                .collect(),
            _ => (0..k).map(|_| rng.random_range(-1.0..=1.0)).collect(),
        }
    }
}

/// Rolls out `policy` in `env` until `n` transitions are logged. Episodes end
/// on termination or at the horizon; only true termination sets `done`.
pub fn generate_offline_dataset<R: Rng + ?Sized>(
    env: &Env,
    policy: &BehaviorPolicy,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Transition>> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be at least 1"));
    }
    let mut out = Vec::with_capacity(n);
    let mut state = env.reset(rng);
    let mut t = 0usize;
    while out.len() < n {
        let action = policy.act(env, &state, rng);
        let step = env.step(&state, &action, rng)?;
        out.push(Transition {
            state: state.clone(),
            action,
            reward: step.reward,
            next_state: step.next_state.clone(),
            done: step.terminal,
        });
        t += 1;
        if step.terminal || t >= env.horizon() {
            state = env.reset(rng);
            t = 0;
        } else {
            state = step.next_state;
        }
    }
    Ok(out)
}

/// Undiscounted return of one episode under `policy`.
pub fn episode_return<R, F>(env: &Env, mut policy: F, rng: &mut R) -> Result<f64>
where
    R: Rng + ?Sized,
    F: FnMut(&[f64], &mut R) -> Result<Vec<f64>>,
{
    let mut state = env.reset(rng);
    let mut total = 0.0;
    for _ in 0..env.horizon() {
        let action = policy(&state, rng)?;
        let step = env.step(&state, &action, rng)?;
        total += step.reward;
        if step.terminal {
            break;
        }
        state = step.next_state;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn patrol_pair(seed: u64) -> PatrolPair {
        PatrolPair::new(PatrolParams::default(), 0.5, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn patrol_reset_has_zero_prior_effort() {
        let env = Env::Patrol(patrol_pair(0).online());
        let s = env.reset(&mut ChaCha8Rng::seed_from_u64(1));
        assert!(s[..25].iter().all(|&a| a == 0.0));
        assert!(s[25..50].iter().all(|&w| w == 1.0));
        assert_eq!(s[50], 0.0);
    }

    #[test]
    fn point_mass_reset_in_unit_box_and_deterministic() {
        let env = Env::PointMass(PointMassPair::friction(0.05, 0.25).offline());
        let a = env.reset(&mut ChaCha8Rng::seed_from_u64(4));
        let b = env.reset(&mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        assert!(a[0].abs() <= 1.0 && a[1].abs() <= 1.0);
        assert_eq!(&a[2..], &[0.0, 0.0]);
    }

    #[test]
    fn patrol_growth_without_loss() {
        let env = patrol_pair(2).offline();
        let mut s = env.initial_state();
        for (i, w) in s[25..50].iter_mut().enumerate() {
            *w = 0.5 + 0.01 * i as f64;
        }
        let out = env.step_with_attacks(&s, &[0.0; 25], &[false; 25]);
        for i in 0..25 {
            let expected = quantize(s[25 + i].powf(1.02));
            assert_eq!(out.next_state[25 + i], expected);
        }
    }

    #[test]
    fn patrol_full_coverage_cancels_loss() {
        let env = patrol_pair(2).offline();
        let mut s = env.initial_state();
        s[25] = 0.8;
        let mut effort = vec![0.0; 25];
        effort[0] = 1.0;
        let mut attacks = vec![false; 25];
        attacks[0] = true;
        let out = env.step_with_attacks(&s, &effort, &attacks);
        assert_eq!(out.next_state[25], quantize(0.8f64.powf(1.02)));
    }

    #[test]
    fn patrol_logistic_at_zero() {
        let mut pair = patrol_pair(3);
        pair.attractiveness = vec![0.0; 25];
        let env = pair.online();
        let p = env.attack_probabilities(&[0.0; 25]);
        assert!(p.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn budget_projection() {
        let e = project_budget(&[1.0, 1.0, 1.0, 0.5, 2.0, -1.0], 2.0);
        assert!(e.iter().sum::<f64>() <= 2.0);
        assert!(e.iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert_eq!(project_budget(&[0.2, 0.3], 5.0), vec![0.2, 0.3]);
    }

    #[test]
    fn analytic_w2_examples() {
        let pair = |dim, so, son, shift| {
            GaussianLinearPair::isotropic(dim, 0.5, 0.5, so, son, shift, ShiftRegion::Everywhere).unwrap()
        };
        let p = pair(2, 0.7, 0.7, vec![3.0, 4.0]);
        assert_eq!(p.analytic_conditional_w2(&[0.1, 0.2], &[0.0, 0.0]).unwrap(), 5.0);
        let p = pair(2, 1.0, 2.0, vec![0.0, 0.0]);
        assert!((p.analytic_conditional_w2(&[0.1, 0.2], &[0.0, 0.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        let p = pair(2, 1.0, 1.5, vec![1.0, 0.0]);
        assert!((p.analytic_conditional_w2(&[0.1, 0.2], &[0.0, 0.0]).unwrap() - 1.5f64.sqrt()).abs() < 1e-15);

        let pm = EnvPair::PointMass(PointMassPair::friction(0.05, 0.25));
        assert!(pm.analytic_conditional_w2(&[0.0; 4], &[0.0; 2]).is_err());
    }

    #[test]
    fn half_shift_region() {
        let p = GaussianLinearPair::isotropic(
            2,
            0.5,
            0.5,
            0.5,
            0.5,
            vec![2.0, 0.0],
            ShiftRegion::PositiveHalf { axis: 0 },
        )
        .unwrap();
        assert_eq!(p.analytic_conditional_w2(&[0.5, 0.0], &[0.0, 0.0]).unwrap(), 2.0);
        assert_eq!(p.analytic_conditional_w2(&[-0.5, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!(p.in_shifted_region(&[0.5, 0.0]));
    }

    #[test]
    fn dataset_size_zero_rejected() {
        let pair = EnvPair::PointMass(PointMassPair::friction(0.05, 0.25));
        let env = pair.offline();
        assert!(
            generate_offline_dataset(&env, &pair.default_behavior(), 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err()
        );
    }

    #[test]
    fn point_mass_dataset_satisfies_dynamics_exactly() {
        let pair = EnvPair::PointMass(PointMassPair::friction(0.05, 0.25));
        let env = pair.offline();
        let data =
            generate_offline_dataset(&env, &pair.default_behavior(), 1000, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let Env::PointMass(pm) = &env else { unreachable!() };
        for tr in &data {
            let (next, r) = pm.dynamics(&tr.state, &tr.action);
            assert_eq!(next, tr.next_state);
            assert_eq!(r, tr.reward);
            assert!(tr.reward.abs() <= env.reward_bound());
        }
    }

    #[test]
    fn nan_action_rejected() {
        let env = Env::PointMass(PointMassPair::friction(0.05, 0.25).online());
        let s = vec![0.0; 4];
        assert!(env
            .step(&s, &[f64::NAN, 0.0], &mut ChaCha8Rng::seed_from_u64(0))
            .is_err());
    }

    #[test]
    fn higher_friction_never_ends_faster() {
        let slow = Env::PointMass(PointMassPair::friction(0.05, 0.25).online());
        let fast = Env::PointMass(PointMassPair::friction(0.05, 0.25).offline());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // constant acceleration from rest: higher friction keeps every speed component smaller
        let (mut a, mut b) = (vec![0.0; 4], vec![0.0; 4]);
        for _ in 0..30 {
            a = slow.step(&a, &[0.7, -0.4], &mut rng).unwrap().next_state;
            b = fast.step(&b, &[0.7, -0.4], &mut rng).unwrap().next_state;
        }
        assert!(a[2].abs() <= b[2].abs() && a[3].abs() <= b[3].abs());
    }

    proptest! {
        #[test]
        fn budget_projection_is_feasible(effort in prop::collection::vec(-0.5f64..1.5, 1..=30), budget in 0.1f64..10.0) {
            let p = project_budget(&effort, budget);
            prop_assert!(p.iter().all(|&e| (0.0..=1.0).contains(&e)));
            prop_assert!(p.iter().sum::<f64>() <= budget);
            let clamped: Vec<f64> = effort.iter().map(|e| e.clamp(0.0, 1.0)).collect();
            if clamped.iter().sum::<f64>() <= budget {
                prop_assert_eq!(p, clamped);
            }
        }

        #[test]
        fn point_mass_stays_inside_the_walls(
            px in -1.0f64..1.0, py in -1.0f64..1.0, vx in -2.0f64..2.0, vy in -2.0f64..2.0,
            ax in -3.0f64..3.0, ay in -3.0f64..3.0,
        ) {
            let pair = PointMassPair::friction(0.05, 0.25);
            for env in [pair.offline(), pair.online()] {
                let (next, reward) = env.dynamics(&[px, py, vx, vy], &[ax, ay]);
                prop_assert!(next[..2].iter().all(|p| p.abs() <= env.wall));
                prop_assert!(reward <= 0.0 && -reward <= env.reward_bound());
            }
        }
    }
}
