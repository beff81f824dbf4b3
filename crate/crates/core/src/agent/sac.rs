use std::f64::consts::LN_2;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::gaussian_matrix;
use crate::nnet::{Activation, Adam, AdamConfig, DenseNet, Gradients};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub lr: f64,
    pub gamma: f64,
    /// Entropy temperature.
    pub alpha: f64,
    /// Soft target update rate.
    pub target_rate: f64,
    /// Behavior-cloning weight.
    pub omega: f64,
    /// Gap bonus scale for reward shaping.
    pub beta: f64,
    /// Fraction of each offline minibatch kept after gap filtering.
    pub xi: f64,
    pub batch_size: usize,
    pub log_std_min: f64,
    pub log_std_max: f64,
    /// Stabilizer in the BC weight denominator.
    pub lambda_eps: f64,
    /// Which actor term the normalization weight λ multiplies.
    #[serde(default)]
    pub actor_loss: ActorLoss,
}

/// Placement of `λ = ω / (mean|min Q| + ε)` in the actor loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActorLoss {
    /// `mean(α log π − min Q) + λ · mean‖a − ā‖²`
    #[default]
    ScaledBc,
    /// `λ · mean(α log π − min Q) + mean‖a − ā‖²`
    ScaledQ,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            hidden_layers: 2,
            hidden_width: 256,
            lr: 3e-4,
            gamma: 0.99,
            alpha: 0.2,
            target_rate: 5e-3,
            omega: 5.0,
            beta: 0.1,
            xi: 0.5,
            batch_size: 128,
            log_std_min: -20.0,
            log_std_max: 2.0,
            lambda_eps: 1e-6,
            actor_loss: ActorLoss::ScaledBc,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid(msg.to_string()));
        if self.hidden_layers == 0 || self.hidden_width == 0 {
            return bad("actor/critic networks need at least one hidden layer of positive width");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be > 0");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0,1)");
        }
        if !(self.alpha >= 0.0) {
            return bad("alpha must be >= 0");
        }
        if !(self.target_rate > 0.0 && self.target_rate <= 1.0) {
            return bad("target_rate must lie in (0,1]");
        }
        if !(self.omega >= 0.0) || !(self.beta >= 0.0) {
            return bad("omega and beta must be >= 0");
        }
        if !(self.xi > 0.0 && self.xi <= 1.0) {
            return bad("xi must lie in (0,1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.log_std_min < self.log_std_max) {
            return bad("log_std_min must be below log_std_max");
        }
        if !(self.lambda_eps > 0.0) {
            return bad("lambda_eps must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionMode {
    Stochastic,
    Deterministic,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log(1 − tanh²u)` without cancellation for large `|u|`.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (LN_2 - u - softplus(-2.0 * u))
}

/// Tanh-squashed diagonal Gaussian policy. The network emits the mean in its
/// first `action_dim` outputs and the log-std in the rest.
#[derive(Debug, Clone, PartialEq)]
pub struct Actor {
    pub net: DenseNet,
    action_dim: usize,
    log_std_min: f64,
    log_std_max: f64,
}

/// One reparameterized draw with everything the gradient needs.
struct Draw {
    pre_tanh: Array2<f64>,
    actions: Array2<f64>,
    log_std: Array2<f64>,
    /// Whether the raw log-std was inside the clamp range.
    free_log_std: Array2<bool>,
    log_probs: Vec<f64>,
}

impl Actor {
    pub fn new(net: DenseNet, log_std_min: f64, log_std_max: f64) -> Result<Self> {
        if !net.output_dim().is_multiple_of(2) || net.output_dim() == 0 {
            return Err(Error::shape("actor output must hold a mean and a log-std per action"));
        }
        Ok(Actor {
            action_dim: net.output_dim() / 2,
            net,
            log_std_min,
            log_std_max,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn state_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn split(&self, out: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<bool>) {
        let k = self.action_dim;
        let mean = out.slice(s![.., ..k]).to_owned();
        let raw = out.slice(s![.., k..]);
        let free = raw.mapv(|v| v >= self.log_std_min && v <= self.log_std_max);
        let log_std = raw.mapv(|v| v.clamp(self.log_std_min, self.log_std_max));
        (mean, log_std, free)
    }

    pub fn mean_action(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        let out = self.net.forward_batch(states)?;
        Ok(out.slice(s![.., ..self.action_dim]).mapv(f64::tanh))
    }

    /// Clamped log standard deviations.
    pub fn log_std(&self, states: ArrayView2<f64>) -> Result<Array2<f64>> {
        let out = self.net.forward_batch(states)?;
        Ok(self.split(&out).1)
    }

    fn draw(&self, out: &Array2<f64>, noise: &Array2<f64>) -> Draw {
        let (mean, log_std, free) = self.split(out);
        let pre_tanh = &mean + &(log_std.mapv(f64::exp) * noise);
        let actions = pre_tanh.mapv(f64::tanh);
        let log_probs = (0..out.nrows())
            .map(|i| {
                (0..self.action_dim)
                    .map(|j| {
                        let e = noise[[i, j]];
                        -0.5 * e * e - log_std[[i, j]] - HALF_LN_2PI - log_one_minus_tanh_sq(pre_tanh[[i, j]])
                    })
                    .sum()
            })
            .collect();
        Draw {
            pre_tanh,
            actions,
            log_std,
            free_log_std: free,
            log_probs,
        }
    }

    /// Sampled actions and their log-densities.
    pub fn sample<R: Rng + ?Sized>(&self, states: ArrayView2<f64>, rng: &mut R) -> Result<(Array2<f64>, Vec<f64>)> {
        let out = self.net.forward_batch(states)?;
        let noise = gaussian_matrix(out.nrows(), self.action_dim, rng);
        let d = self.draw(&out, &noise);
        Ok((d.actions, d.log_probs))
    }

    pub fn sample_with_noise(&self, states: ArrayView2<f64>, noise: &Array2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
        let out = self.net.forward_batch(states)?;
        if noise.dim() != (out.nrows(), self.action_dim) {
            return Err(Error::shape("noise shape does not match the action batch"));
        }
        let d = self.draw(&out, noise);
        Ok((d.actions, d.log_probs))
    }
}

/// `y = r + γ (1 − done) (min Q_tgt(s', a') − α log π(a'|s'))`.
pub fn bellman_target(reward: f64, done: bool, gamma: f64, min_target_q: f64, alpha: f64, log_prob: f64) -> f64 {
    if done {
        reward
    } else {
        reward + gamma * (min_target_q - alpha * log_prob)
    }
}

/// Behavior-cloning weight `ω / (mean |min Q| + ε)`.
pub fn bc_weight(omega: f64, min_q: &[f64], eps: f64) -> f64 {
    let mean_abs = min_q.iter().map(|q| q.abs()).sum::<f64>() / min_q.len().max(1) as f64;
    omega / (mean_abs + eps)
}

/// Index of the action maximizing `q + β·gap` over an enumerated action set;
/// ties go to the lowest index.
pub fn optimistic_argmax(q: &[f64], gaps: &[f64], beta: f64) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, (qi, gi)) in q.iter().zip(gaps).enumerate() {
        let v = qi + beta * gi;
        if v > best_val {
            best = i;
            best_val = v;
        }
    }
    best
}

/// Critic regression batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticBatch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Vec<f64>,
    pub next_states: Array2<f64>,
    pub dones: Vec<bool>,
}

impl CriticBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActorStats {
    pub loss: f64,
    pub lambda: f64,
    pub bc_loss: f64,
}

/// Actor, twin critics, their targets and optimizers.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub config: AgentConfig,
    pub actor: Actor,
    pub critics: [DenseNet; 2],
    pub targets: [DenseNet; 2],
    pub actor_opt: Adam,
    pub critic_opts: [Adam; 2],
}

fn concat_cols(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    concatenate(Axis(1), &[a, b]).map_err(|e| Error::shape(e.to_string()))
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, config: AgentConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let hidden = vec![config.hidden_width; config.hidden_layers];
        let widths = |i: usize, o: usize| [vec![i], hidden.clone(), vec![o]].concat();
        let actor_net = DenseNet::new(
            &widths(state_dim, 2 * action_dim),
            Activation::Relu,
            Activation::Identity,
            rng,
        )?;
        let c0 = DenseNet::new(
            &widths(state_dim + action_dim, 1),
            Activation::Relu,
            Activation::Identity,
            rng,
        )?;
        let c1 = DenseNet::new(
            &widths(state_dim + action_dim, 1),
            Activation::Relu,
            Activation::Identity,
            rng,
        )?;
        Self::from_nets(config, actor_net, [c0, c1])
    }

    /// Targets start as copies of the critics.
    pub fn from_nets(config: AgentConfig, actor_net: DenseNet, critics: [DenseNet; 2]) -> Result<Self> {
        config.validate()?;
        let actor = Actor::new(actor_net, config.log_std_min, config.log_std_max)?;
        for c in &critics {
            if c.input_dim() != actor.state_dim() + actor.action_dim() || c.output_dim() != 1 {
                return Err(Error::shape("critic must map (state, action) to a scalar"));
            }
        }
        let opt = AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        };
        Ok(Agent {
            actor_opt: Adam::new(&actor.net, opt),
            critic_opts: [Adam::new(&critics[0], opt), Adam::new(&critics[1], opt)],
            targets: critics.clone(),
            critics,
            actor,
            config,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.actor.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.actor.action_dim()
    }

    pub fn select_action<R: Rng + ?Sized>(&self, state: &[f64], mode: ActionMode, rng: &mut R) -> Result<Vec<f64>> {
        if state.len() != self.state_dim() {
            return Err(Error::shape(format!(
                "state has {} entries, policy expects {}",
                state.len(),
                self.state_dim()
            )));
        }
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy input state".into()));
        }
        let s = ArrayView2::from_shape((1, state.len()), state).map_err(|e| Error::shape(e.to_string()))?;
        let a = match mode {
            ActionMode::Deterministic => self.actor.mean_action(s)?,
            ActionMode::Stochastic => self.actor.sample(s, rng)?.0,
        };
        Ok(a.into_raw_vec_and_offset().0)
    }

    fn min_over(nets: &[DenseNet; 2], states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Vec<f64>> {
        let input = concat_cols(states, actions)?;
        let q0 = nets[0].forward_batch(input.view())?;
        let q1 = nets[1].forward_batch(input.view())?;
        Ok(q0.iter().zip(q1.iter()).map(|(a, b)| a.min(*b)).collect())
    }

    pub fn min_q(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Vec<f64>> {
        Self::min_over(&self.critics, states, actions)
    }

    pub fn min_target_q(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Vec<f64>> {
        Self::min_over(&self.targets, states, actions)
    }

    /// Targets with one sampled next action per next state.
    pub fn bellman_targets<R: Rng + ?Sized>(&self, batch: &CriticBatch, rng: &mut R) -> Result<Vec<f64>> {
        let (next_a, next_logp) = self.actor.sample(batch.next_states.view(), rng)?;
        let q_next = self.min_target_q(batch.next_states.view(), next_a.view())?;
        let c = &self.config;
        Ok((0..batch.len())
            .map(|i| {
                bellman_target(
                    batch.rewards[i],
                    batch.dones[i],
                    c.gamma,
                    q_next[i],
                    c.alpha,
                    next_logp[i],
                )
            })
            .collect())
    }

    /// One Adam step on each critic's squared Bellman error; returns the mean
    /// of the two losses.
    pub fn critic_update<R: Rng + ?Sized>(&mut self, batch: &CriticBatch, rng: &mut R) -> Result<f64> {
        let n = batch.len();
        if n == 0 {
            return Err(Error::invalid("critic batch is empty"));
        }
        if batch.dones.len() != n
            || batch.states.nrows() != n
            || batch.actions.nrows() != n
            || batch.next_states.nrows() != n
        {
            return Err(Error::shape("critic batch columns disagree in length"));
        }
        let y = self.bellman_targets(batch, rng)?;
        let input = concat_cols(batch.states.view(), batch.actions.view())?;
        let mut total = 0.0;
        for k in 0..2 {
            let trace = self.critics[k].forward_traced(input.view())?;
            let q = trace.output().expect("traced output");
            let residual = Array2::from_shape_fn((n, 1), |(i, _)| q[[i, 0]] - y[i]);
            total += residual.iter().map(|r| r * r).sum::<f64>() / n as f64;
            let (grads, _) = self.critics[k].backward(&trace, (residual * (2.0 / n as f64)).view())?;
            self.critic_opts[k].step(&mut self.critics[k], &grads)?;
        }
        Ok(total / 2.0)
    }

    /// `mean(α log π(ã|s) − min Q(s, ã))` for reparameterized `ã` with the
    /// given standard-normal noise; returns the loss, the per-row min Q and
    /// the actor gradients.
    pub fn sac_objective(&self, states: ArrayView2<f64>, noise: &Array2<f64>) -> Result<(f64, Vec<f64>, Gradients)> {
        let n = states.nrows();
        let k = self.action_dim();
        let trace = self.actor.net.forward_traced(states)?;
        let out = trace.output().expect("traced output");
        if noise.dim() != (n, k) {
            return Err(Error::shape("noise shape does not match the action batch"));
        }
        let d = self.actor.draw(out, noise);
        let input = concat_cols(states, d.actions.view())?;
        let t0 = self.critics[0].forward_traced(input.view())?;
        let t1 = self.critics[1].forward_traced(input.view())?;
        let (q0, q1) = (t0.output().expect("q0"), t1.output().expect("q1"));
        let mut g0 = Array2::zeros((n, 1));
        let mut g1 = Array2::zeros((n, 1));
        let mut min_q = Vec::with_capacity(n);
        for i in 0..n {
            if q0[[i, 0]] <= q1[[i, 0]] {
                min_q.push(q0[[i, 0]]);
                g0[[i, 0]] = 1.0;
            } else {
                min_q.push(q1[[i, 0]]);
                g1[[i, 0]] = 1.0;
            }
        }
        let (_, in0) = self.critics[0].backward(&t0, g0.view())?;
        let (_, in1) = self.critics[1].backward(&t1, g1.view())?;
        let sd = self.state_dim();
        let dq_da = &in0.slice(s![.., sd..]) + &in1.slice(s![.., sd..]);

        let alpha = self.config.alpha;
        let inv_n = 1.0 / n as f64;
        let loss = (0..n).map(|i| alpha * d.log_probs[i] - min_q[i]).sum::<f64>() * inv_n;
        let mut grad_out = Array2::zeros((n, 2 * k));
        for i in 0..n {
            for j in 0..k {
                let a = d.actions[[i, j]];
                let du = inv_n * (alpha * 2.0 * d.pre_tanh[[i, j]].tanh() - dq_da[[i, j]] * (1.0 - a * a));
                grad_out[[i, j]] = du;
                if d.free_log_std[[i, j]] {
                    let sigma_eps = d.log_std[[i, j]].exp() * noise[[i, j]];
                    grad_out[[i, k + j]] = -alpha * inv_n + du * sigma_eps;
                }
            }
        }
        let (grads, _) = self.actor.net.backward(&trace, grad_out.view())?;
        Ok((loss, min_q, grads))
    }

    /// `λ · mean ‖ā − a‖²` over offline pairs, with `ā` the reparameterized
    /// policy sample for the given noise, and its actor gradients.
    pub fn bc_objective(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        noise: &Array2<f64>,
        lambda: f64,
    ) -> Result<(f64, Gradients)> {
        let m = states.nrows();
        let k = self.action_dim();
        if actions.dim() != (m, k) || noise.dim() != (m, k) {
            return Err(Error::shape("offline actions or noise do not match the offline states"));
        }
        let trace = self.actor.net.forward_traced(states)?;
        let d = self.actor.draw(trace.output().expect("traced output"), noise);
        let mut grad_out = Array2::zeros((m, 2 * k));
        let mut loss = 0.0;
        for i in 0..m {
            for j in 0..k {
                let a_bar = d.actions[[i, j]];
                let diff = a_bar - actions[[i, j]];
                loss += diff * diff;
                let du = lambda * 2.0 / m as f64 * diff * (1.0 - a_bar * a_bar);
                grad_out[[i, j]] = du;
                if d.free_log_std[[i, j]] {
                    grad_out[[i, k + j]] = du * d.log_std[[i, j]].exp() * noise[[i, j]];
                }
            }
        }
        let (grads, _) = self.actor.net.backward(&trace, grad_out.view())?;
        Ok((lambda * loss / m as f64, grads))
    }

    /// One actor step on the SAC objective over `states` plus, when `omega > 0`,
    /// the BC term over the offline pairs, normalized per `config.actor_loss`.
    pub fn actor_update<R: Rng + ?Sized>(
        &mut self,
        states: ArrayView2<f64>,
        offline: Option<(ArrayView2<f64>, ArrayView2<f64>)>,
        rng: &mut R,
    ) -> Result<ActorStats> {
        if states.nrows() == 0 {
            return Err(Error::invalid("actor batch is empty"));
        }
        let noise = gaussian_matrix(states.nrows(), self.action_dim(), rng);
        let (mut sac_loss, min_q, mut grads) = self.sac_objective(states, &noise)?;
        let lambda = bc_weight(self.config.omega, &min_q, self.config.lambda_eps);
        let mut bc_scale = lambda;
        if self.config.actor_loss == ActorLoss::ScaledQ && self.config.omega > 0.0 {
            sac_loss *= lambda;
            grads.scale(lambda);
            bc_scale = 1.0;
        }
        let mut bc_loss = 0.0;
        if self.config.omega > 0.0 {
            match offline {
                Some((s, a)) if s.nrows() > 0 => {
                    let bc_noise = gaussian_matrix(s.nrows(), self.action_dim(), rng);
                    let (l, g) = self.bc_objective(s, a, &bc_noise, bc_scale)?;
                    bc_loss = l;
                    grads.add_assign(&g);
                }
                _ => log::warn!("behavior-cloning term skipped: no offline pairs in this batch"),
            }
        }
        self.actor_opt.step(&mut self.actor.net, &grads)?;
        Ok(ActorStats {
            loss: sac_loss + bc_loss,
            lambda,
            bc_loss,
        })
    }

    pub fn soft_target_update(&mut self) {
        let rate = self.config.target_rate;
        for k in 0..2 {
            self.targets[k].soft_update_from(&self.critics[k], rate);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> AgentConfig {
        AgentConfig {
            hidden_layers: 2,
            hidden_width: 8,
            ..AgentConfig::default()
        }
    }

    fn small_agent(seed: u64) -> Agent {
        Agent::new(3, 2, small_config(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn zero_actor_is_centered() {
        let actor = DenseNet::zeros(&[3, 4, 4], Activation::Relu, Activation::Identity).unwrap();
        let c = || DenseNet::zeros(&[5, 4, 1], Activation::Relu, Activation::Identity).unwrap();
        let agent = Agent::from_nets(small_config(), actor, [c(), c()]).unwrap();
        let a = agent
            .select_action(
                &[0.3, -1.0, 2.0],
                ActionMode::Deterministic,
                &mut ChaCha8Rng::seed_from_u64(0),
            )
            .unwrap();
        assert_eq!(a, vec![0.0, 0.0]);
    }

    #[test]
    fn log_std_within_clamp() {
        let mut agent = small_agent(1);
        // push the log-std head far outside the clamp range in both directions
        let last = agent.actor.net.layers_mut().last_mut().unwrap();
        last.bias[2] = 500.0;
        last.bias[3] = -500.0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let states = gaussian_matrix(50, 3, &mut rng) * 10.0;
        let ls = agent.actor.log_std(states.view()).unwrap();
        assert!(ls.iter().all(|v| (-20.0..=2.0).contains(v)));
        assert!(ls.column(0).iter().all(|&v| v == 2.0));
        assert!(ls.column(1).iter().all(|&v| v == -20.0));
    }

    #[test]
    fn stochastic_action_is_seed_deterministic_and_bounded() {
        let agent = small_agent(3);
        let s = [0.1, 0.2, 0.3];
        let a = agent
            .select_action(&s, ActionMode::Stochastic, &mut ChaCha8Rng::seed_from_u64(4))
            .unwrap();
        let b = agent
            .select_action(&s, ActionMode::Stochastic, &mut ChaCha8Rng::seed_from_u64(4))
            .unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn select_action_rejects_bad_states() {
        let agent = small_agent(5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            agent.select_action(&[f64::NAN, 0.0, 0.0], ActionMode::Deterministic, &mut rng),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            agent.select_action(&[0.0], ActionMode::Deterministic, &mut rng),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn log_prob_matches_change_of_variables() {
        let agent = small_agent(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let states = gaussian_matrix(20, 3, &mut rng);
        let noise = gaussian_matrix(20, 2, &mut rng);
        let (actions, logp) = agent.actor.sample_with_noise(states.view(), &noise).unwrap();
        let out = agent.actor.net.forward_batch(states.view()).unwrap();
        for i in 0..20 {
            let mut direct = 0.0;
            for j in 0..2 {
                let mu = out[[i, j]];
                let ls = out[[i, 2 + j]].clamp(-20.0, 2.0);
                let sigma = ls.exp();
                let u = mu + sigma * noise[[i, j]];
                let gauss =
                    (-(u - mu).powi(2) / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
                direct += gauss.ln() - (1.0 - u.tanh().powi(2)).ln();
                assert!((actions[[i, j]] - u.tanh()).abs() < 1e-15);
            }
            assert!((logp[i] - direct).abs() < 1e-9, "{} vs {}", logp[i], direct);
        }
    }

    #[test]
    fn target_arithmetic() {
        let y = bellman_target(1.0, false, 0.99, 2.0, 0.2, -1.0);
        assert!((y - 3.178).abs() < 1e-12);
        assert_eq!(bellman_target(1.0, true, 0.99, 2.0, 0.2, -1.0), 1.0);
        assert_eq!(bellman_target(0.7, false, 0.0, 5.0, 0.0, -3.0), 0.7);
    }

    #[test]
    fn entropy_bonus_grows_with_alpha() {
        let lp = -1.3;
        let ys: Vec<f64> = [0.0, 0.1, 0.2, 0.5]
            .iter()
            .map(|&a| bellman_target(0.0, false, 0.99, 1.0, a, lp))
            .collect();
        assert!(ys.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn lambda_examples() {
        let lambda = bc_weight(5.0, &[10.0, -10.0, 10.0], 1e-12);
        assert!((lambda - 0.5).abs() < 1e-12);
        let q = [3.0, -1.5, 0.25];
        let l = bc_weight(5.0, &q, 1e-6);
        let mean_abs = (3.0 + 1.5 + 0.25) / 3.0;
        assert!((l * (mean_abs + 1e-6) - 5.0).abs() < 1e-12);
        assert_eq!(bc_weight(0.0, &q, 1e-6), 0.0);
    }

    #[test]
    fn myopic_critic_regresses_onto_rewards() {
        let mut agent = Agent::new(
            1,
            1,
            AgentConfig {
                gamma: 0.0,
                alpha: 0.0,
                ..small_config()
            },
            &mut ChaCha8Rng::seed_from_u64(8),
        )
        .unwrap();
        let batch = CriticBatch {
            states: array![[0.1], [0.5]],
            actions: array![[0.2], [-0.3]],
            rewards: vec![1.0, -2.0],
            next_states: array![[9.0], [9.0]],
            dones: vec![false, false],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(agent.bellman_targets(&batch, &mut rng).unwrap(), vec![1.0, -2.0]);
        let input = concat_cols(batch.states.view(), batch.actions.view()).unwrap();
        let expected: f64 = (0..2)
            .map(|k| {
                let q = agent.critics[k].forward_batch(input.view()).unwrap();
                ((q[[0, 0]] - 1.0).powi(2) + (q[[1, 0]] + 2.0).powi(2)) / 2.0
            })
            .sum::<f64>()
            / 2.0;
        let loss = agent.critic_update(&batch, &mut rng).unwrap();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn bc_term_vanishes_on_reproduced_actions() {
        let mut agent = small_agent(10);
        // pin the log-std at its floor so the policy is numerically deterministic
        let last = agent.actor.net.layers_mut().last_mut().unwrap();
        last.weights.row_mut(2).fill(0.0);
        last.weights.row_mut(3).fill(0.0);
        last.bias[2] = -1000.0;
        last.bias[3] = -1000.0;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let states = gaussian_matrix(6, 3, &mut rng);
        let noise = gaussian_matrix(6, 2, &mut rng);
        let actions = agent.actor.mean_action(states.view()).unwrap();
        let (loss, grads) = agent.bc_objective(states.view(), actions.view(), &noise, 0.7).unwrap();
        assert!(loss < 1e-15);
        assert!(grads.flatten().iter().all(|&g| g.abs() < 1e-7));
    }

    fn relative_error(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn actor_gradients_match_finite_differences() {
        let agent = small_agent(12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let states = gaussian_matrix(16, 3, &mut rng);
        let noise = gaussian_matrix(16, 2, &mut rng);
        let bc_actions = gaussian_matrix(16, 2, &mut rng).mapv(|v| v.tanh() * 0.9);
        let (_, _, sac_grads) = agent.sac_objective(states.view(), &noise).unwrap();
        let bc_noise = gaussian_matrix(16, 2, &mut rng);
        let (_, bc_grads) = agent
            .bc_objective(states.view(), bc_actions.view(), &bc_noise, 0.3)
            .unwrap();
        let sac = sac_grads.flatten();
        let bc = bc_grads.flatten();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for idx in 0..agent.actor.net.num_params() {
            let eval = |delta: f64| {
                let mut a = agent.clone();
                *a.actor.net.param_mut(idx) += delta;
                let s = a.sac_objective(states.view(), &noise).unwrap().0;
                let b = a
                    .bc_objective(states.view(), bc_actions.view(), &bc_noise, 0.3)
                    .unwrap()
                    .0;
                (s, b)
            };
            let (sp, bp) = eval(h);
            let (sm, bm) = eval(-h);
            let fd_sac = (sp - sm) / (2.0 * h);
            let fd_bc = (bp - bm) / (2.0 * h);
            if fd_sac.abs() > 1e-7 || sac[idx].abs() > 1e-7 {
                worst = worst.max(relative_error(fd_sac, sac[idx]));
            }
            if fd_bc.abs() > 1e-7 || bc[idx].abs() > 1e-7 {
                worst = worst.max(relative_error(fd_bc, bc[idx]));
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn soft_update_examples() {
        let mut agent = small_agent(14);
        for k in 0..2 {
            for l in agent.critics[k].layers_mut() {
                l.weights.fill(1.0);
                l.bias.fill(1.0);
            }
            for l in agent.targets[k].layers_mut() {
                l.weights.fill(0.0);
                l.bias.fill(0.0);
            }
        }
        agent.soft_target_update();
        assert!(agent.targets[0]
            .flatten_params()
            .iter()
            .all(|&p| (p - 0.005).abs() < 1e-15));

        let mut full = agent.clone();
        full.config.target_rate = 1.0;
        full.soft_target_update();
        assert_eq!(full.targets[1], full.critics[1]);
    }

    #[test]
    fn soft_update_halves_geometrically() {
        let mut agent = small_agent(15);
        let rate = agent.config.target_rate;
        let diff = |a: &Agent| -> f64 {
            a.critics[0]
                .flatten_params()
                .iter()
                .zip(a.targets[0].flatten_params())
                .map(|(c, t)| (c - t).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        agent.targets[0] = DenseNet::zeros(agent.critics[0].widths(), Activation::Relu, Activation::Identity).unwrap();
        let start = diff(&agent);
        let half_life = (std::f64::consts::LN_2 / rate).ceil() as usize;
        for _ in 0..half_life {
            agent.soft_target_update();
        }
        let ratio = diff(&agent) / start;
        // geometric oracle: (1 − ϖ)^n
        let oracle = (1.0 - rate).powi(half_life as i32);
        assert!((ratio - oracle).abs() < 1e-9);
        assert!((ratio - 0.5).abs() <= 0.05 * 0.5);
    }

    #[test]
    fn optimism_moves_toward_larger_gaps() {
        let q = [1.0, 0.9, 0.5, 0.2];
        let gaps = [0.0, 0.5, 2.0, 4.0];
        assert_eq!(optimistic_argmax(&q, &gaps, 0.0), 0);
        let mut prev_gap = 0.0;
        for beta in [0.0, 0.1, 0.3, 0.5, 1.0, 5.0] {
            let i = optimistic_argmax(&q, &gaps, beta);
            assert!(gaps[i] >= prev_gap);
            prev_gap = gaps[i];
        }
        assert_eq!(optimistic_argmax(&q, &gaps, 5.0), 3);
    }

    #[test]
    fn actor_loss_forms_place_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let states = gaussian_matrix(6, 3, &mut rng);
        let off_s = gaussian_matrix(4, 3, &mut rng);
        let off_a = gaussian_matrix(4, 2, &mut rng).mapv(|v| (0.5 * v).tanh());
        for form in [ActorLoss::ScaledBc, ActorLoss::ScaledQ] {
            let mut agent = small_agent(22);
            agent.config.actor_loss = form;
            let mut replay = ChaCha8Rng::seed_from_u64(23);
            let noise = gaussian_matrix(6, 2, &mut replay);
            let bc_noise = gaussian_matrix(4, 2, &mut replay);
            let (sac, min_q, mut expected) = agent.sac_objective(states.view(), &noise).unwrap();
            let lambda = bc_weight(agent.config.omega, &min_q, agent.config.lambda_eps);
            let (q_scale, bc_scale) = match form {
                ActorLoss::ScaledBc => (1.0, lambda),
                ActorLoss::ScaledQ => (lambda, 1.0),
            };
            expected.scale(q_scale);
            let (bc, g) = agent
                .bc_objective(off_s.view(), off_a.view(), &bc_noise, bc_scale)
                .unwrap();
            expected.add_assign(&g);

            let mut stepped = agent.clone();
            stepped.actor_opt.step(&mut stepped.actor.net, &expected).unwrap();
            let stats = agent
                .actor_update(
                    states.view(),
                    Some((off_s.view(), off_a.view())),
                    &mut ChaCha8Rng::seed_from_u64(23),
                )
                .unwrap();
            assert!((stats.loss - (q_scale * sac + bc)).abs() < 1e-12);
            assert_eq!(agent.actor.net, stepped.actor.net);
        }
    }

    #[test]
    fn actor_update_skips_bc_without_offline_pairs() {
        let mut agent = small_agent(16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let states = gaussian_matrix(8, 3, &mut rng);
        let stats = agent.actor_update(states.view(), None, &mut rng).unwrap();
        assert_eq!(stats.bc_loss, 0.0);
        assert!(stats.loss.is_finite());
    }
}
