use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::buffer::ReplayBuffer;
use super::sac::{ActionMode, ActorLoss, Agent, AgentConfig, CriticBatch};
use crate::envs::{episode_return, Env, EnvPair, Transition};
use crate::error::{Error, Result};
use crate::flow::{sample_indices, train_online_flow, CompositeFlow, ConditionalFlow, CouplingAudit, FlowTrainConfig};
use crate::gap::{dataset_gaps, kept_count, quantile_select};
use crate::nnet::{Adam, DenseNet, Gradients};
use crate::persist::atomic_write;

/// Number of recent offline minibatches whose kept indices are retained.
pub const KEPT_TAIL: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    CompFlow,
    Sac,
    BcSac,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::CompFlow => "compflow",
            Method::Sac => "sac",
            Method::BcSac => "bcsac",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "compflow" => Ok(Method::CompFlow),
            "sac" => Ok(Method::Sac),
            "bcsac" => Ok(Method::BcSac),
            other => Err(Error::invalid(format!(
                "unknown method `{other}` (expected compflow, sac or bcsac)"
            ))),
        }
    }
}

impl Method {
    pub fn uses_offline_data(&self) -> bool {
        !matches!(self, Method::Sac)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub method: Method,
    pub agent: AgentConfig,
    /// Gradient steps per environment interaction.
    pub gradient_steps: usize,
    pub buffer_capacity: usize,
    /// Interactions with uniformly random actions before the policy acts.
    pub warmup: usize,
    pub total_steps: usize,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Online-flow retraining period in interactions.
    pub train_freq: usize,
    /// Monte-Carlo latents per gap estimate.
    pub gap_samples: usize,
    pub online_flow: FlowTrainConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            method: Method::CompFlow,
            agent: AgentConfig::default(),
            gradient_steps: 10,
            buffer_capacity: 1_000_000,
            warmup: 1000,
            total_steps: 40_000,
            eval_interval: 5000,
            eval_episodes: 10,
            train_freq: 5000,
            gap_samples: 30,
            online_flow: FlowTrainConfig {
                iterations: 500,
                ..FlowTrainConfig::default()
            },
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        self.agent.validate()?;
        for (name, v) in [
            ("gradient_steps", self.gradient_steps),
            ("buffer_capacity", self.buffer_capacity),
            ("total_steps", self.total_steps),
            ("eval_interval", self.eval_interval),
            ("eval_episodes", self.eval_episodes),
            ("train_freq", self.train_freq),
            ("gap_samples", self.gap_samples),
            ("online_flow.batch_size", self.online_flow.batch_size),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Agent hyperparameters with the method's fixed settings applied.
    pub fn effective_agent(&self) -> AgentConfig {
        let mut a = self.agent.clone();
        match self.method {
            Method::CompFlow => {}
            Method::Sac => a.omega = 0.0,
            Method::BcSac => {
                a.beta = 0.0;
                a.xi = 1.0;
                a.actor_loss = ActorLoss::ScaledQ;
            }
        }
        a
    }
}

/// One evaluation-interval summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub eval_return_mean: f64,
    pub eval_return_std: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub lambda: f64,
    pub mean_kept_gap: f64,
    pub mean_rejected_gap: f64,
    pub buffer_size: usize,
}

/// Running checks of the per-minibatch filter laws.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterLog {
    pub minibatches: u64,
    /// Minibatches whose kept count differed from `⌈ξB⌉`.
    pub size_violations: u64,
    /// Minibatches with a kept gap above a rejected gap.
    pub order_violations: u64,
    /// Offline dataset indices kept in the most recent minibatches.
    pub recent_kept: VecDeque<Vec<usize>>,
}

/// The offline part of the latest gradient step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OfflineBatchRecord {
    pub indices: Vec<usize>,
    pub gaps: Vec<f64>,
    /// Positions within `indices` that passed the filter.
    pub kept: Vec<usize>,
    /// Rewards fed to the critic for the kept positions, in order.
    pub shaped_rewards: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct IntervalStats {
    critic_loss: f64,
    actor_loss: f64,
    updates: u64,
    lambda: Option<f64>,
    kept_gap: f64,
    kept: u64,
    rejected_gap: f64,
    rejected: u64,
}

impl IntervalStats {
    fn mean(sum: f64, n: u64) -> f64 {
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    }
}

/// Mean and population standard deviation of deterministic-policy returns.
pub fn evaluate<R: Rng + ?Sized>(agent: &Agent, env: &Env, episodes: usize, rng: &mut R) -> Result<(f64, f64)> {
    if episodes == 0 {
        return Err(Error::invalid("evaluation needs at least one episode"));
    }
    let returns = (0..episodes)
        .map(|_| episode_return(env, |s, r| agent.select_action(s, ActionMode::Deterministic, r), rng))
        .collect::<Result<Vec<f64>>>()?;
    let mean = returns.iter().sum::<f64>() / episodes as f64;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / episodes as f64;
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Serialize, Deserialize)]
struct SavedState {
    config: TrainerConfig,
    seed: u64,
    step: usize,
    rng: ChaCha8Rng,
    episode_state: Vec<f64>,
    episode_t: usize,
    buffer: ReplayBuffer,
    gaps: Vec<f64>,
    filter_log: FilterLog,
    coupling: CouplingAudit,
    interval: IntervalStats,
    adam_steps: [u64; 3],
    has_online_flow: bool,
}

/// Online training loop for CompFlow and its SAC / BC-SAC baselines.
pub struct Trainer {
    config: TrainerConfig,
    seed: u64,
    env: Env,
    pub agent: Agent,
    buffer: ReplayBuffer,
    offline: Vec<Transition>,
    /// Gap of every offline transition under the current composite flow.
    gaps: Vec<f64>,
    offline_flow: Option<ConditionalFlow>,
    online_flow: Option<ConditionalFlow>,
    rng: ChaCha8Rng,
    step: usize,
    episode_state: Vec<f64>,
    episode_t: usize,
    pub filter_log: FilterLog,
    pub coupling: CouplingAudit,
    pub last_offline_batch: Option<OfflineBatchRecord>,
    interval: IntervalStats,
}

impl Trainer {
    pub fn new(
        config: TrainerConfig,
        pair: &EnvPair,
        offline: Vec<Transition>,
        offline_flow: Option<ConditionalFlow>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let env = pair.online();
        let (sd, ad) = (env.state_dim(), env.action_dim());
        let offline = if config.method.uses_offline_data() {
            offline
        } else {
            Vec::new()
        };
        if config.method.uses_offline_data() && offline.is_empty() {
            return Err(Error::invalid(format!(
                "method `{}` needs a non-empty offline dataset",
                config.method
            )));
        }
        if let Some(t) = offline
            .iter()
            .find(|t| t.state.len() != sd || t.action.len() != ad || t.next_state.len() != sd)
        {
            return Err(Error::shape(format!(
                "offline transition has dims ({}, {}, {}), environment expects ({sd}, {ad}, {sd})",
                t.state.len(),
                t.action.len(),
                t.next_state.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (offline_flow, online_flow) = match config.method {
            Method::CompFlow => {
                let off =
                    offline_flow.ok_or_else(|| Error::Untrained("compflow needs a pretrained offline flow".into()))?;
                if !off.is_frozen() {
                    return Err(Error::Untrained("offline flow has not been trained".into()));
                }
                let dims = off.dims();
                if (dims.x_dim, dims.s_dim, dims.a_dim) != (sd, sd, ad) {
                    return Err(Error::shape("offline flow dimensions do not match the environment"));
                }
                let mut on =
                    ConditionalFlow::new_online(dims, config.online_flow.arch, config.online_flow.ode_steps, &mut rng)?;
                on.freeze();
                (Some(off), Some(on))
            }
            _ => (None, None),
        };
        let agent = Agent::new(sd, ad, config.effective_agent(), &mut rng)?;
        let episode_state = env.reset(&mut rng);
        Ok(Trainer {
            buffer: ReplayBuffer::new(config.buffer_capacity)?,
            // the initial online flow is the identity, so every gap is exactly zero
            gaps: vec![0.0; offline.len()],
            offline,
            offline_flow,
            online_flow,
            config,
            seed,
            env,
            agent,
            rng,
            step: 0,
            episode_state,
            episode_t: 0,
            filter_log: FilterLog::default(),
            coupling: CouplingAudit::default(),
            last_offline_batch: None,
            interval: IntervalStats::default(),
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.total_steps
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn offline_gaps(&self) -> &[f64] {
        &self.gaps
    }

    pub fn online_flow(&self) -> Option<&ConditionalFlow> {
        self.online_flow.as_ref()
    }

    /// One environment interaction followed by the scheduled updates. Returns
    /// a metrics record when an evaluation falls on this step.
    pub fn step(&mut self) -> Result<Option<MetricsRecord>> {
        self.step += 1;
        let t = self.step;
        let action = if t <= self.config.warmup {
            (0..self.env.action_dim())
                .map(|_| self.rng.random_range(-1.0..=1.0))
                .collect()
        } else {
            self.agent
                .select_action(&self.episode_state, ActionMode::Stochastic, &mut self.rng)?
        };
        let out = self.env.step(&self.episode_state, &action, &mut self.rng)?;
        self.buffer.push(Transition {
            state: self.episode_state.clone(),
            action,
            reward: out.reward,
            next_state: out.next_state.clone(),
            done: out.terminal,
        });
        self.episode_t += 1;
        if out.terminal || self.episode_t >= self.env.horizon() {
            self.episode_state = self.env.reset(&mut self.rng);
            self.episode_t = 0;
        } else {
            self.episode_state = out.next_state;
        }

        if self.config.method == Method::CompFlow
            && t > self.config.warmup
            && t < self.config.total_steps
            && t.is_multiple_of(self.config.train_freq)
        {
            self.retrain_online_flow()?;
        }
        if self.buffer.len() >= self.config.agent.batch_size {
            for _ in 0..self.config.gradient_steps {
                self.gradient_step()?;
            }
        }
        if t.is_multiple_of(self.config.eval_interval) || t == self.config.total_steps {
            return Ok(Some(self.record()?));
        }
        Ok(None)
    }

    /// Steps until the interaction budget is spent, handing every metrics
    /// record to `on_record`.
    pub fn run<F>(&mut self, mut on_record: F) -> Result<()>
    where
        F: FnMut(&Trainer, &MetricsRecord) -> Result<()>,
    {
        while !self.is_done() {
            if let Some(rec) = self.step()? {
                on_record(self, &rec)?;
            }
        }
        Ok(())
    }

    fn retrain_online_flow(&mut self) -> Result<()> {
        let off = self.offline_flow.as_ref().expect("compflow has an offline flow");
        let (on, report) = train_online_flow(
            off,
            self.buffer.as_slice(),
            self.online_flow.as_ref(),
            &self.config.online_flow,
            &mut self.rng,
        )?;
        self.coupling.merge(&report.coupling);
        let composite = CompositeFlow::new(off.clone(), on)?;
        self.gaps = dataset_gaps(&self.offline, &composite, self.config.gap_samples, &mut self.rng)?;
        log::info!(
            "step {}: online flow retrained (final loss {:?}), mean offline gap {:.4}",
            self.step,
            report.final_loss(),
            self.gaps.iter().sum::<f64>() / self.gaps.len().max(1) as f64
        );
        self.online_flow = Some(composite.online);
        Ok(())
    }

    fn gradient_step(&mut self) -> Result<()> {
        let b = self.config.agent.batch_size;
        let on_idx = self.buffer.sample_indices(b, &mut self.rng)?;
        let mut record = None;
        if !self.offline.is_empty() {
            let (xi, beta) = (self.agent.config.xi, self.agent.config.beta);
            let idx = sample_indices(self.offline.len(), b, &mut self.rng);
            let gaps: Vec<f64> = idx.iter().map(|&i| self.gaps[i]).collect();
            let (kept, _) = quantile_select(&gaps, xi)?;
            self.check_filter(&gaps, &kept, xi);
            let shaped = kept
                .iter()
                .map(|&p| self.offline[idx[p]].reward + beta * gaps[p])
                .collect();
            self.filter_log
                .recent_kept
                .push_back(kept.iter().map(|&p| idx[p]).collect());
            if self.filter_log.recent_kept.len() > KEPT_TAIL {
                self.filter_log.recent_kept.pop_front();
            }
            record = Some(OfflineBatchRecord {
                indices: idx,
                gaps,
                kept,
                shaped_rewards: shaped,
            });
        }
        let mut rows: Vec<(&Transition, f64)> = on_idx
            .iter()
            .map(|&i| {
                let t = self.buffer.get(i);
                (t, t.reward)
            })
            .collect();
        if let Some(r) = &record {
            for (&p, &reward) in r.kept.iter().zip(&r.shaped_rewards) {
                rows.push((&self.offline[r.indices[p]], reward));
            }
        }

        let batch = critic_batch(&rows);
        let critic_loss = self.agent.critic_update(&batch, &mut self.rng)?;
        let bc = record.as_ref().map(|r| {
            let sel: Vec<(&Transition, f64)> = r.indices.iter().map(|&i| (&self.offline[i], 0.0)).collect();
            let b = critic_batch(&sel);
            (b.states, b.actions)
        });
        let stats = self.agent.actor_update(
            batch.states.view(),
            bc.as_ref().map(|(s, a)| (s.view(), a.view())),
            &mut self.rng,
        )?;
        self.agent.soft_target_update();

        let iv = &mut self.interval;
        iv.critic_loss += critic_loss;
        iv.actor_loss += stats.loss;
        iv.updates += 1;
        iv.lambda = Some(stats.lambda);
        if let Some(r) = &record {
            for (p, g) in r.gaps.iter().enumerate() {
                if r.kept.binary_search(&p).is_ok() {
                    iv.kept_gap += g;
                    iv.kept += 1;
                } else {
                    iv.rejected_gap += g;
                    iv.rejected += 1;
                }
            }
        }
        self.last_offline_batch = record;
        Ok(())
    }

    fn check_filter(&mut self, gaps: &[f64], kept: &[usize], xi: f64) {
        let log = &mut self.filter_log;
        log.minibatches += 1;
        if kept.len() != kept_count(xi, gaps.len()) {
            log.size_violations += 1;
            log::error!("filter kept {} of {} transitions at xi = {xi}", kept.len(), gaps.len());
        }
        let max_kept = kept.iter().map(|&p| gaps[p]).fold(f64::NEG_INFINITY, f64::max);
        let min_rejected = (0..gaps.len())
            .filter(|p| kept.binary_search(p).is_err())
            .map(|p| gaps[p])
            .fold(f64::INFINITY, f64::min);
        if max_kept > min_rejected {
            log.order_violations += 1;
            log::error!("filter kept gap {max_kept} above rejected gap {min_rejected}");
        }
    }

    fn record(&mut self) -> Result<MetricsRecord> {
        let mut eval_rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_e7a1_0000_0000);
        eval_rng.set_stream(self.step as u64);
        let (mean, std) = evaluate(&self.agent, &self.env, self.config.eval_episodes, &mut eval_rng)?;
        let iv = std::mem::take(&mut self.interval);
        Ok(MetricsRecord {
            step: self.step,
            eval_return_mean: mean,
            eval_return_std: std,
            critic_loss: IntervalStats::mean(iv.critic_loss, iv.updates),
            actor_loss: IntervalStats::mean(iv.actor_loss, iv.updates),
            lambda: iv.lambda.unwrap_or(f64::NAN),
            mean_kept_gap: IntervalStats::mean(iv.kept_gap, iv.kept),
            mean_rejected_gap: IntervalStats::mean(iv.rejected_gap, iv.rejected),
            buffer_size: self.buffer.len(),
        })
    }

    /// Writes a complete checkpoint under `dir/step-<N>` and points `dir/LATEST`
    /// at it. Older checkpoints are removed afterwards.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let name = format!("step-{}", self.step);
        let staging = dir.join(format!("{name}.partial"));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging)?;
        let state = SavedState {
            config: self.config.clone(),
            seed: self.seed,
            step: self.step,
            rng: self.rng.clone(),
            episode_state: self.episode_state.clone(),
            episode_t: self.episode_t,
            buffer: self.buffer.clone(),
            gaps: self.gaps.clone(),
            filter_log: self.filter_log.clone(),
            coupling: self.coupling,
            interval: self.interval.clone(),
            adam_steps: [
                self.agent.actor_opt.step_count(),
                self.agent.critic_opts[0].step_count(),
                self.agent.critic_opts[1].step_count(),
            ],
            has_online_flow: self.online_flow.is_some(),
        };
        fs::write(staging.join("state.json"), serde_json::to_vec(&state)?)?;
        let net = |name: &str, net: &DenseNet| -> Result<()> {
            let mut buf = Vec::new();
            net.write_checkpoint(&mut buf, serde_json::Value::Null)?;
            fs::write(staging.join(name), buf)?;
            Ok(())
        };
        net("actor.ckpt", &self.agent.actor.net)?;
        for k in 0..2 {
            net(&format!("critic{k}.ckpt"), &self.agent.critics[k])?;
            net(&format!("target{k}.ckpt"), &self.agent.targets[k])?;
        }
        let opts = [
            ("actor", &self.agent.actor_opt, &self.agent.actor.net),
            ("critic0", &self.agent.critic_opts[0], &self.agent.critics[0]),
            ("critic1", &self.agent.critic_opts[1], &self.agent.critics[1]),
        ];
        for (name, opt, like) in opts {
            let (m, v) = opt.moments();
            net(&format!("{name}.adam_m.ckpt"), &moments_net(m, like)?)?;
            net(&format!("{name}.adam_v.ckpt"), &moments_net(v, like)?)?;
        }
        if let Some(f) = &self.online_flow {
            let mut buf = Vec::new();
            f.write_checkpoint(&mut buf)?;
            fs::write(staging.join("online_flow.ckpt"), buf)?;
        }
        let final_dir = dir.join(&name);
        if final_dir.exists() {
            fs::remove_dir_all(&final_dir)?;
        }
        fs::rename(&staging, &final_dir)?;
        atomic_write(&dir.join("LATEST"), name.as_bytes())?;
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            let stale = path
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("step-") && n != name);
            if stale && path.is_dir() {
                fs::remove_dir_all(&path)?;
            }
        }
        Ok(final_dir)
    }

    /// Path of the newest complete checkpoint in `dir`, if any.
    pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
        let latest = dir.join("LATEST");
        if !latest.exists() {
            return Ok(None);
        }
        let name = fs::read_to_string(&latest)?;
        let path = dir.join(name.trim());
        Ok(path.is_dir().then_some(path))
    }

    /// Restores a trainer saved by [`Trainer::save_checkpoint`]. The offline
    /// data and offline flow are supplied again by the caller.
    pub fn resume(
        checkpoint: &Path,
        config: &TrainerConfig,
        pair: &EnvPair,
        offline: Vec<Transition>,
        offline_flow: Option<ConditionalFlow>,
    ) -> Result<Self> {
        let state: SavedState = serde_json::from_slice(&fs::read(checkpoint.join("state.json"))?)?;
        if &state.config != config {
            return Err(Error::invalid(format!(
                "checkpoint {} was written with a different configuration",
                checkpoint.display()
            )));
        }
        let mut tr = Trainer::new(state.config, pair, offline, offline_flow, state.seed)?;
        let net = |name: &str| -> Result<DenseNet> {
            Ok(DenseNet::read_checkpoint(&fs::read(checkpoint.join(name))?[..])?.0)
        };
        let agent_cfg = tr.agent.config.clone();
        let mut agent = Agent::from_nets(
            agent_cfg,
            net("actor.ckpt")?,
            [net("critic0.ckpt")?, net("critic1.ckpt")?],
        )?;
        agent.targets = [net("target0.ckpt")?, net("target1.ckpt")?];
        let opt = |name: &str, steps: u64, cfg: crate::nnet::AdamConfig| -> Result<Adam> {
            let m = net(&format!("{name}.adam_m.ckpt"))?;
            let v = net(&format!("{name}.adam_v.ckpt"))?;
            Ok(Adam::from_parts(
                cfg,
                steps,
                Gradients {
                    layers: m.layers().to_vec(),
                },
                Gradients {
                    layers: v.layers().to_vec(),
                },
            ))
        };
        let adam_cfg = agent.actor_opt.config;
        agent.actor_opt = opt("actor", state.adam_steps[0], adam_cfg)?;
        agent.critic_opts = [
            opt("critic0", state.adam_steps[1], adam_cfg)?,
            opt("critic1", state.adam_steps[2], adam_cfg)?,
        ];
        tr.agent = agent;
        if state.has_online_flow {
            tr.online_flow = Some(ConditionalFlow::read_checkpoint(
                &fs::read(checkpoint.join("online_flow.ckpt"))?[..],
            )?);
        }
        if state.gaps.len() != tr.offline.len() {
            return Err(Error::invalid(
                "checkpoint gap cache does not match the offline dataset size",
            ));
        }
        tr.step = state.step;
        tr.rng = state.rng;
        tr.episode_state = state.episode_state;
        tr.episode_t = state.episode_t;
        tr.buffer = state.buffer;
        tr.gaps = state.gaps;
        tr.filter_log = state.filter_log;
        tr.coupling = state.coupling;
        tr.interval = state.interval;
        Ok(tr)
    }
}

fn moments_net(g: &Gradients, like: &DenseNet) -> Result<DenseNet> {
    DenseNet::from_layers(g.layers.clone(), like.hidden_activation(), like.output_activation())
}

fn critic_batch(rows: &[(&Transition, f64)]) -> CriticBatch {
    let n = rows.len();
    let sd = rows.first().map_or(0, |r| r.0.state.len());
    let ad = rows.first().map_or(0, |r| r.0.action.len());
    CriticBatch {
        states: Array2::from_shape_fn((n, sd), |(i, j)| rows[i].0.state[j]),
        actions: Array2::from_shape_fn((n, ad), |(i, j)| rows[i].0.action[j]),
        rewards: rows.iter().map(|r| r.1).collect(),
        next_states: Array2::from_shape_fn((n, sd), |(i, j)| rows[i].0.next_state[j]),
        dones: rows.iter().map(|r| r.0.done).collect(),
    }
}

/// Trains from scratch and collects every metrics record.
pub fn run_compflow(
    pair: &EnvPair,
    offline: Vec<Transition>,
    offline_flow: Option<ConditionalFlow>,
    config: TrainerConfig,
    seed: u64,
) -> Result<(Trainer, Vec<MetricsRecord>)> {
    let mut trainer = Trainer::new(config, pair, offline, offline_flow, seed)?;
    let mut records = Vec::new();
    trainer.run(|_, r| {
        records.push(r.clone());
        Ok(())
    })?;
    Ok((trainer, records))
}
