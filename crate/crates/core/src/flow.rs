//! Conditional flow matching.
//!
//! A [`ConditionalFlow`] is a velocity field `v(x, t, s, a)` over a time
//! interval, integrated with forward Euler. The offline flow lives on `[0, 1]`
//! and maps Gaussian noise to offline next states; the online flow lives on
//! `[1, 2]` and carries offline next states to online next states. Training
//! regresses the field onto straight-line displacements between coupled
//! endpoints.

use std::io::{Read, Write};

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envs::Transition;
use crate::error::{Error, Result};
use crate::nnet::{Activation, Adam, AdamConfig, DenseNet, Gradients};
use crate::ot::{self, OtSolver, TripleBatch};

pub const EXACT_MARGINAL_TOL: f64 = 1e-9;
pub const ENTROPIC_MARGINAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowArch {
    pub hidden_layers: usize,
    pub hidden_width: usize,
}

impl Default for FlowArch {
    fn default() -> Self {
        FlowArch {
            hidden_layers: 6,
            hidden_width: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowDims {
    pub x_dim: usize,
    pub s_dim: usize,
    pub a_dim: usize,
}

impl FlowDims {
    pub fn field_input(&self) -> usize {
        self.x_dim + 1 + self.s_dim + self.a_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalFlow {
    field: DenseNet,
    t_start: f64,
    t_end: f64,
    steps: usize,
    dims: FlowDims,
    frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct FlowMeta {
    t_start: f64,
    t_end: f64,
    steps: usize,
    x_dim: usize,
    s_dim: usize,
    a_dim: usize,
    frozen: bool,
}

fn field_widths(dims: FlowDims, arch: FlowArch) -> Vec<usize> {
    let mut w = vec![dims.field_input()];
    w.extend(std::iter::repeat_n(arch.hidden_width, arch.hidden_layers));
    w.push(dims.x_dim);
    w
}

impl ConditionalFlow {
    pub fn new(field: DenseNet, t_start: f64, t_end: f64, steps: usize, dims: FlowDims) -> Result<Self> {
        if !(t_end > t_start) {
            return Err(Error::invalid("flow interval must have end > start"));
        }
        if steps == 0 {
            return Err(Error::invalid("ODE step count must be at least 1"));
        }
        if field.input_dim() != dims.field_input() || field.output_dim() != dims.x_dim {
            return Err(Error::shape(format!(
                "field maps {} -> {}, expected {} -> {}",
                field.input_dim(),
                field.output_dim(),
                dims.field_input(),
                dims.x_dim
            )));
        }
        Ok(ConditionalFlow {
            field,
            t_start,
            t_end,
            steps,
            dims,
            frozen: false,
        })
    }

    /// Randomly initialized field on `[0, 1]`.
    pub fn new_offline<R: Rng + ?Sized>(dims: FlowDims, arch: FlowArch, steps: usize, rng: &mut R) -> Result<Self> {
        let field = DenseNet::new(&field_widths(dims, arch), Activation::Relu, Activation::Identity, rng)?;
        Self::new(field, 0.0, 1.0, steps, dims)
    }

    /// Field on `[1, 2]` whose output layer is zero, so the initial map is the identity.
    pub fn new_online<R: Rng + ?Sized>(dims: FlowDims, arch: FlowArch, steps: usize, rng: &mut R) -> Result<Self> {
        let mut field = DenseNet::new(&field_widths(dims, arch), Activation::Relu, Activation::Identity, rng)?;
        field.zero_output_layer();
        Self::new(field, 1.0, 2.0, steps, dims)
    }

    pub fn field(&self) -> &DenseNet {
        &self.field
    }

    pub fn field_mut(&mut self) -> &mut DenseNet {
        &mut self.field
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.t_start, self.t_end)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dims(&self) -> FlowDims {
        self.dims
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks the flow as trained; only frozen flows feed gap estimation.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    fn check_conditions(&self, n: usize, s: &ArrayView2<f64>, a: &ArrayView2<f64>) -> Result<()> {
        if s.dim() != (n, self.dims.s_dim) || a.dim() != (n, self.dims.a_dim) {
            return Err(Error::shape(format!(
                "conditions have shapes {:?} and {:?}, expected ({n}, {}) and ({n}, {})",
                s.dim(),
                a.dim(),
                self.dims.s_dim,
                self.dims.a_dim
            )));
        }
        Ok(())
    }

    fn field_input(&self, x: ArrayView2<f64>, t: &[f64], s: ArrayView2<f64>, a: ArrayView2<f64>) -> Array2<f64> {
        let n = x.nrows();
        let FlowDims { x_dim, s_dim, a_dim } = self.dims;
        let mut input = Array2::zeros((n, self.dims.field_input()));
        input.slice_mut(s![.., ..x_dim]).assign(&x);
        for (row, &ti) in t.iter().enumerate() {
            input[[row, x_dim]] = ti;
        }
        input.slice_mut(s![.., x_dim + 1..x_dim + 1 + s_dim]).assign(&s);
        input
            .slice_mut(s![.., x_dim + 1 + s_dim..x_dim + 1 + s_dim + a_dim])
            .assign(&a);
        input
    }

    pub fn velocity(
        &self,
        x: ArrayView2<f64>,
        t: &[f64],
        s: ArrayView2<f64>,
        a: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        let n = x.nrows();
        if x.ncols() != self.dims.x_dim || t.len() != n {
            return Err(Error::shape("velocity query has inconsistent shapes"));
        }
        self.check_conditions(n, &s, &a)?;
        self.field.forward_batch(self.field_input(x, t, s, a).view())
    }

    /// Forward Euler over the flow's interval, one row per sample.
    pub fn integrate_batch(
        &self,
        x_start: ArrayView2<f64>,
        s: ArrayView2<f64>,
        a: ArrayView2<f64>,
    ) -> Result<Array2<f64>> {
        let n = x_start.nrows();
        if x_start.ncols() != self.dims.x_dim {
            return Err(Error::shape(format!(
                "start points have width {}, expected {}",
                x_start.ncols(),
                self.dims.x_dim
            )));
        }
        self.check_conditions(n, &s, &a)?;
        let h = (self.t_end - self.t_start) / self.steps as f64;
        let mut x = x_start.to_owned();
        let mut t = vec![0.0; n];
        for step in 0..self.steps {
            t.fill(self.t_start + step as f64 * h);
            let v = self.field.forward_batch(self.field_input(x.view(), &t, s, a).view())?;
            x.scaled_add(h, &v);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("flow state after Euler step {step}")));
            }
        }
        Ok(x)
    }

    pub fn integrate(&self, x_start: &[f64], s: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        let row = |v: &[f64]| Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row");
        let out = self.integrate_batch(row(x_start).view(), row(s).view(), row(a).view())?;
        Ok(out.into_raw_vec_and_offset().0)
    }

    pub fn write_checkpoint<W: Write>(&self, w: W) -> Result<()> {
        let meta = FlowMeta {
            t_start: self.t_start,
            t_end: self.t_end,
            steps: self.steps,
            x_dim: self.dims.x_dim,
            s_dim: self.dims.s_dim,
            a_dim: self.dims.a_dim,
            frozen: self.frozen,
        };
        self.field.write_checkpoint(w, serde_json::to_value(meta)?)
    }

    pub fn read_checkpoint<R: Read>(r: R) -> Result<Self> {
        let (field, meta) = DenseNet::read_checkpoint(r)?;
        let meta: FlowMeta = serde_json::from_value(meta)?;
        let dims = FlowDims {
            x_dim: meta.x_dim,
            s_dim: meta.s_dim,
            a_dim: meta.a_dim,
        };
        let mut flow = Self::new(field, meta.t_start, meta.t_end, meta.steps, dims)?;
        flow.frozen = meta.frozen;
        Ok(flow)
    }
}

/// The offline flow followed by the online flow.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeFlow {
    pub offline: ConditionalFlow,
    pub online: ConditionalFlow,
}

impl CompositeFlow {
    pub fn new(offline: ConditionalFlow, online: ConditionalFlow) -> Result<Self> {
        if offline.interval() != (0.0, 1.0) || online.interval() != (1.0, 2.0) {
            return Err(Error::invalid(
                "composite flow needs an offline flow on [0,1] and an online flow on [1,2]",
            ));
        }
        if offline.dims != online.dims {
            return Err(Error::shape("offline and online flows disagree on dimensions"));
        }
        Ok(CompositeFlow { offline, online })
    }

    pub fn latent_dim(&self) -> usize {
        self.offline.dims.x_dim
    }

    pub fn is_frozen(&self) -> bool {
        self.offline.frozen && self.online.frozen
    }

    /// Returns `(x1, x2)`: the offline sample and its online image.
    pub fn transport(
        &self,
        latent: ArrayView2<f64>,
        s: ArrayView2<f64>,
        a: ArrayView2<f64>,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        let x1 = self.offline.integrate_batch(latent, s, a)?;
        let x2 = self.online.integrate_batch(x1.view(), s, a)?;
        Ok((x1, x2))
    }
}

/// A flow-matching regression batch. `t` must lie inside the flow interval.
#[derive(Debug, Clone, PartialEq)]
pub struct FmBatch {
    pub x_start: Array2<f64>,
    pub x_end: Array2<f64>,
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub t: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FmBatchLoss {
    pub loss: f64,
    pub batch_size: usize,
    pub times: Vec<f64>,
}

/// Point on the straight path from `x_start` (at `t_start`) to `x_end` (at `t_end`).
pub fn interpolate(x_start: ArrayView2<f64>, x_end: ArrayView2<f64>, t: &[f64], interval: (f64, f64)) -> Array2<f64> {
    let (t0, t1) = interval;
    let len = t1 - t0;
    let mut out = Array2::zeros(x_start.raw_dim());
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        let w_end = (t[i] - t0) / len;
        let w_start = (t1 - t[i]) / len;
        for j in 0..row.len() {
            row[j] = w_start * x_start[[i, j]] + w_end * x_end[[i, j]];
        }
    }
    out
}

/// Mean over the batch of `‖v(x_t, t, s, a) − (x_end − x_start)/L‖²` and its
/// parameter gradients, where `L` is the interval length.
pub fn fm_loss(flow: &ConditionalFlow, batch: &FmBatch) -> Result<(FmBatchLoss, Gradients)> {
    let n = batch.x_start.nrows();
    if batch.x_end.dim() != batch.x_start.dim() || batch.t.len() != n {
        return Err(Error::shape("flow-matching batch columns disagree"));
    }
    if n == 0 {
        return Err(Error::invalid("flow-matching batch is empty"));
    }
    let (t0, t1) = flow.interval();
    if let Some(t) = batch.t.iter().find(|t| !(**t >= t0 && **t <= t1)) {
        return Err(Error::invalid(format!(
            "time {t} lies outside the flow interval [{t0}, {t1}]"
        )));
    }
    flow.check_conditions(n, &batch.states.view(), &batch.actions.view())?;
    let xt = interpolate(batch.x_start.view(), batch.x_end.view(), &batch.t, (t0, t1));
    let input = flow.field_input(xt.view(), &batch.t, batch.states.view(), batch.actions.view());
    let trace = flow.field.forward_traced(input.view())?;
    let out = trace.output().expect("traced output");
    let target = (&batch.x_end - &batch.x_start) / (t1 - t0);
    let residual = out - &target;
    let loss = residual.iter().map(|r| r * r).sum::<f64>() / n as f64;
    let grad_out = residual * (2.0 / n as f64);
    let (grads, _) = flow.field.backward(&trace, grad_out.view())?;
    Ok((
        FmBatchLoss {
            loss,
            batch_size: n,
            times: batch.t.clone(),
        },
        grads,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowTrainConfig {
    pub arch: FlowArch,
    pub batch_size: usize,
    pub iterations: usize,
    pub lr: f64,
    pub ode_steps: usize,
    pub eta: f64,
    pub solver: SolverChoice,
}

/// Serializable solver selection; see [`OtSolver`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SolverChoice {
    Exact,
    Entropic { epsilon: f64, max_iters: usize },
}

impl SolverChoice {
    pub fn solver(&self) -> OtSolver {
        match *self {
            SolverChoice::Exact => OtSolver::Exact,
            SolverChoice::Entropic { epsilon, max_iters } => OtSolver::Entropic {
                epsilon,
                max_iters,
                marginal_tol: ENTROPIC_MARGINAL_TOL,
            },
        }
    }

    pub fn marginal_tol(&self) -> f64 {
        match self {
            SolverChoice::Exact => EXACT_MARGINAL_TOL,
            SolverChoice::Entropic { .. } => ENTROPIC_MARGINAL_TOL,
        }
    }
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        FlowTrainConfig {
            arch: FlowArch::default(),
            batch_size: 1024,
            iterations: 5000,
            lr: 3e-4,
            ode_steps: 10,
            eta: 10.0,
            solver: SolverChoice::Exact,
        }
    }
}

/// Running record of every coupling computed during online-flow training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CouplingAudit {
    pub checked: usize,
    pub violations: usize,
    pub max_violation: f64,
}

impl CouplingAudit {
    pub fn record(&mut self, violation: f64, tol: f64) {
        self.checked += 1;
        if !(violation <= tol) {
            self.violations += 1;
            log::warn!("coupling marginal violation {violation:e} exceeds {tol:e}");
        }
        self.max_violation = self.max_violation.max(violation);
    }

    pub fn merge(&mut self, other: &CouplingAudit) {
        self.checked += other.checked;
        self.violations += other.violations;
        self.max_violation = self.max_violation.max(other.max_violation);
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub coupling: CouplingAudit,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

pub fn transition_dims(data: &[Transition]) -> Result<FlowDims> {
    let first = data.first().ok_or_else(|| Error::invalid("dataset is empty"))?;
    Ok(FlowDims {
        x_dim: first.next_state.len(),
        s_dim: first.state.len(),
        a_dim: first.action.len(),
    })
}

/// Uniform minibatch indices: distinct when the data allow it, otherwise with replacement.
pub fn sample_indices<R: Rng + ?Sized>(len: usize, k: usize, rng: &mut R) -> Vec<usize> {
    if k <= len {
        index::sample(rng, len, k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..len)).collect()
    }
}

fn gather<F: Fn(&Transition) -> &[f64]>(data: &[Transition], idx: &[usize], width: usize, field: F) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), width));
    for (row, &i) in idx.iter().enumerate() {
        for (j, v) in field(&data[i]).iter().enumerate() {
            out[[row, j]] = *v;
        }
    }
    out
}

pub fn gather_triples(data: &[Transition], idx: &[usize]) -> Result<TripleBatch> {
    let dims = transition_dims(data)?;
    Ok(TripleBatch {
        states: gather(data, idx, dims.s_dim, |t| &t.state),
        actions: gather(data, idx, dims.a_dim, |t| &t.action),
        next_states: gather(data, idx, dims.x_dim, |t| &t.next_state),
    })
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

fn check_flow_config(config: &FlowTrainConfig) -> Result<()> {
    if config.batch_size == 0 {
        return Err(Error::invalid("flow batch size must be positive"));
    }
    if !(config.lr > 0.0) {
        return Err(Error::invalid("flow learning rate must be positive"));
    }
    Ok(())
}

/// Noise-to-data flow matching on `(s, a, s')` data (x₀ ~ N(0, I), x₁ = s').
pub fn fit_noise_to_data<R: Rng + ?Sized>(
    flow: &mut ConditionalFlow,
    data: &[Transition],
    config: &FlowTrainConfig,
    rng: &mut R,
) -> Result<TrainReport> {
    check_flow_config(config)?;
    let dims = transition_dims(data)?;
    if dims != flow.dims {
        return Err(Error::shape("dataset dimensions disagree with the flow"));
    }
    let (t0, t1) = flow.interval();
    let mut opt = Adam::new(
        &flow.field,
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    let mut report = TrainReport::default();
    for _ in 0..config.iterations {
        let idx = sample_indices(data.len(), config.batch_size, rng);
        let triples = gather_triples(data, &idx)?;
        let k = idx.len();
        let x_start = gaussian_matrix(k, dims.x_dim, rng);
        let t: Vec<f64> = (0..k).map(|_| rng.random_range(t0..t1)).collect();
        let batch = FmBatch {
            x_start,
            x_end: triples.next_states,
            states: triples.states,
            actions: triples.actions,
            t,
        };
        let (loss, grads) = fm_loss(flow, &batch)?;
        opt.step(&mut flow.field, &grads)?;
        report.losses.push(loss.loss);
    }
    Ok(report)
}

/// Offline flow on `[0, 1]`, trained and frozen.
pub fn train_offline_flow<R: Rng + ?Sized>(
    data: &[Transition],
    config: &FlowTrainConfig,
    rng: &mut R,
) -> Result<(ConditionalFlow, TrainReport)> {
    let dims = transition_dims(data)?;
    let mut flow = ConditionalFlow::new_offline(dims, config.arch, config.ode_steps, rng)?;
    let report = fit_noise_to_data(&mut flow, data, config, rng)?;
    flow.freeze();
    Ok((flow, report))
}

/// Baseline: noise-to-data flow fit directly on the online data.
pub fn train_direct_flow<R: Rng + ?Sized>(
    online: &[Transition],
    config: &FlowTrainConfig,
    rng: &mut R,
) -> Result<(ConditionalFlow, TrainReport)> {
    train_offline_flow(online, config, rng)
}

/// Offline-synthetic batch sharing the online `(s, a)` marginal: `(s, a)` are
/// drawn from `online` and `s'` is generated by the offline flow.
pub fn build_matched_offline_batch<R: Rng + ?Sized>(
    offline: &ConditionalFlow,
    online: &[Transition],
    k: usize,
    rng: &mut R,
) -> Result<TripleBatch> {
    let dims = offline.dims;
    if k == 0 {
        return Ok(TripleBatch {
            states: Array2::zeros((0, dims.s_dim)),
            actions: Array2::zeros((0, dims.a_dim)),
            next_states: Array2::zeros((0, dims.x_dim)),
        });
    }
    if online.len() < k {
        return Err(Error::invalid(format!(
            "online buffer holds {} transitions, fewer than the batch size {k}",
            online.len()
        )));
    }
    let idx = index::sample(rng, online.len(), k).into_vec();
    let mut triples = gather_triples(online, &idx)?;
    let latent = gaussian_matrix(k, dims.x_dim, rng);
    triples.next_states = offline.integrate_batch(latent.view(), triples.states.view(), triples.actions.view())?;
    Ok(triples)
}

/// Online-flow training on augmented-cost OT couplings between offline-synthetic
/// and online batches. The field is conditioned on the online pair's `(s, a)`.
pub fn fit_online<R: Rng + ?Sized>(
    online_flow: &mut ConditionalFlow,
    offline: &ConditionalFlow,
    online: &[Transition],
    config: &FlowTrainConfig,
    rng: &mut R,
) -> Result<TrainReport> {
    check_flow_config(config)?;
    if !(config.eta >= 0.0) {
        return Err(Error::invalid("eta must be >= 0"));
    }
    let dims = transition_dims(online)?;
    if dims != online_flow.dims || dims != offline.dims {
        return Err(Error::shape(
            "online data, offline flow and online flow disagree on dimensions",
        ));
    }
    let (t0, t1) = online_flow.interval();
    let solver = config.solver.solver();
    let tol = config.solver.marginal_tol();
    let k = config.batch_size.min(online.len());
    let mut opt = Adam::new(
        &online_flow.field,
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    let mut report = TrainReport::default();
    for _ in 0..config.iterations {
        let synthetic = build_matched_offline_batch(offline, online, k, rng)?;
        let on_idx = index::sample(rng, online.len(), k).into_vec();
        let real = gather_triples(online, &on_idx)?;
        let cost = ot::augmented_cost_matrix(&synthetic, &real, config.eta)?;
        let coupling = solver.solve(&cost)?;
        report.coupling.record(coupling.marginal_violation(), tol);
        let pairs = ot::sample_pairs(&coupling, k, rng);
        let t: Vec<f64> = (0..k).map(|_| rng.random_range(t0..t1)).collect();
        let pick = |m: &Array2<f64>, rows: Vec<usize>| m.select(Axis(0), &rows);
        let (is, js): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let batch = FmBatch {
            x_start: pick(&synthetic.next_states, is),
            x_end: pick(&real.next_states, js.clone()),
            states: pick(&real.states, js.clone()),
            actions: pick(&real.actions, js),
            t,
        };
        let (loss, grads) = fm_loss(online_flow, &batch)?;
        opt.step(&mut online_flow.field, &grads)?;
        report.losses.push(loss.loss);
    }
    Ok(report)
}

/// Online flow on `[1, 2]`. Starts from `init` when given (warm start),
/// otherwise from the identity map. Returns a frozen flow.
pub fn train_online_flow<R: Rng + ?Sized>(
    offline: &ConditionalFlow,
    online: &[Transition],
    init: Option<&ConditionalFlow>,
    config: &FlowTrainConfig,
    rng: &mut R,
) -> Result<(ConditionalFlow, TrainReport)> {
    let dims = transition_dims(online)?;
    let mut flow = match init {
        Some(f) => {
            let mut f = f.clone();
            f.frozen = false;
            f
        }
        None => ConditionalFlow::new_online(dims, config.arch, config.ode_steps, rng)?,
    };
    let report = fit_online(&mut flow, offline, online, config, rng)?;
    flow.freeze();
    Ok((flow, report))
}

/// Draws one generated next state per `(s, a)` row from noise through `flows`
/// applied in order.
pub fn generate_next_states<R: Rng + ?Sized>(
    flows: &[&ConditionalFlow],
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let first = flows.first().ok_or_else(|| Error::invalid("no flows given"))?;
    let mut x = gaussian_matrix(states.nrows(), first.dims.x_dim, rng);
    for f in flows {
        x = f.integrate_batch(x.view(), states, actions)?;
    }
    Ok(x)
}

/// Mean squared error (summed over coordinates) between generated and logged
/// next states on `data`.
pub fn heldout_mse<R: Rng + ?Sized>(flows: &[&ConditionalFlow], data: &[Transition], rng: &mut R) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let triples = gather_triples(data, &idx)?;
    let generated = generate_next_states(flows, triples.states.view(), triples.actions.view(), rng)?;
    let diff = generated - &triples.next_states;
    Ok(diff.iter().map(|d| d * d).sum::<f64>() / data.len() as f64)
}

/// Noise-to-data flow-matching loss of `flow` over every row of `data`.
pub fn heldout_fm_loss<R: Rng + ?Sized>(flow: &ConditionalFlow, data: &[Transition], rng: &mut R) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let triples = gather_triples(data, &idx)?;
    let (t0, t1) = flow.interval();
    let batch = FmBatch {
        x_start: gaussian_matrix(idx.len(), flow.dims.x_dim, rng),
        x_end: triples.next_states,
        states: triples.states,
        actions: triples.actions,
        t: (0..idx.len()).map(|_| rng.random_range(t0..t1)).collect(),
    };
    Ok(fm_loss(flow, &batch)?.0.loss)
}
