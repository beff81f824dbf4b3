//! Dense feed-forward networks with hand-written backpropagation and Adam.
//!
//! Networks operate on row-major batches: an input batch has shape
//! `(batch, input_dim)`. Layer `i` stores its weight matrix with shape
//! `(width[i + 1], width[i])`, so the affine map is `z = x · Wᵀ + b`.
//!
//! A forward pass that will later be differentiated goes through
//! [`DenseNet::forward_traced`], which records every layer's activations in a
//! [`Trace`]. [`DenseNet::backward`] consumes that trace together with the
//! gradient of a scalar loss with respect to the network output.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
        }
    }

    /// Multiplies `grad` in place by the activation derivative, expressed in
    /// terms of the activation output.
    fn backprop(self, out: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => Zip::from(grad).and(out).for_each(|g, &y| {
                if y <= 0.0 {
                    *g = 0.0;
                }
            }),
            Activation::Tanh => Zip::from(grad).and(out).for_each(|g, &y| *g *= 1.0 - y * y),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    widths: Vec<usize>,
    layers: Vec<DenseLayer>,
    hidden: Activation,
    output: Activation,
}

/// Activations recorded by a forward pass, consumed by [`DenseNet::backward`].
#[derive(Debug, Clone, Default)]
pub struct Trace {
    /// `activations[0]` is the input batch, `activations[i]` the output of layer `i - 1`.
    activations: Vec<Array2<f64>>,
}

impl Trace {
    pub fn output(&self) -> Option<&Array2<f64>> {
        if self.activations.len() < 2 {
            return None;
        }
        self.activations.last()
    }

    pub fn batch_size(&self) -> usize {
        self.activations.first().map_or(0, |a| a.nrows())
    }
}

/// Per-layer parameter gradients (or any parameter-shaped quantity).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<DenseLayer>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Gradients {
            layers: net
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weights: Array2::zeros(l.weights.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights *= factor;
            l.bias *= factor;
        }
    }

    /// Name of the first tensor holding a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.iter().any(|v| !v.is_finite()) {
                return Some(format!("layer {i} weights"));
            }
            if l.bias.iter().any(|v| !v.is_finite()) {
                return Some(format!("layer {i} bias"));
            }
        }
        None
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weights.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }
}

impl DenseNet {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], hidden: Activation, output: Activation, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(widths, hidden, output)?;
        for layer in &mut net.layers {
            let (fan_out, fan_in) = layer.weights.dim();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            layer.weights.mapv_inplace(|_| rng.random_range(-limit..=limit));
        }
        Ok(net)
    }

    pub fn zeros(widths: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::shape("a network needs at least input and output widths"));
        }
        if widths.contains(&0) {
            return Err(Error::shape(format!("layer widths must be positive, got {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .map(|w| DenseLayer {
                weights: Array2::zeros((w[1], w[0])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Ok(DenseNet {
            widths: widths.to_vec(),
            layers,
            hidden,
            output,
        })
    }

    pub fn from_layers(layers: Vec<DenseLayer>, hidden: Activation, output: Activation) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::shape("a network needs at least one layer"))?;
        let mut widths = vec![first.weights.ncols()];
        for (i, l) in layers.iter().enumerate() {
            if l.weights.ncols() != *widths.last().unwrap() {
                return Err(Error::shape(format!(
                    "layer {i} expects {} inputs but previous width is {}",
                    l.weights.ncols(),
                    widths.last().unwrap()
                )));
            }
            if l.bias.len() != l.weights.nrows() {
                return Err(Error::shape(format!("layer {i} bias length disagrees with weights")));
            }
            widths.push(l.weights.nrows());
        }
        Ok(DenseNet {
            widths,
            layers,
            hidden,
            output,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Zeroes the last layer so the network outputs exactly zero everywhere.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().unwrap();
        last.weights.fill(0.0);
        last.bias.fill(0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn activation_of(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape(format!(
                "network expects input width {}, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row view");
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut h = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weights.t());
            z += &layer.bias;
            self.activation_of(i).apply(&mut z);
            h = z;
        }
        Ok(h)
    }

    pub fn forward_traced(&self, x: ArrayView2<f64>) -> Result<Trace> {
        self.check_input(&x)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(x.to_owned());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = activations[i].dot(&layer.weights.t());
            z += &layer.bias;
            self.activation_of(i).apply(&mut z);
            activations.push(z);
        }
        Ok(Trace { activations })
    }

    /// Backpropagates `output_grad` (dL/d output, one row per sample) through
    /// the traced pass. Returns parameter gradients summed over the batch and
    /// the gradient with respect to the input batch.
    pub fn backward(&self, trace: &Trace, output_grad: ArrayView2<f64>) -> Result<(Gradients, Array2<f64>)> {
        if trace.activations.len() != self.layers.len() + 1 {
            return Err(Error::MissingCache);
        }
        for (i, a) in trace.activations.iter().enumerate() {
            if a.ncols() != self.widths[i] {
                return Err(Error::shape("trace was recorded by a network of different shape"));
            }
        }
        let batch = trace.batch_size();
        if output_grad.dim() != (batch, self.output_dim()) {
            return Err(Error::shape(format!(
                "output gradient has shape {:?}, expected ({batch}, {})",
                output_grad.dim(),
                self.output_dim()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = output_grad.to_owned();
        for i in (0..self.layers.len()).rev() {
            self.activation_of(i).backprop(&trace.activations[i + 1], &mut delta);
            let input = &trace.activations[i];
            let dw = delta.t().dot(input);
            let db = delta.sum_axis(Axis(0));
            let next = delta.dot(&self.layers[i].weights);
            grads.push(DenseLayer { weights: dw, bias: db });
            delta = next;
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, delta))
    }

    /// `self ← rate · source + (1 − rate) · self`, parameter-wise.
    pub fn soft_update_from(&mut self, source: &DenseNet, rate: f64) {
        for (t, s) in self.layers.iter_mut().zip(&source.layers) {
            Zip::from(&mut t.weights)
                .and(&s.weights)
                .for_each(|t, &s| *t = rate * s + (1.0 - rate) * *t);
            Zip::from(&mut t.bias)
                .and(&s.bias)
                .for_each(|t, &s| *t = rate * s + (1.0 - rate) * *t);
        }
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weights.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    /// Mutable access to the `index`-th scalar parameter in flattening order.
    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for l in &mut self.layers {
            if index < l.weights.len() {
                let cols = l.weights.ncols();
                return &mut l.weights[[index / cols, index % cols]];
            }
            index -= l.weights.len();
            if index < l.bias.len() {
                return &mut l.bias[index];
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W, meta: serde_json::Value) -> Result<()> {
        let header = CheckpointHeader {
            widths: self.widths.clone(),
            hidden: self.hidden,
            output: self.output,
            meta,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        let mut buf = Vec::with_capacity(self.num_params() * 8);
        for v in self.flatten_params() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads a checkpoint, returning the network and the header's `meta` value.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Self, serde_json::Value)> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse_err("checkpoint header line missing"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..newline])?;
        let mut net = DenseNet::zeros(&header.widths, header.hidden, header.output)?;
        let body = &bytes[newline + 1..];
        if body.len() != net.num_params() * 8 {
            return Err(parse_err(&format!(
                "checkpoint body has {} bytes, expected {}",
                body.len(),
                net.num_params() * 8
            )));
        }
        for (i, chunk) in body.chunks_exact(8).enumerate() {
            *net.param_mut(i) = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        if !net.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok((net, header.meta))
    }
}

fn parse_err(msg: &str) -> Error {
    Error::Parse {
        path: "<checkpoint>".into(),
        message: msg.into(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    widths: Vec<usize>,
    hidden: Activation,
    output: Activation,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moment accumulators for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Gradients,
    second: Gradients,
}

impl Adam {
    pub fn new(net: &DenseNet, config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            first: Gradients::zeros_like(net),
            second: Gradients::zeros_like(net),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&Gradients, &Gradients) {
        (&self.first, &self.second)
    }

    pub fn from_parts(config: AdamConfig, step: u64, first: Gradients, second: Gradients) -> Self {
        Adam {
            config,
            step,
            first,
            second,
        }
    }

    /// One bias-corrected Adam update. Rejects non-finite gradients before
    /// touching any parameter or accumulator.
    pub fn step(&mut self, net: &mut DenseNet, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != net.layers.len()
            || grads
                .layers
                .iter()
                .zip(&net.layers)
                .any(|(g, l)| g.weights.dim() != l.weights.dim() || g.bias.len() != l.bias.len())
        {
            return Err(Error::shape("gradients do not match network parameters"));
        }
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for (((layer, g), m), v) in net
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.first.layers)
            .zip(&mut self.second.layers)
        {
            Zip::from(&mut layer.weights)
                .and(&mut m.weights)
                .and(&mut v.weights)
                .and(&g.weights)
                .for_each(|p, m, v, &g| update(p, m, v, g));
            Zip::from(&mut layer.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .and(&g.bias)
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_net(w: f64, b: f64, hidden: Activation, output: Activation) -> DenseNet {
        DenseNet::from_layers(
            vec![DenseLayer {
                weights: array![[w]],
                bias: array![b],
            }],
            hidden,
            output,
        )
        .unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let net = DenseNet::from_layers(
            vec![DenseLayer {
                weights: Array2::eye(3),
                bias: Array1::zeros(3),
            }],
            Activation::Relu,
            Activation::Identity,
        )
        .unwrap();
        assert_eq!(net.forward(&[1.5, -2.0, 0.25]).unwrap(), vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn single_relu_unit() {
        let net = scalar_net(2.0, 1.0, Activation::Relu, Activation::Relu);
        assert_eq!(net.forward(&[3.0]).unwrap(), vec![7.0]);
        assert_eq!(net.forward(&[-3.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = DenseNet::zeros(&[4, 8, 8, 3], Activation::Relu, Activation::Identity).unwrap();
        assert_eq!(net.forward(&[1.0, -5.0, 3.0, 100.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn input_width_mismatch_is_rejected() {
        let net = DenseNet::zeros(&[2, 3], Activation::Relu, Activation::Identity).unwrap();
        assert!(matches!(net.forward(&[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn linear_backward() {
        let net = scalar_net(-1.5, 0.0, Activation::Relu, Activation::Identity);
        let trace = net.forward_traced(array![[3.0]].view()).unwrap();
        let (g, dx) = net.backward(&trace, array![[1.0]].view()).unwrap();
        assert_eq!(g.layers[0].weights[[0, 0]], 3.0);
        assert_eq!(g.layers[0].bias[0], 1.0);
        assert_eq!(dx[[0, 0]], -1.5);
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = DenseNet::new(&[3, 5, 2], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let trace = net.forward_traced(array![[0.3, -1.0, 2.0]].view()).unwrap();
        let (g, dx) = net.backward(&trace, Array2::zeros((1, 2)).view()).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_without_trace_is_rejected() {
        let net = DenseNet::zeros(&[2, 2], Activation::Relu, Activation::Identity).unwrap();
        let err = net.backward(&Trace::default(), Array2::zeros((1, 2)).view());
        assert!(matches!(err, Err(Error::MissingCache)));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut net = scalar_net(0.0, 0.0, Activation::Relu, Activation::Identity);
        let mut opt = Adam::new(
            &net,
            AdamConfig {
                lr: 1e-3,
                eps: 1e-12,
                ..AdamConfig::default()
            },
        );
        let mut g = Gradients::zeros_like(&net);
        g.layers[0].weights[[0, 0]] = 1.0;
        opt.step(&mut net, &g).unwrap();
        assert!((net.layers()[0].weights[[0, 0]] + 1e-3).abs() < 1e-12);
        assert_eq!(net.layers()[0].bias[0], 0.0);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adam_two_steps_match_scalar_recursion() {
        let cfg = AdamConfig {
            lr: 0.01,
            beta1: 0.8,
            beta2: 0.9,
            eps: 1e-6,
        };
        let mut net = scalar_net(0.5, 0.0, Activation::Relu, Activation::Identity);
        let mut opt = Adam::new(&net, cfg);
        let mut g = Gradients::zeros_like(&net);
        g.layers[0].weights[[0, 0]] = 0.3;
        opt.step(&mut net, &g).unwrap();
        opt.step(&mut net, &g).unwrap();

        // hand-rolled moment recursion
        let (mut theta, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = 0.8 * m + 0.2 * 0.3;
            v = 0.9 * v + 0.1 * 0.09;
            let mh = m / (1.0 - 0.8f64.powi(t));
            let vh = v / (1.0 - 0.9f64.powi(t));
            theta -= 0.01 * mh / (vh.sqrt() + 1e-6);
        }
        assert!((net.layers()[0].weights[[0, 0]] - theta).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = DenseNet::new(&[2, 4, 1], Activation::Relu, Activation::Identity, &mut rng).unwrap();
        let before = net.clone();
        let mut opt = Adam::new(&net, AdamConfig::default());
        let g = Gradients::zeros_like(&net);
        for _ in 0..5 {
            opt.step(&mut net, &g).unwrap();
        }
        assert_eq!(net, before);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut net = DenseNet::zeros(&[2, 3, 1], Activation::Relu, Activation::Identity).unwrap();
        let mut opt = Adam::new(&net, AdamConfig::default());
        let mut g = Gradients::zeros_like(&net);
        g.layers[1].bias[0] = f64::NAN;
        match opt.step(&mut net, &g) {
            Err(Error::NonFinite(name)) => assert!(name.contains("layer 1 bias")),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn checkpoint_round_trip_and_truncation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = DenseNet::new(&[3, 4, 2], Activation::Relu, Activation::Tanh, &mut rng).unwrap();
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf, serde_json::json!({"role": "test"}))
            .unwrap();
        let (back, meta) = DenseNet::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(back, net);
        assert_eq!(meta["role"], "test");
        assert!(DenseNet::read_checkpoint(&buf[..buf.len() - 3]).is_err());
    }

    #[test]
    fn soft_update_interpolates() {
        let mut target = scalar_net(0.0, 0.0, Activation::Relu, Activation::Identity);
        let source = scalar_net(1.0, 1.0, Activation::Relu, Activation::Identity);
        target.soft_update_from(&source, 0.005);
        assert!((target.layers()[0].weights[[0, 0]] - 0.005).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn param_index_matches_flattening(widths in prop::collection::vec(1usize..=5, 2..=4), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut net = DenseNet::new(&widths, Activation::Tanh, Activation::Identity, &mut rng).unwrap();
            let n = net.num_params();
            prop_assert_eq!(net.flatten_params().len(), n);
            let i = rng.random_range(0..n);
            *net.param_mut(i) = 7.5;
            let flat = net.flatten_params();
            prop_assert_eq!(flat[i], 7.5);
            prop_assert_eq!(flat.iter().filter(|&&v| v == 7.5).count(), 1);
        }

        #[test]
        fn soft_update_interpolates_any_rate(rate in 0.0f64..=1.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let source = DenseNet::new(&[3, 4, 2], Activation::Relu, Activation::Identity, &mut rng).unwrap();
            let mut target = DenseNet::new(&[3, 4, 2], Activation::Relu, Activation::Identity, &mut rng).unwrap();
            let before = target.flatten_params();
            target.soft_update_from(&source, rate);
            for ((t, b), s) in target.flatten_params().iter().zip(&before).zip(source.flatten_params()) {
                prop_assert!((t - (rate * s + (1.0 - rate) * b)).abs() <= 1e-12);
            }
        }
    }
}
