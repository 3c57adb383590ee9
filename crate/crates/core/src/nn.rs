//! Small dense networks with hand-written forward and reverse passes.
//!
//! Everything above this module (denoisers, the autoencoder, detector heads)
//! is built from [`Mlp`]. Weights are stored row-major (`outputs × inputs`).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::normal_vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            activation,
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.bias);
        for (o, row) in out.iter_mut().zip(self.weight.chunks_exact(self.inputs)) {
            *o += dot(row, x);
        }
        if self.activation == Activation::Tanh {
            for o in out.iter_mut() {
                *o = o.tanh();
            }
        }
    }
}

/// Feed-forward stack of [`Dense`] layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Activations recorded by [`Mlp::forward_tape`]: entry 0 is the input,
/// entry `l + 1` is the output of layer `l`.
#[derive(Debug, Clone)]
pub struct Tape {
    values: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.values.last().expect("tape always holds the input")
    }

    /// Output of layer `l`.
    pub fn layer(&self, l: usize) -> &[f64] {
        &self.values[l + 1]
    }
}

/// Parameter gradient with the same layout as the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            axpy(1.0, ow, w);
            axpy(1.0, ob, b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v *= s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

impl Mlp {
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("network needs at least one layer"));
        }
        for pair in layers.windows(2) {
            Error::check_dim(pair[0].outputs, pair[1].inputs)?;
        }
        for l in &layers {
            Error::check_dim(l.inputs * l.outputs, l.weight.len())?;
            Error::check_dim(l.outputs, l.bias.len())?;
        }
        Ok(Self { layers })
    }

    /// Random network with `hidden` activation on all but the last layer.
    /// Weights are scaled by `1/sqrt(fan_in)`.
    pub fn random<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "need input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
                let scale = 1.0 / (fan_in as f64).sqrt();
                let weight = normal_vec(rng, fan_in * fan_out)
                    .into_iter()
                    .map(|w| w * scale)
                    .collect();
                Dense {
                    inputs: fan_in,
                    outputs: fan_out,
                    weight,
                    bias: vec![0.0; fan_out],
                    activation: if i + 1 == n { output } else { hidden },
                }
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim(self.input_dim(), x.len())?;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.apply(&cur, &mut next);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { layer: i });
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    pub fn forward_tape(&self, x: &[f64]) -> Result<Tape> {
        Error::check_dim(self.input_dim(), x.len())?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(x.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.apply(values.last().unwrap(), &mut out);
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { layer: i });
            }
            values.push(out);
        }
        Ok(Tape { values })
    }

    /// Reverse pass for cotangent `v` on the output. Returns `vᵀ ∂y/∂x` and,
    /// when requested, the parameter gradient of `vᵀ y`.
    pub fn backward(&self, tape: &Tape, v: &[f64], with_params: bool) -> (Vec<f64>, Option<Gradients>) {
        let n = self.layers.len();
        let mut cots: Vec<Option<&[f64]>> = vec![None; n];
        cots[n - 1] = Some(v);
        self.backward_layers(tape, &cots, with_params)
    }

    /// Reverse pass with cotangents injected at the outputs of any layers
    /// (`cots[l]` applies to the output of layer `l`).
    pub fn backward_layers(
        &self,
        tape: &Tape,
        cots: &[Option<&[f64]>],
        with_params: bool,
    ) -> (Vec<f64>, Option<Gradients>) {
        let mut grads = with_params.then(|| Gradients::zeros_like(self));
        let mut g = vec![0.0; self.output_dim()];
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if let Some(Some(c)) = cots.get(l) {
                axpy(1.0, c, &mut g);
            }
            if layer.activation == Activation::Tanh {
                for (gi, y) in g.iter_mut().zip(&tape.values[l + 1]) {
                    *gi *= 1.0 - y * y;
                }
            }
            let input = &tape.values[l];
            if let Some(grads) = grads.as_mut() {
                let (gw, gb) = &mut grads.layers[l];
                for (o, &go) in g.iter().enumerate() {
                    if go != 0.0 {
                        axpy(go, input, &mut gw[o * layer.inputs..(o + 1) * layer.inputs]);
                    }
                }
                axpy(1.0, &g, gb);
            }
            let mut gin = vec![0.0; layer.inputs];
            for (row, &go) in layer.weight.chunks_exact(layer.inputs).zip(&g) {
                if go != 0.0 {
                    axpy(go, row, &mut gin);
                }
            }
            g = gin;
        }
        (g, grads)
    }

    pub fn input_vjp(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim(self.output_dim(), v.len())?;
        let tape = self.forward_tape(x)?;
        Ok(self.backward(&tape, v, false).0)
    }

    /// In-place `θ ← θ − lr · grad`.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(&grads.layers) {
            axpy(-lr, gw, &mut layer.weight);
            axpy(-lr, gb, &mut layer.bias);
        }
    }
}

/// SGD with optional heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Option<Gradients>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) {
        if self.momentum == 0.0 {
            net.sgd_step(grads, self.lr);
            return;
        }
        let v = self.velocity.get_or_insert_with(|| Gradients::zeros_like(net));
        v.scale(self.momentum);
        v.add_assign(grads);
        net.sgd_step(v, self.lr);
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: Option<(Gradients, Gradients)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: None,
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) {
        let (m, v) = self
            .moments
            .get_or_insert_with(|| (Gradients::zeros_like(net), Gradients::zeros_like(net)));
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((layer, (gw, gb)), (mw, mb)), (vw, vb)) in net
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(m.layers.iter_mut())
            .zip(v.layers.iter_mut())
        {
            let params = layer.weight.iter_mut().chain(layer.bias.iter_mut());
            let g = gw.iter().chain(gb.iter());
            let first = mw.iter_mut().chain(mb.iter_mut());
            let second = vw.iter_mut().chain(vb.iter_mut());
            for (((p, g), m), v) in params.zip(g).zip(first).zip(second) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y ← y + a·x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}
