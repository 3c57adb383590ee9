use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{GaussianMixture, ScoreModel};
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, Gradients, Mlp, Tape};
use crate::rng::{normal_vec, stream};
use crate::sde::{DiffusionSchedule, T_MIN};

/// Tanh MLP predicting `ε` from `[x, t, sqrt(1 − ᾱ(t))]`.
///
/// With `sigma_data` set, the prediction is preconditioned:
/// `ε̂ = p(t)·x + q(t)·F(r(t)·x, t)` where `p x` is the noise prediction of
/// a zero-mean Gaussian with per-coordinate variance `sigma_data²`,
/// `r = 1/sqrt(σ² + ᾱ σ_d²)` normalizes the input and
/// `q = −σ_d sqrt(ᾱ) r` scales the learned correction `F`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserNet {
    dim: usize,
    mlp: Mlp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma_data: Option<f64>,
}

/// Output transform coefficients `(p, q, r)`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Precond {
    p: f64,
    q: f64,
    r: f64,
}

impl DenoiserNet {
    pub const TIME_FEATURES: usize = 2;

    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![dim + Self::TIME_FEATURES];
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        Self {
            dim,
            mlp: Mlp::random(&sizes, Activation::Tanh, Activation::Identity, rng),
            sigma_data: None,
        }
    }

    /// Switches on the preconditioned parameterization.
    pub fn preconditioned(mut self, sigma_data: f64) -> Result<Self> {
        if !(sigma_data > 0.0 && sigma_data.is_finite()) {
            return Err(Error::config("sigma_data must be positive"));
        }
        self.sigma_data = Some(sigma_data);
        Ok(self)
    }

    pub fn sigma_data(&self) -> Option<f64> {
        self.sigma_data
    }

    fn precond(&self, t: f64, schedule: &DiffusionSchedule) -> Precond {
        match self.sigma_data {
            None => Precond { p: 0.0, q: 1.0, r: 1.0 },
            Some(sd) => {
                let ab = schedule.alpha_bar_at(t.max(T_MIN));
                let s2 = 1.0 - ab;
                let denom = s2 + ab * sd * sd;
                let r = 1.0 / denom.sqrt();
                Precond {
                    p: s2.sqrt() / denom,
                    q: -sd * ab.sqrt() * r,
                    r,
                }
            }
        }
    }

    pub fn from_mlp(dim: usize, mlp: Mlp) -> Result<Self> {
        Error::check_dim(dim + Self::TIME_FEATURES, mlp.input_dim())?;
        Error::check_dim(dim, mlp.output_dim())?;
        Ok(Self {
            dim,
            mlp,
            sigma_data: None,
        })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    fn features(&self, x: &[f64], t: f64, schedule: &DiffusionSchedule, r: f64) -> Result<Vec<f64>> {
        Error::check_dim(self.dim, x.len())?;
        let mut input = Vec::with_capacity(self.dim + Self::TIME_FEATURES);
        input.extend(x.iter().map(|v| r * v));
        input.push(t);
        input.push(schedule.sigma(t));
        Ok(input)
    }

    fn tape(&self, x: &[f64], t: f64, schedule: &DiffusionSchedule) -> Result<(Tape, Precond)> {
        let c = self.precond(t, schedule);
        Ok((self.mlp.forward_tape(&self.features(x, t, schedule, c.r)?)?, c))
    }

    fn combine(x: &[f64], out: &[f64], c: Precond) -> Vec<f64> {
        x.iter().zip(out).map(|(x, f)| c.p * x + c.q * f).collect()
    }

    /// Forward pass (`net_eps`).
    pub fn net_eps(&self, x: &[f64], t: f64, schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
        let (tape, c) = self.tape(x, t, schedule)?;
        Ok(Self::combine(x, tape.output(), c))
    }

    /// `vᵀ ∂ε̂/∂x` from a recorded tape.
    fn input_cotangent(&self, tape: &Tape, c: Precond, v: &[f64], with_params: bool) -> (Vec<f64>, Option<Gradients>) {
        let scaled: Vec<f64> = v.iter().map(|v| c.q * v).collect();
        let (mut dx, grads) = self.mlp.backward(tape, &scaled, with_params);
        dx.truncate(self.dim);
        for (d, v) in dx.iter_mut().zip(v) {
            *d = c.r * *d + c.p * v;
        }
        (dx, grads)
    }

    /// Reverse pass (`net_vjp`): input cotangent restricted to the `x`
    /// columns and the parameter gradient of `vᵀ ε_θ`.
    pub fn net_vjp(
        &self,
        x: &[f64],
        t: f64,
        schedule: &DiffusionSchedule,
        v: &[f64],
    ) -> Result<(Vec<f64>, Gradients)> {
        Error::check_dim(self.dim, v.len())?;
        let (tape, c) = self.tape(x, t, schedule)?;
        let (dx, grads) = self.input_cotangent(&tape, c, v, true);
        Ok((dx, grads.expect("requested parameter gradients")))
    }
}

impl ScoreModel for DenoiserNet {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eps(&self, x: &[f64], t: f64, schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
        self.net_eps(x, t, schedule)
    }

    fn eps_vjp(&self, x: &[f64], t: f64, schedule: &DiffusionSchedule, v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.eps_and_vjp(x, t, schedule, v)?.1)
    }

    fn eps_and_vjp(
        &self,
        x: &[f64],
        t: f64,
        schedule: &DiffusionSchedule,
        v: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        Error::check_dim(self.dim, v.len())?;
        let (tape, c) = self.tape(x, t, schedule)?;
        let (dx, _) = self.input_cotangent(&tape, c, v, false);
        Ok((Self::combine(x, tape.output(), c), dx))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserTrainConfig {
    pub batch: usize,
    pub lr: f64,
    pub iters: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `0` disables.
    pub clip: f64,
    pub optimizer: Optimizer,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    Sgd,
    #[default]
    Adam,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        Self {
            batch: 64,
            lr: 2e-3,
            iters: 3000,
            seed: 0,
            clip: 5.0,
            optimizer: Optimizer::Adam,
        }
    }
}

impl From<usize> for DenoiserTrainConfig {
    /// Default configuration with `iters` steps.
    fn from(iters: usize) -> Self {
        Self {
            iters,
            ..Self::default()
        }
    }
}

/// Where clean training samples `x0` come from.
#[derive(Debug, Clone, Copy)]
pub enum TrainingSource<'a> {
    Mixture(&'a GaussianMixture),
    /// Resampled uniformly with replacement.
    Empirical(&'a [Vec<f64>]),
}

impl TrainingSource<'_> {
    fn dim(&self) -> Option<usize> {
        match self {
            TrainingSource::Mixture(m) => Some(m.dim()),
            TrainingSource::Empirical(xs) => xs.first().map(Vec::len),
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            TrainingSource::Mixture(m) => m.sample(rng),
            TrainingSource::Empirical(xs) => xs[rng.random_range(0..xs.len())].clone(),
        }
    }
}

/// Denoising score matching with plain SGD:
/// minimizes the per-coordinate mean of `‖ε − ε_θ(sqrt(ᾱ) x0 + sqrt(1 − ᾱ) ε, t)‖²`
/// with `t ~ U[T_MIN, 1]`. Returns the trained net and the per-iteration loss.
pub fn train_denoiser(
    mut net: DenoiserNet,
    source: TrainingSource<'_>,
    config: &DenoiserTrainConfig,
    schedule: &DiffusionSchedule,
) -> Result<(DenoiserNet, Vec<f64>)> {
    if config.batch == 0 || config.iters == 0 || !(config.lr >= 0.0) {
        return Err(Error::config("denoiser training needs positive batch and iters, lr >= 0"));
    }
    match source.dim() {
        Some(d) => Error::check_dim(net.dim, d)?,
        None => return Err(Error::EmptyDataset),
    }
    let mut rng = stream(config.seed, 0xD5);
    let d = net.dim;
    let mut trace = Vec::with_capacity(config.iters);
    let mut adam = Adam::new(config.lr);
    for iter in 0..config.iters {
        let mut grads = Gradients::zeros_like(&net.mlp);
        let mut loss = 0.0;
        for _ in 0..config.batch {
            let x0 = source.draw(&mut rng);
            let t = rng.random_range(T_MIN..=1.0);
            let noise = normal_vec(&mut rng, d);
            let ab = schedule.alpha_bar(t)?;
            let (sa, s) = (ab.sqrt(), (1.0 - ab).sqrt());
            let xt: Vec<f64> = x0.iter().zip(&noise).map(|(x, n)| sa * x + s * n).collect();
            let (tape, c) = net.tape(&xt, t, schedule)?;
            let pred = DenoiserNet::combine(&xt, tape.output(), c);
            let resid: Vec<f64> = pred.iter().zip(&noise).map(|(p, n)| p - n).collect();
            loss += resid.iter().map(|r| r * r).sum::<f64>() / d as f64;
            let cot: Vec<f64> = resid.iter().map(|r| 2.0 * c.q * r / d as f64).collect();
            let (_, g) = net.mlp.backward(&tape, &cot, true);
            grads.add_assign(&g.expect("parameter gradients"));
        }
        loss /= config.batch as f64;
        if !loss.is_finite() || loss > 1e3 {
            return Err(Error::Divergence { iter, loss });
        }
        trace.push(loss);
        grads.scale(1.0 / config.batch as f64);
        if config.clip > 0.0 {
            let n = grads.norm();
            if n > config.clip {
                grads.scale(config.clip / n);
            }
        }
        match config.optimizer {
            Optimizer::Sgd => net.mlp.sgd_step(&grads, config.lr),
            Optimizer::Adam => adam.step(&mut net.mlp, &grads),
        }
    }
    Ok((net, trace))
}
