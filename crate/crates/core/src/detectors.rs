//! Reconstruction-based detectors: three feature extractors, their heads,
//! training and evaluation.
//!
//! - DIRE: `|x − Ψ_rec(Ψ_inv(x))|` under the bound generator's score model.
//! - LaRE²: averaged squared single-step noise-prediction error of a latent
//!   denoiser on `E(x)`. The classifier sees `x` together with the error map
//!   decoded into data space.
//! - AEROBLADE: perceptual distance between `x` and `D(E(x))`, thresholded.
//!
//! Every head produces a logit; positive means fake.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{input_gradient, GradMode, GradRequest};
use crate::autoencoder::AutoEncoder;
use crate::error::{Error, Result};
use crate::nn::{Activation, Gradients, Mlp, Sgd};
use crate::rng::{normal_vec, stream};
use crate::score::{
    train_denoiser, DenoiserNet, DenoiserTrainConfig, ScoreBackbone, ScoreModel, TrainingSource,
};
use crate::sde::{round_trip, DataPoint, DiffusionSchedule, T_MIN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    /// BCE target: real 0, fake 1.
    pub fn target(self) -> f64 {
        match self {
            Label::Real => 0.0,
            Label::Fake => 1.0,
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Real => Label::Fake,
            Label::Fake => Label::Real,
        }
    }

    pub fn from_logit(logit: f64) -> Label {
        if logit > 0.0 {
            Label::Fake
        } else {
            Label::Real
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Real => "real",
            Label::Fake => "fake",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Dire,
    Lare2,
    Aeroblade,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 3] = [DetectorKind::Dire, DetectorKind::Lare2, DetectorKind::Aeroblade];

    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Dire => "dire",
            DetectorKind::Lare2 => "lare2",
            DetectorKind::Aeroblade => "aeroblade",
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DetectorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown detector kind '{s}'")))
    }
}

/// Samples with labels. Ids are positions unless set explicitly.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub ids: Vec<u64>,
    pub samples: Vec<DataPoint>,
    pub labels: Vec<Label>,
}

impl LabeledDataset {
    pub fn new(samples: Vec<DataPoint>, labels: Vec<Label>) -> Result<Self> {
        let ids = (0..samples.len() as u64).collect();
        Self::with_ids(ids, samples, labels)
    }

    pub fn with_ids(ids: Vec<u64>, samples: Vec<DataPoint>, labels: Vec<Label>) -> Result<Self> {
        if samples.len() != labels.len() || ids.len() != labels.len() {
            return Err(Error::config("samples, labels and ids must have equal length"));
        }
        if let Some(d) = samples.first().map(DataPoint::dim) {
            for s in &samples {
                Error::check_dim(d, s.dim())?;
            }
        }
        Ok(Self { ids, samples, labels })
    }

    /// Interleaved real/fake dataset with ids `0..2n`.
    pub fn from_classes(real: Vec<DataPoint>, fake: Vec<DataPoint>) -> Result<Self> {
        let mut samples = Vec::with_capacity(real.len() + fake.len());
        let mut labels = Vec::with_capacity(samples.capacity());
        let mut real = real.into_iter();
        let mut fake = fake.into_iter();
        loop {
            let (r, f) = (real.next(), fake.next());
            if r.is_none() && f.is_none() {
                break;
            }
            if let Some(r) = r {
                samples.push(r);
                labels.push(Label::Real);
            }
            if let Some(f) = f {
                samples.push(f);
                labels.push(Label::Fake);
            }
        }
        Self::new(samples, labels)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.samples.first().map(DataPoint::dim)
    }

    /// `(real, fake)` counts.
    pub fn counts(&self) -> (usize, usize) {
        let fake = self.labels.iter().filter(|l| **l == Label::Fake).count();
        (self.len() - fake, fake)
    }

    pub fn is_balanced(&self) -> bool {
        let (r, f) = self.counts();
        r == f
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Balanced subset of `per_class` samples from each class, in original
    /// order.
    pub fn balanced_head(&self, per_class: usize) -> Result<Self> {
        let mut taken = [0usize; 2];
        let mut idx = Vec::new();
        for (i, l) in self.labels.iter().enumerate() {
            let slot = &mut taken[(*l == Label::Fake) as usize];
            if *slot < per_class {
                *slot += 1;
                idx.push(i);
            }
        }
        if taken != [per_class; 2] {
            return Err(Error::config(format!(
                "dataset has {} real and {} fake samples, {per_class} per class requested",
                self.counts().0,
                self.counts().1
            )));
        }
        Ok(self.subset(&idx))
    }

    /// Replaces samples, keeping ids and labels.
    pub fn with_samples(&self, samples: Vec<DataPoint>) -> Result<Self> {
        Self::with_ids(self.ids.clone(), samples, self.labels.clone())
    }

    fn require_both_classes(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (r, f) = self.counts();
        if r == 0 || f == 0 {
            return Err(Error::config("dataset contains a single class"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Extraction settings shared by all kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// DDIM steps of the DIRE round trip.
    pub steps: usize,
    /// Noising time of the LaRE² single step.
    pub lare_t: f64,
    /// Noise draws averaged by LaRE².
    pub lare_draws: usize,
    pub lare_seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            lare_t: 0.1,
            lare_draws: 8,
            lare_seed: 0,
        }
    }
}

impl FeatureConfig {
    fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.lare_draws == 0 {
            return Err(Error::config("feature config needs steps >= 1 and lare_draws >= 1"));
        }
        if !(T_MIN..=1.0).contains(&self.lare_t) {
            return Err(Error::TimeDomain(self.lare_t));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub extractor: DetectorKind,
    /// Generator whose backbone produced the feature.
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Backbone {
    Dire { model: ScoreBackbone },
    Lare2 { ae: AutoEncoder, latent: DenoiserNet },
    Aeroblade { ae: AutoEncoder },
}

/// `φ = |x − Ψ_rec(Ψ_inv(x))|`.
pub fn feature_dire(x: &DataPoint, model: &dyn ScoreModel, schedule: &DiffusionSchedule, steps: usize) -> Result<Vec<f64>> {
    let rec = round_trip(x, steps, model, schedule)?;
    Ok(x.iter().zip(rec.iter()).map(|(a, b)| (a - b).abs()).collect())
}

/// The `e` noise draws shared by every input of one LaRE² extractor.
pub fn lare_draws(latent_dim: usize, draws: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..draws as u64).map(|i| normal_vec(&mut stream(seed, i), latent_dim)).collect()
}

/// Averaged squared noise-prediction error `(1/e) Σ L_i ⊙ L_i` of `model` at
/// the latent `z`, with `L_i = ε_i − ε_θ(sqrt(ᾱ) z + sqrt(1 − ᾱ) ε_i, t)`.
pub fn feature_lare(
    z: &[f64],
    model: &dyn ScoreModel,
    schedule: &DiffusionSchedule,
    t: f64,
    draws: &[Vec<f64>],
) -> Result<Vec<f64>> {
    Ok(lare_residuals(z, model, schedule, t, draws)?.0)
}

type LareForward = (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>);

/// `(φ, residuals L_i, noised inputs)`.
fn lare_residuals(
    z: &[f64],
    model: &dyn ScoreModel,
    schedule: &DiffusionSchedule,
    t: f64,
    draws: &[Vec<f64>],
) -> Result<LareForward> {
    if draws.is_empty() {
        return Err(Error::config("LaRE² needs at least one noise draw"));
    }
    Error::check_dim(model.dim(), z.len())?;
    let ab = schedule.alpha_bar(t)?;
    let (sa, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    let e = draws.len() as f64;
    let mut phi = vec![0.0; z.len()];
    let mut resid = Vec::with_capacity(draws.len());
    let mut inputs = Vec::with_capacity(draws.len());
    for eps in draws {
        Error::check_dim(z.len(), eps.len())?;
        let zt: Vec<f64> = z.iter().zip(eps).map(|(z, n)| sa * z + s * n).collect();
        let pred = model.eps(&zt, t, schedule)?;
        let l: Vec<f64> = eps.iter().zip(&pred).map(|(a, b)| a - b).collect();
        for (p, v) in phi.iter_mut().zip(&l) {
            *p += v * v / e;
        }
        resid.push(l);
        inputs.push(zt);
    }
    Ok((phi, resid, inputs))
}

/// Perceptual distance between `x` and its autoencoder reconstruction.
pub fn feature_aeroblade(x: &[f64], ae: &AutoEncoder) -> Result<f64> {
    ae.perceptual_distance(x, &ae.reconstruct(x)?)
}

/// Feature extractor bound to one generator's backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub generator: String,
    pub config: FeatureConfig,
    pub schedule: DiffusionSchedule,
    pub backbone: Backbone,
}

/// Map from classifier input to `(loss, ∂loss/∂input)`.
pub type InputLoss<'a> = &'a (dyn Fn(&[f64]) -> Result<(f64, Vec<f64>)> + Sync);

impl FeatureExtractor {
    pub fn new(generator: impl Into<String>, config: FeatureConfig, schedule: DiffusionSchedule, backbone: Backbone) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            generator: generator.into(),
            config,
            schedule,
            backbone,
        })
    }

    pub fn kind(&self) -> DetectorKind {
        match self.backbone {
            Backbone::Dire { .. } => DetectorKind::Dire,
            Backbone::Lare2 { .. } => DetectorKind::Lare2,
            Backbone::Aeroblade { .. } => DetectorKind::Aeroblade,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.backbone {
            Backbone::Dire { model } => model.dim(),
            Backbone::Lare2 { ae, .. } | Backbone::Aeroblade { ae } => ae.dim(),
        }
    }

    fn draws(&self, latent_dim: usize) -> Vec<Vec<f64>> {
        lare_draws(latent_dim, self.config.lare_draws, self.config.lare_seed)
    }

    /// Raw feature `φ(x)`: the DIRE residual, the latent LaRE² error or the
    /// scalar perceptual distance.
    pub fn extract(&self, x: &DataPoint) -> Result<FeatureVector> {
        Error::check_dim(self.dim(), x.dim())?;
        let values = match &self.backbone {
            Backbone::Dire { model } => feature_dire(x, model, &self.schedule, self.config.steps)?,
            Backbone::Lare2 { ae, latent } => {
                let z = ae.encode(x)?;
                feature_lare(&z, latent, &self.schedule, self.config.lare_t, &self.draws(z.len()))?
            }
            Backbone::Aeroblade { ae } => vec![feature_aeroblade(x, ae)?],
        };
        Ok(FeatureVector {
            values,
            extractor: self.kind(),
            provenance: self.generator.clone(),
        })
    }

    /// LaRE² error map decoded to data space: `D_raw(φ) − D_raw(0)`.
    pub fn decode_map(&self, phi: &[f64]) -> Result<Vec<f64>> {
        match &self.backbone {
            Backbone::Lare2 { ae, .. } => {
                let on = ae.decode_raw(phi)?;
                let off = ae.decode_raw(&vec![0.0; phi.len()])?;
                Ok(on.iter().zip(&off).map(|(a, b)| a - b).collect())
            }
            _ => Err(Error::config("only LaRE² features have a decoded error map")),
        }
    }

    /// The feature in data-aligned form: DIRE residual, decoded LaRE² map,
    /// or the AEROBLADE scalar.
    pub fn aligned_feature(&self, x: &DataPoint) -> Result<Vec<f64>> {
        let f = self.extract(x)?;
        match self.kind() {
            DetectorKind::Lare2 => self.decode_map(&f.values),
            _ => Ok(f.values),
        }
    }

    /// What the head consumes; LaRE² prepends `x` to the decoded map.
    pub fn head_input(&self, x: &DataPoint) -> Result<Vec<f64>> {
        let aligned = self.aligned_feature(x)?;
        Ok(match self.kind() {
            DetectorKind::Lare2 => lare_head_input(x, &aligned),
            _ => aligned,
        })
    }

    pub fn head_inputs(&self, data: &LabeledDataset) -> Result<Vec<Vec<f64>>> {
        data.samples.par_iter().map(|x| self.head_input(x)).collect()
    }

    /// `loss(head_input(x))` and its gradient in `x`. DIRE differentiates
    /// the full round trip with the requested gradient mode.
    pub fn loss_and_grad(&self, x: &DataPoint, loss: InputLoss<'_>, mode: GradMode) -> Result<(f64, Vec<f64>)> {
        Error::check_dim(self.dim(), x.dim())?;
        match &self.backbone {
            Backbone::Dire { model } => {
                let tail = |x: &[f64], rec: &[f64]| -> Result<(f64, Vec<f64>, Vec<f64>)> {
                    let diff: Vec<f64> = x.iter().zip(rec).map(|(a, b)| a - b).collect();
                    let phi: Vec<f64> = diff.iter().map(|d| d.abs()).collect();
                    let (l, g) = loss(&phi)?;
                    // Subgradient 0 at exact zeros.
                    let gx: Vec<f64> = diff.iter().zip(&g).map(|(d, g)| sign(*d) * g).collect();
                    let grec = gx.iter().map(|v| -v).collect();
                    Ok((l, gx, grec))
                };
                let out = input_gradient(
                    &GradRequest {
                        x,
                        tail: &tail,
                        steps: self.config.steps,
                        mode,
                    },
                    model,
                    &self.schedule,
                )?;
                Ok((out.loss, out.grad))
            }
            Backbone::Lare2 { ae, latent } => {
                let z = ae.encode(x)?;
                let draws = self.draws(z.len());
                let t = self.config.lare_t;
                let (phi, resid, inputs) = lare_residuals(&z, latent, &self.schedule, t, &draws)?;
                let map = self.decode_map(&phi)?;
                let (l, g) = loss(&lare_head_input(x, &map))?;
                let d = x.dim();
                let mut gx = g[..d].to_vec();
                let g_phi = ae.decoder_vjp(&phi, &g[d..])?;
                let g_z = lare_latent_vjp(latent, &self.schedule, t, &resid, &inputs, &g_phi)?;
                let g_enc = ae.encoder_vjp(x, &g_z)?;
                for (a, b) in gx.iter_mut().zip(&g_enc) {
                    *a += b;
                }
                Ok((l, gx))
            }
            Backbone::Aeroblade { ae } => {
                let rec = ae.reconstruct(x)?;
                let (s, g_x, g_rec) = ae.perceptual_distance_grad(x, &rec)?;
                let (l, g) = loss(&[s])?;
                let through = ae.ae_vjp(x, &g_rec)?;
                let grad = g_x.iter().zip(&through).map(|(a, b)| g[0] * (a + b)).collect();
                Ok((l, grad))
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn lare_head_input(x: &[f64], map: &[f64]) -> Vec<f64> {
    let mut input = Vec::with_capacity(x.len() + map.len());
    input.extend_from_slice(x);
    input.extend_from_slice(map);
    input
}

/// Cotangent on `z` from cotangent `c` on `φ`.
fn lare_latent_vjp(
    model: &dyn ScoreModel,
    schedule: &DiffusionSchedule,
    t: f64,
    resid: &[Vec<f64>],
    inputs: &[Vec<f64>],
    c: &[f64],
) -> Result<Vec<f64>> {
    let sa = schedule.alpha_bar(t)?.sqrt();
    let e = resid.len() as f64;
    let mut g = vec![0.0; c.len()];
    for (l, zt) in resid.iter().zip(inputs) {
        // ∂φ/∂ε̂_i = −(2/e) L_i
        let v: Vec<f64> = l.iter().zip(c).map(|(l, c)| -2.0 * l * c / e).collect();
        let j = model.eps_vjp(zt, t, schedule, &v)?;
        for (a, b) in g.iter_mut().zip(&j) {
            *a += sa * b;
        }
    }
    Ok(g)
}

/// Trains the latent noise predictor of a LaRE² backbone on encoded samples
/// of its generator.
pub fn train_latent_denoiser(
    ae: &AutoEncoder,
    samples: &[DataPoint],
    hidden: usize,
    config: &DenoiserTrainConfig,
    schedule: &DiffusionSchedule,
) -> Result<DenoiserNet> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let latents: Vec<Vec<f64>> = samples.iter().map(|x| ae.encode(x)).collect::<Result<_>>()?;
    let net = DenoiserNet::new(ae.latent_dim(), &[hidden], &mut stream(config.seed, 0x1A7E));
    Ok(train_denoiser(net, TrainingSource::Empirical(&latents), config, schedule)?.0)
}

/// One-hidden-layer tanh classifier on standardized inputs; one logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    net: Mlp,
    shift: Vec<f64>,
    scale: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub hidden: usize,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            lr: 0.05,
            momentum: 0.9,
            epochs: 60,
            batch: 32,
            seed: 0,
        }
    }
}

impl ClassifierTrainConfig {
    pub(crate) fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.batch == 0 || !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("classifier config needs hidden, batch > 0, lr >= 0, momentum in [0,1)"));
        }
        Ok(())
    }
}

impl Classifier {
    /// Fresh network with standardization fitted on `inputs`.
    pub fn init(inputs: &[Vec<f64>], hidden: usize, seed: u64) -> Result<Self> {
        let n = inputs.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let d = inputs[0].len();
        for f in inputs {
            Error::check_dim(d, f.len())?;
        }
        let mut shift = vec![0.0; d];
        for f in inputs {
            for (s, v) in shift.iter_mut().zip(f) {
                *s += v / n as f64;
            }
        }
        let mut scale = vec![0.0; d];
        for f in inputs {
            for ((s, v), m) in scale.iter_mut().zip(f).zip(&shift) {
                *s += (v - m).powi(2) / n as f64;
            }
        }
        for s in &mut scale {
            *s = s.sqrt().max(1e-8);
        }
        let net = Mlp::random(&[d, hidden, 1], Activation::Tanh, Activation::Identity, &mut stream(seed, 0xC1A5));
        Ok(Self { net, shift, scale })
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    fn standardize(&self, f: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim(self.input_dim(), f.len())?;
        Ok(f.iter().zip(&self.shift).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect())
    }

    pub fn logit(&self, f: &[f64]) -> Result<f64> {
        Ok(self.net.forward(&self.standardize(f)?)?[0])
    }

    /// BCE loss, its input gradient, and optionally the parameter gradient.
    pub fn loss_grad(&self, f: &[f64], y: Label, with_params: bool) -> Result<(f64, Vec<f64>, Option<Gradients>)> {
        let tape = self.net.forward_tape(&self.standardize(f)?)?;
        let (loss, dl) = bce(tape.output()[0], y);
        let (g, params) = self.net.backward(&tape, &[dl], with_params);
        let g = g.iter().zip(&self.scale).map(|(g, s)| g / s).collect();
        Ok((loss, g, params))
    }

    pub(crate) fn apply(&mut self, opt: &mut Sgd, grads: &Gradients) {
        opt.step(&mut self.net, grads);
    }
}

/// `softplus(z) − y z` and its derivative in `z`.
pub fn bce(logit: f64, y: Label) -> (f64, f64) {
    let p = 1.0 / (1.0 + (-logit).exp());
    let softplus = logit.max(0.0) + (-logit.abs()).exp().ln_1p();
    (softplus - y.target() * logit, p - y.target())
}

/// Minibatch BCE training. Returns the per-epoch mean loss.
pub fn train_classifier(
    inputs: &[Vec<f64>],
    labels: &[Label],
    config: &ClassifierTrainConfig,
) -> Result<(Classifier, Vec<f64>)> {
    config.validate()?;
    if inputs.len() != labels.len() {
        return Err(Error::config("inputs and labels differ in length"));
    }
    let mut clf = Classifier::init(inputs, config.hidden, config.seed)?;
    let mut opt = Sgd::new(config.lr, config.momentum);
    let mut rng = stream(config.seed, 0xC1A6);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch) {
            let mut grads = Gradients::zeros_like(&clf.net);
            for &i in chunk {
                let (l, _, g) = clf.loss_grad(&inputs[i], labels[i], true)?;
                total += l;
                grads.add_assign(&g.expect("params"));
            }
            grads.scale(1.0 / chunk.len() as f64);
            clf.apply(&mut opt, &grads);
        }
        let mean = total / inputs.len() as f64;
        if !mean.is_finite() || mean > 1e3 {
            return Err(Error::Divergence { iter: epoch, loss: mean });
        }
        trace.push(mean);
    }
    Ok((clf, trace))
}

/// Threshold on a scalar score; `fake_above` sets the decision direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub tau: f64,
    pub fake_above: bool,
    /// Score spread used to normalize the margin.
    pub spread: f64,
}

impl Threshold {
    pub fn logit(&self, s: f64) -> f64 {
        let m = (s - self.tau) / self.spread;
        if self.fake_above {
            m
        } else {
            -m
        }
    }

    fn dlogit(&self) -> f64 {
        if self.fake_above {
            1.0 / self.spread
        } else {
            -1.0 / self.spread
        }
    }
}

/// Chooses `τ` and the direction maximizing balanced accuracy. Candidates
/// are midpoints between consecutive distinct scores plus both ends; ties
/// keep the first candidate in ascending order, `fake_above` first.
pub fn fit_threshold(scores: &[f64], labels: &[Label]) -> Result<Threshold> {
    if scores.len() != labels.len() {
        return Err(Error::config("scores and labels differ in length"));
    }
    let n_fake = labels.iter().filter(|l| **l == Label::Fake).count();
    let n_real = labels.len() - n_fake;
    if n_fake == 0 || n_real == 0 {
        return Err(Error::config("threshold fitting needs both classes"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { layer: 0 });
    }
    let mut pairs: Vec<(f64, Label)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Sweep: count of each class strictly below the candidate.
    let (mut real_below, mut fake_below) = (0usize, 0usize);
    let mut best = (f64::NEG_INFINITY, 0.0, true);
    let mut i = 0;
    let consider = |tau: f64, rb: usize, fb: usize, best: &mut (f64, f64, bool)| {
        let above = 0.5 * ((n_fake - fb) as f64 / n_fake as f64 + rb as f64 / n_real as f64);
        let below = 0.5 * (fb as f64 / n_fake as f64 + (n_real - rb) as f64 / n_real as f64);
        for (acc, dir) in [(above, true), (below, false)] {
            if acc > best.0 {
                *best = (acc, tau, dir);
            }
        }
    };
    consider(pairs[0].0 - 1.0, 0, 0, &mut best);
    while i < pairs.len() {
        let v = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == v {
            match pairs[i].1 {
                Label::Real => real_below += 1,
                Label::Fake => fake_below += 1,
            }
            i += 1;
        }
        let tau = if i < pairs.len() { 0.5 * (v + pairs[i].0) } else { v + 1.0 };
        consider(tau, real_below, fake_below, &mut best);
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / scores.len() as f64;
    Ok(Threshold {
        tau: best.1,
        fake_above: best.2,
        spread: var.sqrt().max(1e-12),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Head {
    Classifier(Classifier),
    Threshold(Threshold),
}

impl Head {
    pub fn logit(&self, input: &[f64]) -> Result<f64> {
        match self {
            Head::Classifier(c) => c.logit(input),
            Head::Threshold(t) => {
                Error::check_dim(1, input.len())?;
                Ok(t.logit(input[0]))
            }
        }
    }

    /// Attack loss on the head input: BCE for classifiers, the signed
    /// margin `−(2y − 1)·logit` for thresholds.
    pub fn loss_grad(&self, input: &[f64], y: Label) -> Result<(f64, Vec<f64>)> {
        match self {
            Head::Classifier(c) => {
                let (l, g, _) = c.loss_grad(input, y, false)?;
                Ok((l, g))
            }
            Head::Threshold(t) => {
                Error::check_dim(1, input.len())?;
                let sgn = 2.0 * y.target() - 1.0;
                Ok((-sgn * t.logit(input[0]), vec![-sgn * t.dlogit()]))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Label,
    /// Logit; positive means fake.
    pub score: f64,
}

/// Feature extractor plus trained head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub extractor: FeatureExtractor,
    pub head: Head,
}

impl Detector {
    pub fn new(extractor: FeatureExtractor, head: Head) -> Result<Self> {
        let ok = matches!(
            (extractor.kind(), &head),
            (DetectorKind::Aeroblade, Head::Threshold(_)) | (DetectorKind::Dire | DetectorKind::Lare2, Head::Classifier(_))
        );
        if !ok {
            return Err(Error::config(format!("head does not match detector kind {}", extractor.kind())));
        }
        Ok(Self { extractor, head })
    }

    pub fn kind(&self) -> DetectorKind {
        self.extractor.kind()
    }

    pub fn id(&self) -> String {
        format!("{}@{}", self.kind(), self.extractor.generator)
    }

    pub fn predict(&self, x: &DataPoint) -> Result<Prediction> {
        let score = self.head.logit(&self.extractor.head_input(x)?)?;
        Ok(Prediction {
            label: Label::from_logit(score),
            score,
        })
    }

    pub fn predict_all(&self, samples: &[DataPoint]) -> Result<Vec<Prediction>> {
        samples.par_iter().map(|x| self.predict(x)).collect()
    }

    /// Attack loss for label `y` and its input gradient.
    pub fn objective(&self, x: &DataPoint, y: Label, mode: GradMode) -> Result<(f64, Vec<f64>)> {
        let loss = |input: &[f64]| self.head.loss_grad(input, y);
        self.extractor.loss_and_grad(x, &loss, mode)
    }

    /// Attack loss without the gradient.
    pub fn loss(&self, x: &DataPoint, y: Label) -> Result<f64> {
        Ok(self.head.loss_grad(&self.extractor.head_input(x)?, y)?.0)
    }

    pub fn evaluate(&self, data: &LabeledDataset) -> Result<Metrics> {
        evaluate(self, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean of the per-class recalls.
    pub accuracy: f64,
    pub auc: f64,
    pub real_recall: f64,
    pub fake_recall: f64,
    pub true_real: usize,
    pub false_fake: usize,
    pub false_real: usize,
    pub true_fake: usize,
}

impl Metrics {
    pub fn from_predictions(preds: &[Prediction], labels: &[Label]) -> Result<Self> {
        if preds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if preds.len() != labels.len() {
            return Err(Error::config("predictions and labels differ in length"));
        }
        let (mut tr, mut ff, mut fr, mut tf) = (0, 0, 0, 0);
        for (p, y) in preds.iter().zip(labels) {
            match (y, p.label) {
                (Label::Real, Label::Real) => tr += 1,
                (Label::Real, Label::Fake) => ff += 1,
                (Label::Fake, Label::Real) => fr += 1,
                (Label::Fake, Label::Fake) => tf += 1,
            }
        }
        let ratio = |a: usize, b: usize| if a + b == 0 { f64::NAN } else { a as f64 / (a + b) as f64 };
        let real_recall = ratio(tr, ff);
        let fake_recall = ratio(tf, fr);
        let accuracy = match (real_recall.is_nan(), fake_recall.is_nan()) {
            (false, false) => 0.5 * (real_recall + fake_recall),
            (true, _) => fake_recall,
            (_, true) => real_recall,
        };
        let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
        Ok(Self {
            accuracy,
            auc: auc(&scores, labels),
            real_recall,
            fake_recall,
            true_real: tr,
            false_fake: ff,
            false_real: fr,
            true_fake: tf,
        })
    }
}

/// Probability that a random fake outscores a random real (ties count
/// half). NaN with a single class.
pub fn auc(scores: &[f64], labels: &[Label]) -> f64 {
    let fakes: Vec<f64> = scores.iter().zip(labels).filter(|(_, l)| **l == Label::Fake).map(|(s, _)| *s).collect();
    let reals: Vec<f64> = scores.iter().zip(labels).filter(|(_, l)| **l == Label::Real).map(|(s, _)| *s).collect();
    if fakes.is_empty() || reals.is_empty() {
        return f64::NAN;
    }
    let mut sorted = reals.clone();
    sorted.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for f in &fakes {
        let below = sorted.partition_point(|r| r < f);
        let le = sorted.partition_point(|r| r <= f);
        wins += below as f64 + 0.5 * (le - below) as f64;
    }
    wins / (fakes.len() * reals.len()) as f64
}

pub fn evaluate(det: &Detector, data: &LabeledDataset) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Metrics::from_predictions(&det.predict_all(&data.samples)?, &data.labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorTrainConfig {
    pub classifier: ClassifierTrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train: Metrics,
    pub val: Metrics,
    pub loss_trace: Vec<f64>,
}

/// Fits the head: BCE on train features for DIRE and LaRE², a
/// balanced-accuracy threshold on validation scores for AEROBLADE.
pub fn train_detector(
    extractor: FeatureExtractor,
    train: &LabeledDataset,
    val: &LabeledDataset,
    config: &DetectorTrainConfig,
) -> Result<(Detector, TrainReport)> {
    train.require_both_classes()?;
    val.require_both_classes()?;
    let train_in = extractor.head_inputs(train)?;
    let (head, trace) = match extractor.kind() {
        DetectorKind::Aeroblade => {
            let val_in = extractor.head_inputs(val)?;
            let scores: Vec<f64> = val_in.iter().map(|v| v[0]).collect();
            (Head::Threshold(fit_threshold(&scores, &val.labels)?), Vec::new())
        }
        _ => {
            let (c, trace) = train_classifier(&train_in, &train.labels, &config.classifier)?;
            (Head::Classifier(c), trace)
        }
    };
    let det = Detector::new(extractor, head)?;
    let train_preds: Vec<Prediction> = train_in
        .iter()
        .map(|f| {
            let score = det.head.logit(f)?;
            Ok(Prediction {
                label: Label::from_logit(score),
                score,
            })
        })
        .collect::<Result<_>>()?;
    let report = TrainReport {
        train: Metrics::from_predictions(&train_preds, &train.labels)?,
        val: evaluate(&det, val)?,
        loss_trace: trace,
    };
    Ok((det, report))
}
