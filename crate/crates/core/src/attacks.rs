//! ℓ∞ attacks on detectors: PGD with random start, a simplified adaptive
//! step-size APGD, and the clipped Gaussian noise baseline.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::GradMode;
use crate::detectors::{Detector, Label, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{norm2, norm_inf};
use crate::rng::{mix, normal_vec, stream};
use crate::sde::DataPoint;

/// Budgets mirroring 1, 2, 4 and 8 of 255.
pub const EPSILON_SWEEP: [f64; 4] = [0.004, 0.008, 0.016, 0.031];
pub const MAX_EPSILON: f64 = 0.031;

/// APGD checkpoints as fractions of the step budget.
const APGD_CHECKPOINTS: [f64; 4] = [0.22, 0.44, 0.66, 0.88];
const APGD_IMPROVE_FRACTION: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackVariant {
    Pgd,
    Apgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub epsilon: f64,
    /// Step size; `None` means `ε/4` (PGD). APGD starts from `2ε`.
    pub alpha: Option<f64>,
    pub steps: usize,
    pub random_init: bool,
    pub seed: u64,
    pub variant: AttackVariant,
    pub grad_mode: GradMode,
    /// Stop as soon as the prediction flips.
    pub early_stop: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: MAX_EPSILON,
            alpha: None,
            steps: 100,
            random_init: true,
            seed: 0,
            variant: AttackVariant::Apgd,
            grad_mode: GradMode::Adjoint,
            early_stop: false,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::config(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::config("attack needs steps >= 1"));
        }
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(Error::config("attack step size must be positive"));
            }
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        self.alpha.unwrap_or(self.epsilon / 4.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialExample {
    pub id: u64,
    pub label: Label,
    pub epsilon: f64,
    pub x_orig: DataPoint,
    /// `x_adv − x_orig`.
    pub delta: Vec<f64>,
    pub x_adv: DataPoint,
    /// The prediction on `x_adv` differs from `label`.
    pub success: bool,
    /// Loss at each evaluated iterate.
    pub loss_trace: Vec<f64>,
    /// Loss at the returned iterate.
    pub final_loss: f64,
}

impl AdversarialExample {
    /// Budget and range invariants.
    pub fn check(&self) -> Result<()> {
        let inf = norm_inf(&self.delta);
        if inf > self.epsilon + 1e-12 {
            return Err(Error::config(format!("sample {}: ‖δ‖∞ = {inf} exceeds ε = {}", self.id, self.epsilon)));
        }
        if self.x_adv.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config(format!("sample {}: x_adv leaves [0, 1]", self.id)));
        }
        for ((a, o), d) in self.x_adv.iter().zip(self.x_orig.iter()).zip(&self.delta) {
            if (a - o - d).abs() > 1e-12 {
                return Err(Error::config(format!("sample {}: δ inconsistent with x_adv", self.id)));
            }
        }
        Ok(())
    }

    pub fn record(&self, steps: usize, variant: &str) -> AttackRecord {
        AttackRecord {
            sample_id: self.id,
            label: self.label,
            epsilon: self.epsilon,
            steps,
            variant: variant.to_string(),
            success: self.success,
            final_loss: self.final_loss,
            delta_linf: norm_inf(&self.delta),
            delta_l2: norm2(&self.delta),
        }
    }
}

/// One row of an attack result file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub sample_id: u64,
    pub label: Label,
    pub epsilon: f64,
    pub steps: usize,
    pub variant: String,
    pub success: bool,
    pub final_loss: f64,
    pub delta_linf: f64,
    pub delta_l2: f64,
}

/// Attack loss at `x` for the true label `y` and its input gradient.
pub fn attack_objective(det: &Detector, x: &DataPoint, y: Label, mode: GradMode) -> Result<(f64, Vec<f64>)> {
    det.objective(x, y, mode)
}

/// Clamped `x + δ` and the effective perturbation.
fn apply(x: &DataPoint, delta: &[f64], eps: f64) -> (DataPoint, Vec<f64>) {
    let adv: Vec<f64> = x
        .iter()
        .zip(delta)
        .map(|(x, d)| (x + d.clamp(-eps, eps)).clamp(0.0, 1.0))
        .collect();
    let eff = adv.iter().zip(x.iter()).map(|(a, x)| a - x).collect();
    (DataPoint::clamped(adv), eff)
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

fn finish(det: &Detector, id: u64, x: &DataPoint, y: Label, eps: f64, best: (DataPoint, Vec<f64>, f64), trace: Vec<f64>) -> Result<AdversarialExample> {
    let (x_adv, delta, loss) = best;
    let success = det.predict(&x_adv)?.label != y;
    Ok(AdversarialExample {
        id,
        label: y,
        epsilon: eps,
        x_orig: x.clone(),
        delta,
        x_adv,
        success,
        loss_trace: trace,
        final_loss: loss,
    })
}

fn initial_delta(x: &DataPoint, cfg: &AttackConfig, rng: &mut impl Rng) -> Vec<f64> {
    if cfg.random_init && cfg.epsilon > 0.0 {
        (0..x.dim()).map(|_| rng.random_range(-cfg.epsilon..=cfg.epsilon)).collect()
    } else {
        vec![0.0; x.dim()]
    }
}

/// Iterate state shared by both attacks.
struct Walk<'a> {
    det: &'a Detector,
    x: &'a DataPoint,
    y: Label,
    cfg: &'a AttackConfig,
    trace: Vec<f64>,
    best: (DataPoint, Vec<f64>, f64),
}

impl<'a> Walk<'a> {
    /// Evaluates the iterate, updates the best, returns `(loss, grad, flipped)`.
    fn visit(&mut self, adv: &DataPoint, delta: &[f64], with_grad: bool) -> Result<(f64, Vec<f64>, bool)> {
        let (loss, grad) = if with_grad {
            attack_objective(self.det, adv, self.y, self.cfg.grad_mode)?
        } else {
            (self.det.loss(adv, self.y)?, Vec::new())
        };
        self.trace.push(loss);
        if loss > self.best.2 {
            self.best = (adv.clone(), delta.to_vec(), loss);
        }
        let flipped = self.cfg.early_stop && self.det.predict(adv)?.label != self.y;
        Ok((loss, grad, flipped))
    }
}

/// Projected sign-gradient ascent; returns the best-loss iterate.
pub fn pgd(det: &Detector, id: u64, x: &DataPoint, y: Label, cfg: &AttackConfig) -> Result<AdversarialExample> {
    cfg.validate()?;
    let eps = cfg.epsilon;
    let mut rng = stream(mix(cfg.seed, id), 0xA77);
    let (mut adv, mut delta) = apply(x, &initial_delta(x, cfg, &mut rng), eps);
    let mut walk = Walk {
        det,
        x,
        y,
        cfg,
        trace: Vec::with_capacity(cfg.steps + 1),
        best: (adv.clone(), delta.clone(), f64::NEG_INFINITY),
    };
    if eps == 0.0 {
        walk.visit(&adv, &delta, false)?;
        return finish(det, id, x, y, eps, walk.best, walk.trace);
    }
    let alpha = cfg.step_size();
    for _ in 0..cfg.steps {
        let (_, g, flipped) = walk.visit(&adv, &delta, true)?;
        if flipped {
            return finish(det, id, x, y, eps, (adv, delta, *walk.trace.last().unwrap()), walk.trace);
        }
        let stepped: Vec<f64> = delta.iter().zip(&g).map(|(d, g)| d + alpha * sign(*g)).collect();
        (adv, delta) = apply(x, &stepped, eps);
    }
    let (_, _, flipped) = walk.visit(&adv, &delta, false)?;
    if flipped {
        return finish(det, id, x, y, eps, (adv, delta, *walk.trace.last().unwrap()), walk.trace);
    }
    finish(det, id, walk.x, y, eps, walk.best, walk.trace)
}

/// Step indices at which APGD reconsiders its step size.
pub fn apgd_checkpoints(steps: usize) -> Vec<usize> {
    let mut c: Vec<usize> = APGD_CHECKPOINTS
        .iter()
        .map(|p| (p * steps as f64).round() as usize)
        .filter(|&w| w > 0 && w < steps)
        .collect();
    c.dedup();
    c
}

/// Sign-gradient ascent starting at `α = 2ε`. At each checkpoint, if fewer
/// than 75% of the steps since the previous checkpoint improved the loss,
/// the step halves and the walk restarts from the best iterate.
pub fn apgd(det: &Detector, id: u64, x: &DataPoint, y: Label, cfg: &AttackConfig) -> Result<AdversarialExample> {
    cfg.validate()?;
    let eps = cfg.epsilon;
    let mut rng = stream(mix(cfg.seed, id), 0xA78);
    let (mut adv, mut delta) = apply(x, &initial_delta(x, cfg, &mut rng), eps);
    let mut walk = Walk {
        det,
        x,
        y,
        cfg,
        trace: Vec::with_capacity(cfg.steps + 1),
        best: (adv.clone(), delta.clone(), f64::NEG_INFINITY),
    };
    if eps == 0.0 {
        walk.visit(&adv, &delta, false)?;
        return finish(det, id, x, y, eps, walk.best, walk.trace);
    }
    let checkpoints = apgd_checkpoints(cfg.steps);
    let mut alpha = cfg.alpha.map_or(2.0 * eps, |a| a.max(2.0 * eps));
    let mut since = 0usize;
    let mut improved = 0usize;
    let mut last_loss = f64::NEG_INFINITY;
    for k in 0..cfg.steps {
        if checkpoints.contains(&k) {
            if (improved as f64) < APGD_IMPROVE_FRACTION * since as f64 {
                alpha *= 0.5;
                adv = walk.best.0.clone();
                delta = walk.best.1.clone();
                last_loss = f64::NEG_INFINITY;
            }
            since = 0;
            improved = 0;
        }
        let (loss, g, flipped) = walk.visit(&adv, &delta, true)?;
        if flipped {
            return finish(det, id, x, y, eps, (adv, delta, loss), walk.trace);
        }
        if last_loss.is_finite() {
            since += 1;
            if loss > last_loss {
                improved += 1;
            }
        }
        last_loss = loss;
        let stepped: Vec<f64> = delta.iter().zip(&g).map(|(d, g)| d + alpha * sign(*g)).collect();
        (adv, delta) = apply(x, &stepped, eps);
    }
    let (loss, _, flipped) = walk.visit(&adv, &delta, false)?;
    if flipped {
        return finish(det, id, x, y, eps, (adv, delta, loss), walk.trace);
    }
    finish(det, id, walk.x, y, eps, walk.best, walk.trace)
}

/// `δ = clip(N(0, (ε/2)² I), −ε, ε)`.
pub fn random_perturb(det: &Detector, id: u64, x: &DataPoint, y: Label, epsilon: f64, seed: u64) -> Result<AdversarialExample> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::config(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let noise: Vec<f64> = normal_vec(&mut stream(mix(seed, id), 0x7A4D), x.dim())
        .into_iter()
        .map(|n| (0.5 * epsilon * n).clamp(-epsilon, epsilon))
        .collect();
    let (x_adv, delta) = apply(x, &noise, epsilon);
    let loss = det.loss(&x_adv, y)?;
    finish(det, id, x, y, epsilon, (x_adv, delta, loss), vec![loss])
}

/// Runs the configured attack on every sample in parallel.
pub fn attack_dataset(det: &Detector, data: &LabeledDataset, cfg: &AttackConfig) -> Result<Vec<AdversarialExample>> {
    cfg.validate()?;
    data.ids
        .par_iter()
        .zip(&data.samples)
        .zip(&data.labels)
        .map(|((id, x), y)| match cfg.variant {
            AttackVariant::Pgd => pgd(det, *id, x, *y, cfg),
            AttackVariant::Apgd => apgd(det, *id, x, *y, cfg),
        })
        .collect()
}

pub fn random_dataset(det: &Detector, data: &LabeledDataset, epsilon: f64, seed: u64) -> Result<Vec<AdversarialExample>> {
    data.ids
        .par_iter()
        .zip(&data.samples)
        .zip(&data.labels)
        .map(|((id, x), y)| random_perturb(det, *id, x, *y, epsilon, seed))
        .collect()
}

/// Dataset of the perturbed inputs, keeping ids and labels.
pub fn adversarial_set(examples: &[AdversarialExample]) -> Result<LabeledDataset> {
    LabeledDataset::with_ids(
        examples.iter().map(|e| e.id).collect(),
        examples.iter().map(|e| e.x_adv.clone()).collect(),
        examples.iter().map(|e| e.label).collect(),
    )
}

/// Balanced accuracy on the perturbed inputs.
pub fn robust_accuracy(det: &Detector, examples: &[AdversarialExample]) -> Result<f64> {
    Ok(det.evaluate(&adversarial_set(examples)?)?.accuracy)
}
