//! Reverse-SDE purification and adversarial training of detector heads.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack_dataset, robust_accuracy, AttackConfig, EPSILON_SWEEP};
use crate::detectors::{lare_head_input, Classifier, ClassifierTrainConfig, Detector, DetectorKind, Head, LabeledDataset, Label, Metrics};
use crate::error::{Error, Result};
use crate::nn::{Gradients, Sgd};
use crate::rng::{mix, normal_vec, stream};
use crate::score::ScoreModel;
use crate::sde::{forward_diffuse, to_data, DataPoint, DiffusionSchedule, T_MIN};

/// Truncation ratios `t*/T` swept by the purification experiment.
pub const PURIFY_RATIOS: [f64; 5] = [0.01, 0.02, 0.03, 0.05, 0.1];

/// Inner-step counts of the adversarial-training grid.
pub const AT_INNER_STEPS: [usize; 4] = [1, 2, 4, 8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PurifyConfig {
    pub t_star_ratio: f64,
    /// Euler–Maruyama steps; `0` means `max(10, round(1000 · ratio))`.
    pub steps: usize,
    pub seed: u64,
    /// Generator whose score drives the reverse SDE; `None` means the
    /// detector's own backbone generator.
    pub source: Option<String>,
}

impl Default for PurifyConfig {
    fn default() -> Self {
        Self {
            t_star_ratio: 0.05,
            steps: 0,
            seed: 0,
            source: None,
        }
    }
}

impl PurifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_star_ratio > 0.0 && self.t_star_ratio <= 0.5) {
            return Err(Error::config(format!("t_star_ratio {} outside (0, 0.5]", self.t_star_ratio)));
        }
        Ok(())
    }

    pub fn reverse_steps(&self) -> usize {
        if self.steps == 0 {
            ((1000.0 * self.t_star_ratio).round() as usize).max(10)
        } else {
            self.steps
        }
    }
}

/// Diffuses `x` to `t*` with fresh noise, then integrates the reverse SDE
/// `dx = [f − g² ∇log p_t] dt + g dw̄` back to `T_MIN` by Euler–Maruyama.
/// Randomness is keyed by `(cfg.seed, id)`.
pub fn purify(x: &DataPoint, id: u64, cfg: &PurifyConfig, model: &dyn ScoreModel, schedule: &DiffusionSchedule) -> Result<DataPoint> {
    cfg.validate()?;
    Error::check_dim(model.dim(), x.dim())?;
    let t_star = cfg.t_star_ratio.max(T_MIN);
    let mut rng = stream(mix(cfg.seed, id), 0x9F1);
    let noise = normal_vec(&mut rng, x.dim());
    let mut state = forward_diffuse(x, t_star, &noise, schedule)?;
    let steps = cfg.reverse_steps();
    let h = (t_star - T_MIN) / steps as f64;
    for k in 0..steps {
        let t = t_star - k as f64 * h;
        let beta = schedule.beta(t);
        let score = model.score(&state.x, t, schedule)?;
        let z = normal_vec(&mut rng, x.dim());
        let diffusion = (beta * h).sqrt();
        for ((v, s), z) in state.x.iter_mut().zip(&score).zip(&z) {
            *v += h * (0.5 * beta * *v + beta * s) + diffusion * z;
        }
        if state.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration {
                t,
                reason: "non-finite purification state".into(),
            });
        }
        state.t = t - h;
    }
    Ok(DataPoint::clamped(to_data(&state.x)))
}

pub fn purify_dataset(
    data: &LabeledDataset,
    cfg: &PurifyConfig,
    model: &dyn ScoreModel,
    schedule: &DiffusionSchedule,
) -> Result<LabeledDataset> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let samples = data
        .ids
        .par_iter()
        .zip(&data.samples)
        .map(|(id, x)| purify(x, *id, cfg, model, schedule))
        .collect::<Result<Vec<_>>>()?;
    data.with_samples(samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PurifyPoint {
    pub ratio: f64,
    pub metrics: Metrics,
}

/// Detector metrics after purification at each ratio.
pub fn purification_sweep(
    det: &Detector,
    data: &LabeledDataset,
    ratios: &[f64],
    base: &PurifyConfig,
    model: &dyn ScoreModel,
    schedule: &DiffusionSchedule,
) -> Result<Vec<PurifyPoint>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    ratios
        .iter()
        .map(|&ratio| {
            let cfg = PurifyConfig {
                t_star_ratio: ratio,
                ..base.clone()
            };
            let purified = purify_dataset(data, &cfg, model, schedule)?;
            Ok(PurifyPoint {
                ratio,
                metrics: det.evaluate(&purified)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AtVariant {
    /// Inner attack on precomputed DIRE residuals.
    DireFeature,
    /// Inner attack on pixels with the LaRE² map held constant.
    Lare2Pixel,
}

impl AtVariant {
    pub fn for_kind(kind: DetectorKind) -> Result<Self> {
        match kind {
            DetectorKind::Dire => Ok(AtVariant::DireFeature),
            DetectorKind::Lare2 => Ok(AtVariant::Lare2Pixel),
            DetectorKind::Aeroblade => Err(Error::config("AEROBLADE has no trainable head to harden")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtConfig {
    pub variant: AtVariant,
    /// Pixel budget.
    pub epsilon: f64,
    /// Feature budget for DIRE; `None` calibrates it from `epsilon`.
    pub epsilon_feat: Option<f64>,
    /// Inner PGD steps `K`; `0` is standard training.
    pub inner_steps: usize,
    pub outer: ClassifierTrainConfig,
    pub seed: u64,
}

impl AtConfig {
    pub fn new(variant: AtVariant, epsilon: f64, inner_steps: usize) -> Self {
        Self {
            variant,
            epsilon,
            epsilon_feat: None,
            inner_steps,
            outer: ClassifierTrainConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.outer.validate()?;
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::config(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if let Some(e) = self.epsilon_feat {
            if !(e >= 0.0 && e.is_finite()) {
                return Err(Error::config("epsilon_feat must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtReport {
    pub config: AtConfig,
    /// Feature budget actually used (DIRE only).
    pub epsilon_feat: Option<f64>,
    pub loss_trace: Vec<f64>,
}

/// Median over `data` of `‖φ(x + δ) − φ(x)‖∞` with `δ` drawn like the
/// random-noise baseline at pixel budget `epsilon`.
pub fn calibrate_feature_budget(det: &Detector, data: &LabeledDataset, epsilon: f64, seed: u64) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let ext = &det.extractor;
    let mut shifts: Vec<f64> = data
        .ids
        .par_iter()
        .zip(&data.samples)
        .map(|(id, x)| {
            let noise = normal_vec(&mut stream(mix(seed, *id), 0xCA1), x.dim());
            let moved = DataPoint::clamped(
                x.iter()
                    .zip(&noise)
                    .map(|(v, n)| v + (0.5 * epsilon * n).clamp(-epsilon, epsilon))
                    .collect(),
            );
            let a = ext.aligned_feature(x)?;
            let b = ext.aligned_feature(&moved)?;
            Ok(a.iter().zip(&b).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        })
        .collect::<Result<_>>()?;
    shifts.sort_by(f64::total_cmp);
    let n = shifts.len();
    Ok(if n % 2 == 1 {
        shifts[n / 2]
    } else {
        0.5 * (shifts[n / 2 - 1] + shifts[n / 2])
    })
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

/// Inner PGD on a DIRE residual `r` with budget `eps`, keeping `r + δ ≥ 0`.
fn dire_inner(clf: &Classifier, r: &[f64], y: Label, eps: f64, steps: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if steps == 0 || eps == 0.0 {
        return Ok(r.to_vec());
    }
    let alpha = eps / 4.0;
    let mut delta: Vec<f64> = r.iter().map(|v| rng.random_range(-eps..=eps).max(-v)).collect();
    for _ in 0..steps {
        let input: Vec<f64> = r.iter().zip(&delta).map(|(a, b)| a + b).collect();
        let (_, g, _) = clf.loss_grad(&input, y, false)?;
        for ((d, g), v) in delta.iter_mut().zip(&g).zip(r) {
            *d = (*d + alpha * sign(*g)).clamp(-eps, eps).max(-v);
        }
    }
    Ok(r.iter().zip(&delta).map(|(a, b)| a + b).collect())
}

/// Inner PGD on pixels; the error map is recomputed at each iterate and
/// treated as a constant, so only the direct `x` path carries gradient.
fn lare_inner(det: &Detector, clf: &Classifier, x: &DataPoint, y: Label, eps: f64, steps: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let head_input = |xa: &DataPoint| -> Result<Vec<f64>> { Ok(lare_head_input(xa, &det.extractor.aligned_feature(xa)?)) };
    if steps == 0 || eps == 0.0 {
        return head_input(x);
    }
    let alpha = eps / 4.0;
    let d = x.dim();
    let project = |delta: &mut [f64]| {
        for (dv, xv) in delta.iter_mut().zip(x.iter()) {
            *dv = dv.clamp(-eps, eps).clamp(-xv, 1.0 - xv);
        }
    };
    let mut delta: Vec<f64> = (0..d).map(|_| rng.random_range(-eps..=eps)).collect();
    project(&mut delta);
    let shifted = |delta: &[f64]| DataPoint::clamped(x.iter().zip(delta).map(|(a, b)| a + b).collect());
    for _ in 0..steps {
        let (_, g, _) = clf.loss_grad(&head_input(&shifted(&delta))?, y, false)?;
        for (dv, g) in delta.iter_mut().zip(&g[..d]) {
            *dv += alpha * sign(*g);
        }
        project(&mut delta);
    }
    head_input(&shifted(&delta))
}

/// Min-max training of a fresh head on `det`'s extractor.
pub fn adv_train(det: &Detector, train: &LabeledDataset, cfg: &AtConfig) -> Result<(Detector, AtReport)> {
    cfg.validate()?;
    if AtVariant::for_kind(det.kind())? != cfg.variant {
        return Err(Error::config(format!("variant {:?} does not match detector kind {}", cfg.variant, det.kind())));
    }
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let clean = det.extractor.head_inputs(train)?;
    let eps_feat = match cfg.variant {
        AtVariant::DireFeature => Some(match cfg.epsilon_feat {
            Some(e) => e,
            None => calibrate_feature_budget(det, train, cfg.epsilon, mix(cfg.seed, 0xCA2))?,
        }),
        AtVariant::Lare2Pixel => None,
    };
    let outer = &cfg.outer;
    let mut clf = Classifier::init(&clean, outer.hidden, outer.seed ^ cfg.seed)?;
    let mut opt = Sgd::new(outer.lr, outer.momentum);
    let mut order_rng = stream(mix(cfg.seed, outer.seed), 0xA7);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = Vec::with_capacity(outer.epochs);
    for epoch in 0..outer.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for chunk in order.chunks(outer.batch) {
            let parts: Vec<(f64, Gradients)> = chunk
                .par_iter()
                .map(|&i| {
                    let y = train.labels[i];
                    let mut rng = stream(mix(mix(cfg.seed, epoch as u64), train.ids[i]), 0xA8);
                    let input = match cfg.variant {
                        AtVariant::DireFeature => dire_inner(&clf, &clean[i], y, eps_feat.unwrap_or(0.0), cfg.inner_steps, &mut rng)?,
                        AtVariant::Lare2Pixel => lare_inner(det, &clf, &train.samples[i], y, cfg.epsilon, cfg.inner_steps, &mut rng)?,
                    };
                    let (l, _, g) = clf.loss_grad(&input, y, true)?;
                    Ok((l, g.expect("parameter gradients")))
                })
                .collect::<Result<_>>()?;
            let mut grads = Gradients::zeros_like(clf.net());
            for (l, g) in &parts {
                total += l;
                grads.add_assign(g);
            }
            grads.scale(1.0 / chunk.len() as f64);
            clf.apply(&mut opt, &grads);
        }
        let mean = total / train.len() as f64;
        if !mean.is_finite() || mean > 1e3 {
            return Err(Error::Divergence { iter: epoch, loss: mean });
        }
        trace.push(mean);
    }
    let hardened = Detector::new(det.extractor.clone(), Head::Classifier(clf))?;
    Ok((
        hardened,
        AtReport {
            config: *cfg,
            epsilon_feat: eps_feat,
            loss_trace: trace,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefenseEval {
    pub clean: Metrics,
    /// Balanced accuracy under the evaluation attack.
    pub robust: f64,
}

/// Clean metrics on `test` and robust accuracy under `attack`.
pub fn evaluate_defense(det: &Detector, test: &LabeledDataset, attack: &AttackConfig) -> Result<DefenseEval> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let clean = det.evaluate(test)?;
    let adv = attack_dataset(det, test, attack)?;
    Ok(DefenseEval {
        clean,
        robust: robust_accuracy(det, &adv)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AtGridConfig {
    pub inner_steps: Vec<usize>,
    pub epsilons: Vec<f64>,
    pub outer: ClassifierTrainConfig,
    pub seed: u64,
    /// Attack used for checkpoint selection on the validation split.
    pub select_attack: AttackConfig,
}

impl Default for AtGridConfig {
    fn default() -> Self {
        Self {
            inner_steps: AT_INNER_STEPS.to_vec(),
            epsilons: EPSILON_SWEEP.to_vec(),
            outer: ClassifierTrainConfig::default(),
            seed: 0,
            select_attack: AttackConfig {
                early_stop: true,
                ..AttackConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtGridCell {
    pub inner_steps: usize,
    pub epsilon: f64,
    pub epsilon_feat: Option<f64>,
    pub val: DefenseEval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtGridResult {
    pub best: Detector,
    pub best_cell: AtGridCell,
    pub cells: Vec<AtGridCell>,
}

/// Trains one hardened head per `(K, ε)` and keeps the one with the best
/// validation robust accuracy; ties go to the lowest `ε`, then the lowest `K`.
pub fn at_grid_search(det: &Detector, train: &LabeledDataset, val: &LabeledDataset, grid: &AtGridConfig) -> Result<AtGridResult> {
    if grid.inner_steps.is_empty() || grid.epsilons.is_empty() {
        return Err(Error::config("adversarial-training grid is empty"));
    }
    let variant = AtVariant::for_kind(det.kind())?;
    let mut epsilons = grid.epsilons.clone();
    epsilons.sort_by(f64::total_cmp);
    epsilons.dedup();
    let mut ks = grid.inner_steps.clone();
    ks.sort_unstable();
    ks.dedup();
    let mut best: Option<(Detector, AtGridCell)> = None;
    let mut cells = Vec::with_capacity(ks.len() * epsilons.len());
    for &epsilon in &epsilons {
        for &k in &ks {
            let cfg = AtConfig {
                outer: grid.outer,
                seed: grid.seed,
                ..AtConfig::new(variant, epsilon, k)
            };
            let (hardened, report) = adv_train(det, train, &cfg)?;
            let cell = AtGridCell {
                inner_steps: k,
                epsilon,
                epsilon_feat: report.epsilon_feat,
                val: evaluate_defense(&hardened, val, &grid.select_attack)?,
            };
            cells.push(cell);
            if best.as_ref().is_none_or(|(_, b)| cell.val.robust > b.val.robust) {
                best = Some((hardened, cell));
            }
        }
    }
    let (best, best_cell) = best.expect("non-empty grid");
    Ok(AtGridResult { best, best_cell, cells })
}
