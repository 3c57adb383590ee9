//! Input gradients through the inversion/reconstruction round trip.
//!
//! The chain is `x → Ψ_inv → Ψ_rec → clamp → tail(x, x̂)`. Three discrete
//! modes differentiate the same DDIM computation:
//!
//! - [`GradMode::Adjoint`] keeps only the current state. The backward sweep
//!   recovers each earlier state by solving the DDIM update for its input, so
//!   memory does not grow with the step count.
//! - [`GradMode::Unrolled`] stores every state (reference, `O(N)` memory).
//! - [`GradMode::Checkpointed`] stores every `C`-th state and recomputes
//!   segments.
//!
//! [`GradMode::Continuous`] instead integrates the continuous adjoint ODE of
//! the probability flow jointly with the state; it differs from the discrete
//! modes by the solver's truncation error.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{axpy, dot, norm_inf};
use crate::score::ScoreModel;
use crate::sde::{ode_rhs, to_data, DataPoint, DdimCoeffs, DiffusionSchedule, TrajectoryState, grid_time};

/// State and adjoint `a_t = ∂L/∂x_t` at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointState {
    pub x: Vec<f64>,
    pub a: Vec<f64>,
    pub t: f64,
}

/// Right-hand side of the joint system: the probability-flow velocity and
/// `da/dt = −aᵀ ∂/∂x (f − ½g² ∇log p_t)`.
pub fn adjoint_ode_rhs(
    s: &AdjointState,
    model: &dyn ScoreModel,
    schedule: &DiffusionSchedule,
) -> Result<(Vec<f64>, Vec<f64>)> {
    Error::check_dim(s.x.len(), s.a.len())?;
    let state = TrajectoryState { x: s.x.clone(), t: s.t };
    let dx = ode_rhs(&state, model, schedule)?;
    let t = s.t.max(crate::sde::T_MIN);
    let beta = schedule.beta(t);
    // ∂f/∂x = −½β I, ∂(−½β score)/∂x = −½β J_score
    let js = model.score_vjp(&s.x, t, schedule, &s.a)?;
    let da = s.a.iter().zip(&js).map(|(a, j)| 0.5 * beta * (a + j)).collect();
    Ok((dx, da))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum GradMode {
    Adjoint,
    Unrolled,
    /// Stride `0` means `round(sqrt(2N))`.
    Checkpointed { stride: usize },
    Continuous,
}

impl Default for GradMode {
    fn default() -> Self {
        GradMode::Adjoint
    }
}

/// Scalar loss on the input `x` and its reconstruction `x̂`, both in data space.
pub trait LossTail: Sync {
    /// Returns `(L, ∂L/∂x, ∂L/∂x̂)`.
    fn eval(&self, x: &[f64], rec: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)>;
}

impl<F> LossTail for F
where
    F: Fn(&[f64], &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> + Sync,
{
    fn eval(&self, x: &[f64], rec: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        self(x, rec)
    }
}

pub struct GradRequest<'a> {
    pub x: &'a DataPoint,
    pub tail: &'a dyn LossTail,
    pub steps: usize,
    pub mode: GradMode,
}

/// Instrumentation of one gradient evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GradTelemetry {
    /// Maximum number of trajectory states held at once.
    pub peak_states: usize,
    pub model_evals: usize,
    /// Worst iteration count of the backward state recovery.
    pub max_recovery_iters: usize,
    /// Adjoint sweeps redone by checkpointed recomputation after the state
    /// recovery failed.
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradOutput {
    pub loss: f64,
    /// Reconstruction `x̂` (data space, clamped).
    pub rec: Vec<f64>,
    /// `∂L/∂x` in data space.
    pub grad: Vec<f64>,
    pub telemetry: GradTelemetry,
}

#[derive(Default)]
struct Meter {
    live: usize,
    peak: usize,
    evals: usize,
    max_iters: usize,
    fallbacks: usize,
}

impl Meter {
    fn hold(&mut self, n: usize) {
        self.live += n;
        self.peak = self.peak.max(self.live);
    }

    fn release(&mut self, n: usize) {
        self.live -= n;
    }
}

/// The `2N` steps of the round trip as `(t_from, t_to)` pairs.
pub fn round_trip_steps(steps: usize) -> Vec<(f64, f64)> {
    let up = (0..steps).map(|i| (grid_time(i, steps), grid_time(i + 1, steps)));
    let down = (0..steps).rev().map(|i| (grid_time(i + 1, steps), grid_time(i, steps)));
    up.chain(down).collect()
}

fn ddim(x: &[f64], (t, t_next): (f64, f64), model: &dyn ScoreModel, schedule: &DiffusionSchedule, meter: &mut Meter) -> Result<Vec<f64>> {
    meter.evals += 1;
    let eps = model.eps(x, t, schedule)?;
    let next = DdimCoeffs::new(t, t_next, schedule).apply(x, &eps);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Integration {
            t,
            reason: "non-finite state".into(),
        });
    }
    Ok(next)
}

/// Cotangent pull-back through one DDIM step taken from `x`:
/// `a ← A a + B (∂ε/∂x)ᵀ a`.
fn ddim_vjp(x: &[f64], (t, t_next): (f64, f64), a: &[f64], model: &dyn ScoreModel, schedule: &DiffusionSchedule, meter: &mut Meter) -> Result<Vec<f64>> {
    meter.evals += 1;
    let c = DdimCoeffs::new(t, t_next, schedule);
    let je = model.eps_vjp(x, t, schedule, a)?;
    let out: Vec<f64> = a.iter().zip(&je).map(|(a, j)| c.a * a + c.b * j).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Integration {
            t,
            reason: "non-finite adjoint".into(),
        });
    }
    Ok(out)
}

const RECOVERY_TOL: f64 = 1e-13;
const RECOVERY_MAX_ITERS: usize = 60;
const DENSE_MAX_ITERS: usize = 40;
const RECOVERY_FAILURE: &str = "backward state recovery did not converge";

/// Solves `A x + B ε(x, t) = x_next` for `x`: the reverse DDIM step as
/// predictor, then Newton iterations with a secant estimate of the (scalar)
/// Jacobian scale. Large steps on multimodal scores need not be injective;
/// the root nearest the predictor is returned.
pub fn recover_previous_state(
    x_next: &[f64],
    (t, t_next): (f64, f64),
    model: &dyn ScoreModel,
    schedule: &DiffusionSchedule,
) -> Result<(Vec<f64>, usize)> {
    let mut meter = Meter::default();
    recover(x_next, (t, t_next), model, schedule, &mut meter).map(|x| (x, meter.max_iters))
}

fn recover(
    x_next: &[f64],
    (t, t_next): (f64, f64),
    model: &dyn ScoreModel,
    schedule: &DiffusionSchedule,
    meter: &mut Meter,
) -> Result<Vec<f64>> {
    let c = DdimCoeffs::new(t, t_next, schedule);
    let scale = 1.0 + norm_inf(x_next);
    // Predictor: the opposite-direction DDIM step from `x_next`.
    let mut x: Vec<f64> = {
        meter.evals += 1;
        let e = model.eps(x_next, t_next, schedule)?;
        DdimCoeffs::new(t_next, t, schedule).apply(x_next, &e)
    };
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    for iter in 0..RECOVERY_MAX_ITERS {
        meter.evals += 1;
        let eps = model.eps(&x, t, schedule)?;
        let resid: Vec<f64> = x
            .iter()
            .zip(&eps)
            .zip(x_next)
            .map(|((x, e), y)| c.a * x + c.b * e - y)
            .collect();
        if norm_inf(&resid) <= RECOVERY_TOL * scale {
            meter.max_iters = meter.max_iters.max(iter);
            return Ok(x);
        }
        let mut slope = 0.0;
        if let Some((px, pe)) = &prev {
            let dx: Vec<f64> = x.iter().zip(px).map(|(a, b)| a - b).collect();
            let de: Vec<f64> = eps.iter().zip(pe).map(|(a, b)| a - b).collect();
            let dd = dot(&dx, &dx);
            if dd > 0.0 {
                slope = dot(&de, &dx) / dd;
            }
        }
        let mut denom = c.a + c.b * slope;
        if !denom.is_finite() || denom == 0.0 {
            denom = c.a;
        }
        let next: Vec<f64> = x.iter().zip(&resid).map(|(x, r)| x - r / denom).collect();
        prev = Some((std::mem::replace(&mut x, next), eps));
        if x.iter().any(|v| !v.is_finite()) {
            break;
        }
    }
    // Dense Newton from the predictor with the Jacobian assembled row by row.
    let mut x: Vec<f64> = {
        meter.evals += 1;
        let e = model.eps(x_next, t_next, schedule)?;
        DdimCoeffs::new(t_next, t, schedule).apply(x_next, &e)
    };
    let d = x.len();
    for iter in 0..DENSE_MAX_ITERS {
        meter.evals += 1;
        let eps = model.eps(&x, t, schedule)?;
        let resid: Vec<f64> = x
            .iter()
            .zip(&eps)
            .zip(x_next)
            .map(|((x, e), y)| c.a * x + c.b * e - y)
            .collect();
        if norm_inf(&resid) <= RECOVERY_TOL * scale {
            meter.max_iters = meter.max_iters.max(RECOVERY_MAX_ITERS + iter);
            return Ok(x);
        }
        let mut jac = DMatrix::<f64>::zeros(d, d);
        let mut unit = vec![0.0; d];
        for i in 0..d {
            unit[i] = 1.0;
            meter.evals += 1;
            let row = model.eps_vjp(&x, t, schedule, &unit)?;
            unit[i] = 0.0;
            for (j, v) in row.iter().enumerate() {
                jac[(i, j)] = c.b * v;
            }
            jac[(i, i)] += c.a;
        }
        let Some(step) = jac.lu().solve(&DVector::from_vec(resid)) else {
            break;
        };
        for (x, s) in x.iter_mut().zip(step.iter()) {
            *x -= s;
        }
        if x.iter().any(|v| !v.is_finite()) {
            break;
        }
    }
    Err(Error::Integration {
        t,
        reason: RECOVERY_FAILURE.into(),
    })
}

fn clamp_pullback(m_hat: &[f64], g_rec: &[f64]) -> Vec<f64> {
    to_data(m_hat)
        .iter()
        .zip(g_rec)
        .map(|(v, g)| if *v > 0.0 && *v < 1.0 { 0.5 * g } else { 0.0 })
        .collect()
}

fn finish(x: &DataPoint, m_hat: &[f64], tail: &dyn LossTail) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let rec = DataPoint::from_model(m_hat).into_inner();
    let (loss, g_x, g_rec) = tail.eval(x, &rec)?;
    if g_x.len() != x.len() || g_rec.len() != x.len() {
        return Err(Error::config("loss tail returned cotangents of the wrong dimension"));
    }
    if !loss.is_finite() {
        return Err(Error::Integration {
            t: crate::sde::T_MIN,
            reason: "non-finite loss".into(),
        });
    }
    let a = clamp_pullback(m_hat, &g_rec);
    Ok((loss, rec, g_x, a))
}

fn adjoint_sweep(
    x0: Vec<f64>,
    plan: &[(f64, f64)],
    req: &GradRequest<'_>,
    model: &dyn ScoreModel,
    schedule: &DiffusionSchedule,
    meter: &mut Meter,
) -> Result<Sweep> {
    // The turnaround latent and the input are kept as anchors: recovery may
    // land on another preimage of a non-injective step without failing.
    let turn = plan.len() / 2;
    let mut anchor = None;
    let mut x = x0.clone();
    meter.hold(2);
    for (j, &step) in plan.iter().enumerate() {
        if j == turn {
            anchor = Some(x.clone());
            meter.hold(1);
        }
        x = ddim(&x, step, model, schedule, meter)?;
    }
    let (loss, rec, g_x, mut a) = finish(req.x, &x, req.tail)?;
    for (j, &step) in plan.iter().enumerate().rev() {
        let prev = recover(&x, step, model, schedule, meter)?;
        a = ddim_vjp(&prev, step, &a, model, schedule, meter)?;
        x = prev;
        if j == turn {
            check_anchor(&x, anchor.as_deref().unwrap_or(&x0), step.0)?;
        }
    }
    check_anchor(&x, &x0, crate::sde::T_MIN)?;
    Ok((loss, rec, g_x, a))
}

const ANCHOR_TOL: f64 = 1e-7;

fn check_anchor(recovered: &[f64], known: &[f64], t: f64) -> Result<()> {
    let gap: f64 = recovered.iter().zip(known).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if gap <= ANCHOR_TOL * (1.0 + norm_inf(known)) {
        Ok(())
    } else {
        Err(Error::Integration {
            t,
            reason: RECOVERY_FAILURE.into(),
        })
    }
}

type Sweep = (f64, Vec<f64>, Vec<f64>, Vec<f64>);

fn checkpointed(
    x0: Vec<f64>,
    plan: &[(f64, f64)],
    stride: usize,
    req: &GradRequest<'_>,
    model: &dyn ScoreModel,
    schedule: &DiffusionSchedule,
    meter: &mut Meter,
) -> Result<Sweep> {
    let n = plan.len();
    let stride = if stride == 0 {
        ((n as f64).sqrt().round() as usize).max(1)
    } else {
        stride
    };
    let mut checkpoints = vec![x0.clone()];
    meter.hold(1);
    let mut x = x0;
    for (j, &step) in plan.iter().enumerate() {
        x = ddim(&x, step, model, schedule, meter)?;
        if (j + 1) % stride == 0 && j + 1 < n {
            checkpoints.push(x.clone());
            meter.hold(1);
        }
    }
    let (loss, rec, g_x, mut a) = finish(req.x, &x, req.tail)?;
    for (seg, start) in checkpoints.iter().enumerate().rev() {
        let lo = seg * stride;
        let hi = (lo + stride).min(n);
        let mut states = vec![start.clone()];
        meter.hold(1);
        for &step in &plan[lo..hi - 1] {
            let next = ddim(states.last().unwrap(), step, model, schedule, meter)?;
            states.push(next);
            meter.hold(1);
        }
        for j in (lo..hi).rev() {
            a = ddim_vjp(&states[j - lo], plan[j], &a, model, schedule, meter)?;
        }
        meter.release(states.len());
    }
    Ok((loss, rec, g_x, a))
}

/// `∂L/∂x` for the round trip under the requested mode.
pub fn input_gradient(req: &GradRequest<'_>, model: &dyn ScoreModel, schedule: &DiffusionSchedule) -> Result<GradOutput> {
    if req.steps == 0 {
        return Err(Error::config("gradient request needs steps >= 1"));
    }
    Error::check_dim(model.dim(), req.x.dim())?;
    let plan = round_trip_steps(req.steps);
    let mut meter = Meter::default();
    let x0 = req.x.to_model();

    let (loss, rec, g_x, a) = match req.mode {
        GradMode::Unrolled => {
            let mut states = Vec::with_capacity(plan.len() + 1);
            states.push(x0);
            meter.hold(1);
            for &step in &plan {
                let next = ddim(states.last().unwrap(), step, model, schedule, &mut meter)?;
                states.push(next);
                meter.hold(1);
            }
            let (loss, rec, g_x, mut a) = finish(req.x, states.last().unwrap(), req.tail)?;
            for (j, &step) in plan.iter().enumerate().rev() {
                a = ddim_vjp(&states[j], step, &a, model, schedule, &mut meter)?;
            }
            (loss, rec, g_x, a)
        }
        GradMode::Adjoint => match adjoint_sweep(x0.clone(), &plan, req, model, schedule, &mut meter) {
            Err(Error::Integration { reason, .. }) if reason == RECOVERY_FAILURE => {
                meter.fallbacks += 1;
                meter.live = 0;
                checkpointed(x0, &plan, 0, req, model, schedule, &mut meter)?
            }
            other => other?,
        },
        GradMode::Checkpointed { stride } => checkpointed(x0, &plan, stride, req, model, schedule, &mut meter)?,
        GradMode::Continuous => {
            let mut x = x0;
            meter.hold(1);
            for &step in &plan {
                x = ddim(&x, step, model, schedule, &mut meter)?;
            }
            let (loss, rec, g_x, a) = finish(req.x, &x, req.tail)?;
            let mut s = AdjointState { x, a, t: crate::sde::T_MIN };
            meter.hold(1);
            // Undo the reconstruction leg (flow from 1 down to T_MIN), then
            // the inversion leg (flow from T_MIN up to 1).
            for &(t_from, t_to) in plan.iter().rev() {
                s = heun_adjoint_step(&s, t_from, t_to, model, schedule, &mut meter)?;
            }
            (loss, rec, g_x, s.a)
        }
    };

    let grad = g_x.iter().zip(&a).map(|(g, a)| g + 2.0 * a).collect();
    Ok(GradOutput {
        loss,
        rec,
        grad,
        telemetry: GradTelemetry {
            peak_states: meter.peak,
            model_evals: meter.evals,
            max_recovery_iters: meter.max_iters,
            fallbacks: meter.fallbacks,
        },
    })
}

/// One backward Heun step of the joint `(x, a)` system across a forward
/// flow step `t_from → t_to`, starting from `s.t == t_to`.
fn heun_adjoint_step(
    s: &AdjointState,
    t_from: f64,
    t_to: f64,
    model: &dyn ScoreModel,
    schedule: &DiffusionSchedule,
    meter: &mut Meter,
) -> Result<AdjointState> {
    let h = t_from - t_to;
    let s = AdjointState { t: t_to, ..s.clone() };
    meter.evals += 2;
    let (dx1, da1) = adjoint_ode_rhs(&s, model, schedule)?;
    let pred = AdjointState {
        x: s.x.iter().zip(&dx1).map(|(x, d)| x + h * d).collect(),
        a: s.a.iter().zip(&da1).map(|(a, d)| a + h * d).collect(),
        t: t_from,
    };
    meter.evals += 2;
    let (dx2, da2) = adjoint_ode_rhs(&pred, model, schedule)?;
    let mut x = s.x.clone();
    let mut a = s.a.clone();
    axpy(0.5 * h, &dx1, &mut x);
    axpy(0.5 * h, &dx2, &mut x);
    axpy(0.5 * h, &da1, &mut a);
    axpy(0.5 * h, &da2, &mut a);
    if a.iter().chain(&x).any(|v| !v.is_finite()) {
        return Err(Error::Integration {
            t: t_from,
            reason: "non-finite adjoint".into(),
        });
    }
    Ok(AdjointState { x, a, t: t_from })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_vec, stream, uniform_vec};
    use crate::score::{AnalyticScore, GaussianMixture};
    use crate::sde::T_MIN;

    fn sched() -> DiffusionSchedule {
        DiffusionSchedule::default()
    }

    fn quadratic_tail(w: Vec<f64>) -> impl Fn(&[f64], &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> + Sync {
        move |x: &[f64], rec: &[f64]| {
            let r: Vec<f64> = x.iter().zip(rec).map(|(a, b)| a - b).collect();
            let loss = r.iter().zip(&w).map(|(r, w)| w * r * r).sum::<f64>() + dot(&w, rec);
            let gx: Vec<f64> = r.iter().zip(&w).map(|(r, w)| 2.0 * w * r).collect();
            let grec: Vec<f64> = gx.iter().zip(&w).map(|(g, w)| -g + w).collect();
            Ok((loss, gx, grec))
        }
    }

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        num / crate::nn::norm2(b).max(1e-300)
    }

    #[test]
    fn stationary_gaussian_adjoint_is_constant() {
        let model = AnalyticScore::new(GaussianMixture::standard(3));
        let s = AdjointState {
            x: vec![0.3, -1.0, 0.2],
            a: vec![1.0, 2.0, -0.5],
            t: 0.4,
        };
        let (dx, da) = adjoint_ode_rhs(&s, &model, &sched()).unwrap();
        assert!(dx.iter().chain(&da).all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_adjoint_stays_zero() {
        let model = AnalyticScore::new(GaussianMixture::random(3, 2, 0.5, 0.05, &mut stream(0, 0)));
        let s = AdjointState {
            x: vec![0.3, -1.0, 0.2],
            a: vec![0.0; 3],
            t: 0.4,
        };
        let (_, da) = adjoint_ode_rhs(&s, &model, &sched()).unwrap();
        assert!(da.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_gaussian_adjoint_matches_closed_form() {
        // For N(μ, σ²I) the flow is affine with gain sqrt(c(t1)/c(t0)),
        // c(t) = ᾱσ² + 1 − ᾱ, so a(t0) = sqrt(c(t1)/c(t0)) a(t1).
        let sc = sched();
        let var = 0.04;
        let model = AnalyticScore::new(GaussianMixture::isotropic(vec![0.2, -0.1], var));
        let c = |t: f64| {
            let ab = sc.alpha_bar(t).unwrap();
            ab * var + 1.0 - ab
        };
        let (t0, t1) = (0.05, 0.6);
        let n = 4000;
        let h = (t0 - t1) / n as f64;
        let a1 = vec![1.0, -2.0];
        let mut s = AdjointState {
            x: vec![0.5, 0.1],
            a: a1.clone(),
            t: t1,
        };
        for _ in 0..n {
            let (dx1, da1) = adjoint_ode_rhs(&s, &model, &sc).unwrap();
            let p = AdjointState {
                x: s.x.iter().zip(&dx1).map(|(x, d)| x + h * d).collect(),
                a: s.a.iter().zip(&da1).map(|(a, d)| a + h * d).collect(),
                t: s.t + h,
            };
            let (dx2, da2) = adjoint_ode_rhs(&p, &model, &sc).unwrap();
            for i in 0..2 {
                s.x[i] += 0.5 * h * (dx1[i] + dx2[i]);
                s.a[i] += 0.5 * h * (da1[i] + da2[i]);
            }
            s.t += h;
        }
        let gain = (c(t1) / c(t0)).sqrt();
        for i in 0..2 {
            assert!((s.a[i] - gain * a1[i]).abs() < 1e-6 * gain, "{} vs {}", s.a[i], gain * a1[i]);
        }
    }

    #[test]
    fn joint_flow_preserves_pairing_derivative() {
        let sc = sched();
        let mut rng = stream(9, 0);
        let model = AnalyticScore::new(GaussianMixture::random(4, 3, 0.6, 0.1, &mut rng));
        let s = AdjointState {
            x: normal_vec(&mut rng, 4),
            a: normal_vec(&mut rng, 4),
            t: 0.3,
        };
        let (dx, da) = adjoint_ode_rhs(&s, &model, &sc).unwrap();
        let analytic = dot(&da, &s.x) + dot(&s.a, &dx);
        let h = 1e-3;
        let pair_at = |sign: f64| {
            let sub = 50;
            let dt = sign * h / sub as f64;
            let mut st = s.clone();
            for _ in 0..sub {
                let (dx1, da1) = adjoint_ode_rhs(&st, &model, &sc).unwrap();
                let p = AdjointState {
                    x: st.x.iter().zip(&dx1).map(|(x, d)| x + dt * d).collect(),
                    a: st.a.iter().zip(&da1).map(|(a, d)| a + dt * d).collect(),
                    t: st.t + dt,
                };
                let (dx2, da2) = adjoint_ode_rhs(&p, &model, &sc).unwrap();
                for i in 0..st.x.len() {
                    st.x[i] += 0.5 * dt * (dx1[i] + dx2[i]);
                    st.a[i] += 0.5 * dt * (da1[i] + da2[i]);
                }
                st.t += dt;
            }
            dot(&st.a, &st.x)
        };
        let fd = (pair_at(1.0) - pair_at(-1.0)) / (2.0 * h);
        assert!((fd - analytic).abs() <= 1e-4 * analytic.abs().max(1e-3), "{fd} vs {analytic}");
    }

    #[test]
    fn recovery_inverts_a_step() {
        let sc = sched();
        let mut rng = stream(4, 0);
        let model = AnalyticScore::new(GaussianMixture::random(8, 4, 0.5, 0.01, &mut rng));
        for &(t, t2) in &[(T_MIN, 0.05), (0.05, T_MIN), (0.5, 0.45), (0.9, 1.0)] {
            let x = normal_vec(&mut rng, 8);
            let eps = model.eps(&x, t, &sc).unwrap();
            let y = DdimCoeffs::new(t, t2, &sc).apply(&x, &eps);
            let (back, _) = recover_previous_state(&y, (t, t2), &model, &sc).unwrap();
            assert!(norm_inf(&back.iter().zip(&x).map(|(a, b)| a - b).collect::<Vec<_>>()) < 1e-11);
        }
    }

    #[test]
    fn single_step_adjoint_equals_unrolled() {
        let sc = sched();
        let mut rng = stream(5, 0);
        let model = AnalyticScore::new(GaussianMixture::random(6, 3, 0.5, 0.05, &mut rng));
        let x = DataPoint::new(uniform_vec(&mut rng, 6, 0.2, 0.8)).unwrap();
        let tail = quadratic_tail(uniform_vec(&mut rng, 6, 0.5, 1.5));
        let mk = |mode| GradRequest { x: &x, tail: &tail, steps: 1, mode };
        let adj = input_gradient(&mk(GradMode::Adjoint), &model, &sc).unwrap();
        let unr = input_gradient(&mk(GradMode::Unrolled), &model, &sc).unwrap();
        for (a, b) in adj.grad.iter().zip(&unr.grad) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        assert_eq!(adj.loss, unr.loss);
    }

    #[test]
    fn modes_agree_and_match_finite_differences() {
        let sc = sched();
        let mut rng = stream(6, 0);
        let model = AnalyticScore::new(GaussianMixture::random(5, 3, 0.4, 0.05, &mut rng));
        let x = DataPoint::new(uniform_vec(&mut rng, 5, 0.3, 0.7)).unwrap();
        let tail = quadratic_tail(uniform_vec(&mut rng, 5, 0.5, 1.5));
        let mk = |mode| GradRequest { x: &x, tail: &tail, steps: 20, mode };
        let unr = input_gradient(&mk(GradMode::Unrolled), &model, &sc).unwrap();
        let adj = input_gradient(&mk(GradMode::Adjoint), &model, &sc).unwrap();
        let chk = input_gradient(&mk(GradMode::Checkpointed { stride: 0 }), &model, &sc).unwrap();
        assert!(rel(&adj.grad, &unr.grad) < 1e-6);
        assert!(rel(&chk.grad, &unr.grad) < 1e-12);

        let h = 1e-6;
        let fd: Vec<f64> = (0..5)
            .map(|i| {
                let eval = |d: f64| {
                    let mut v = x.to_vec();
                    v[i] += d;
                    let p = DataPoint::new(v).unwrap();
                    input_gradient(&GradRequest { x: &p, tail: &tail, steps: 20, mode: GradMode::Unrolled }, &model, &sc)
                        .unwrap()
                        .loss
                };
                (eval(h) - eval(-h)) / (2.0 * h)
            })
            .collect();
        assert!(rel(&adj.grad, &fd) < 1e-4, "{:?} vs {fd:?}", adj.grad);
    }

    #[test]
    fn continuous_mode_approaches_discrete() {
        let sc = sched();
        let mut rng = stream(7, 0);
        let model = AnalyticScore::new(GaussianMixture::random(4, 2, 0.4, 0.2, &mut rng));
        let x = DataPoint::new(uniform_vec(&mut rng, 4, 0.3, 0.7)).unwrap();
        let tail = quadratic_tail(vec![1.0; 4]);
        let mk = |mode| GradRequest { x: &x, tail: &tail, steps: 80, mode };
        let cont = input_gradient(&mk(GradMode::Continuous), &model, &sc).unwrap();
        let adj = input_gradient(&mk(GradMode::Adjoint), &model, &sc).unwrap();
        assert!(rel(&cont.grad, &adj.grad) < 0.1, "{:?} vs {:?}", cont.grad, adj.grad);
    }

    #[test]
    fn adjoint_memory_is_flat_in_steps() {
        let sc = sched();
        let mut rng = stream(8, 0);
        let model = AnalyticScore::new(GaussianMixture::random(4, 2, 0.4, 0.05, &mut rng));
        let x = DataPoint::new(uniform_vec(&mut rng, 4, 0.3, 0.7)).unwrap();
        let tail = quadratic_tail(vec![1.0; 4]);
        let peaks: Vec<(usize, usize)> = [10, 40, 160]
            .iter()
            .map(|&n| {
                let adj = input_gradient(&GradRequest { x: &x, tail: &tail, steps: n, mode: GradMode::Adjoint }, &model, &sc).unwrap();
                let unr = input_gradient(&GradRequest { x: &x, tail: &tail, steps: n, mode: GradMode::Unrolled }, &model, &sc).unwrap();
                (adj.telemetry.peak_states, unr.telemetry.peak_states)
            })
            .collect();
        assert!(peaks.iter().all(|p| p.0 == peaks[0].0));
        assert_eq!(peaks[2].1, 2 * 160 + 1);
    }

    #[test]
    fn zero_steps_is_a_config_error() {
        let model = AnalyticScore::new(GaussianMixture::standard(2));
        let x = DataPoint::new(vec![0.5, 0.5]).unwrap();
        let tail = quadratic_tail(vec![1.0; 2]);
        let req = GradRequest { x: &x, tail: &tail, steps: 0, mode: GradMode::Adjoint };
        assert!(matches!(input_gradient(&req, &model, &sched()), Err(Error::Config(_))));
    }
}
