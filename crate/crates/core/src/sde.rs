//! Variance-preserving diffusion schedule, the probability-flow ODE and the
//! deterministic DDIM inversion/reconstruction maps.
//!
//! Data points live in `[0, 1]^d`; score models see the affine image in
//! `[-1, 1]^d` ("model space"). All trajectories run on the time domain
//! `[T_MIN, 1]`.

use serde::{Deserialize, Serialize};
use std::ops::Deref;

use crate::error::{Error, Result};
use crate::score::ScoreModel;

/// Lower clamp of the time domain; keeps `sqrt(1 - ᾱ)` away from zero.
pub const T_MIN: f64 = 1e-3;

const TIME_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
    /// Discretization count of the full time axis (used for SDE step sizing).
    pub steps: usize,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
            steps: 1000,
        }
    }
}

impl DiffusionSchedule {
    pub fn new(beta_min: f64, beta_max: f64, steps: usize) -> Result<Self> {
        if !(beta_min > 0.0 && beta_max >= beta_min && beta_max.is_finite()) {
            return Err(Error::config(format!(
                "invalid beta range [{beta_min}, {beta_max}]"
            )));
        }
        if steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        Ok(Self {
            beta_min,
            beta_max,
            steps,
        })
    }

    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min)
    }

    /// `g(t)² = β(t)`.
    pub fn g2(&self, t: f64) -> f64 {
        self.beta(t)
    }

    /// `ᾱ(t) = exp(−∫₀ᵗ β)`.
    pub fn alpha_bar(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(self.alpha_bar_at(t))
    }

    pub(crate) fn alpha_bar_at(&self, t: f64) -> f64 {
        (-t * self.beta_min - 0.5 * t * t * (self.beta_max - self.beta_min)).exp()
    }

    /// `sqrt(1 − ᾱ(t))`, the noise standard deviation of the marginal at `t`.
    pub fn sigma(&self, t: f64) -> f64 {
        (-(-t * self.beta_min - 0.5 * t * t * (self.beta_max - self.beta_min)).exp_m1()).sqrt()
    }
}

fn check_time(t: f64) -> Result<()> {
    if (-TIME_EPS..=1.0 + TIME_EPS).contains(&t) && t.is_finite() {
        Ok(())
    } else {
        Err(Error::TimeDomain(t))
    }
}

/// A toy image: a finite vector in `[0, 1]^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DataPoint(Vec<f64>);

impl DataPoint {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("data point has non-finite entries"));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config("data point outside [0, 1]"));
        }
        Ok(Self(values))
    }

    /// Clamps into `[0, 1]` instead of rejecting.
    pub fn clamped(mut values: Vec<f64>) -> Self {
        for v in &mut values {
            *v = if v.is_nan() { 0.5 } else { v.clamp(0.0, 1.0) };
        }
        Self(values)
    }

    pub fn from_model(x: &[f64]) -> Self {
        Self::clamped(x.iter().map(|v| 0.5 * (v + 1.0)).collect())
    }

    pub fn to_model(&self) -> Vec<f64> {
        to_model(&self.0)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for DataPoint {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub fn to_model(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| 2.0 * v - 1.0).collect()
}

/// Unclamped inverse of [`to_model`].
pub fn to_data(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| 0.5 * (v + 1.0)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryState {
    pub x: Vec<f64>,
    pub t: f64,
}

/// Closed-form VP marginal `x_t = sqrt(ᾱ) x0 + sqrt(1 − ᾱ) noise` in model space.
pub fn forward_diffuse(
    x0: &DataPoint,
    t: f64,
    noise: &[f64],
    schedule: &DiffusionSchedule,
) -> Result<TrajectoryState> {
    Error::check_dim(x0.dim(), noise.len())?;
    let ab = schedule.alpha_bar(t)?;
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x = x0
        .iter()
        .zip(noise)
        .map(|(v, n)| a * (2.0 * v - 1.0) + s * n)
        .collect();
    Ok(TrajectoryState { x, t })
}

/// Probability-flow velocity `f(x,t) − ½ g(t)² ∇log p_t(x)`.
pub fn ode_rhs(state: &TrajectoryState, model: &dyn ScoreModel, schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
    check_time(state.t)?;
    let t = state.t.max(T_MIN);
    let score = model.score(&state.x, t, schedule)?;
    let beta = schedule.beta(t);
    Ok(state
        .x
        .iter()
        .zip(&score)
        .map(|(x, s)| -0.5 * beta * (x + s))
        .collect())
}

/// Coefficients of the DDIM update `x' = a·x + b·ε̂` from `t` to `t_next`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DdimCoeffs {
    pub a: f64,
    pub b: f64,
}

impl DdimCoeffs {
    pub fn new(t: f64, t_next: f64, schedule: &DiffusionSchedule) -> Self {
        let ab = schedule.alpha_bar_at(t);
        let ab_next = schedule.alpha_bar_at(t_next);
        let a = (ab_next / ab).sqrt();
        let b = schedule.sigma(t_next) - a * schedule.sigma(t);
        Self { a, b }
    }

    pub fn apply(&self, x: &[f64], eps: &[f64]) -> Vec<f64> {
        x.iter().zip(eps).map(|(x, e)| self.a * x + self.b * e).collect()
    }
}

fn check_step(t: f64, t_next: f64) -> Result<()> {
    for s in [t, t_next] {
        if !(T_MIN - TIME_EPS..=1.0 + TIME_EPS).contains(&s) {
            return Err(Error::Integration {
                t: s,
                reason: "step leaves the time domain".into(),
            });
        }
    }
    Ok(())
}

/// One DDIM step with `ε̂ = ε_θ(x, t)`. Positive `dt` inverts (toward noise),
/// negative `dt` reconstructs.
pub fn ddim_step(
    state: &TrajectoryState,
    dt: f64,
    model: &dyn ScoreModel,
    schedule: &DiffusionSchedule,
) -> Result<TrajectoryState> {
    let t_next = state.t + dt;
    check_step(state.t, t_next)?;
    if dt == 0.0 {
        return Ok(state.clone());
    }
    let eps = model.eps(&state.x, state.t, schedule)?;
    let x = DdimCoeffs::new(state.t, t_next, schedule).apply(&state.x, &eps);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Integration {
            t: state.t,
            reason: "non-finite state".into(),
        });
    }
    Ok(TrajectoryState { x, t: t_next })
}

/// Grid point `i` of the uniform `steps`-interval grid on `[T_MIN, 1]`.
pub fn grid_time(i: usize, steps: usize) -> f64 {
    if i == steps {
        1.0
    } else {
        T_MIN + (1.0 - T_MIN) * i as f64 / steps as f64
    }
}

fn step_between(
    x: &[f64],
    t: f64,
    t_next: f64,
    model: &dyn ScoreModel,
    schedule: &DiffusionSchedule,
) -> Result<Vec<f64>> {
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

fn check_steps(steps: usize) -> Result<()> {
    if steps == 0 {
        Err(Error::config("solver needs at least one step"))
    } else {
        Ok(())
    }
}

/// Integrate the grid from `T_MIN` to 1 in model space.
pub fn invert_model(x: &[f64], steps: usize, model: &dyn ScoreModel, schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
    check_steps(steps)?;
    let mut x = x.to_vec();
    for i in 0..steps {
        x = step_between(&x, grid_time(i, steps), grid_time(i + 1, steps), model, schedule)?;
    }
    Ok(x)
}

/// Integrate the grid from 1 down to `T_MIN`; no clamping.
pub fn reconstruct_model(x: &[f64], steps: usize, model: &dyn ScoreModel, schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
    check_steps(steps)?;
    let mut x = x.to_vec();
    for i in (0..steps).rev() {
        x = step_between(&x, grid_time(i + 1, steps), grid_time(i, steps), model, schedule)?;
    }
    Ok(x)
}

/// `Ψ_inv`: data point to its terminal latent at `t = 1`.
pub fn invert(x0: &DataPoint, steps: usize, model: &dyn ScoreModel, schedule: &DiffusionSchedule) -> Result<TrajectoryState> {
    Error::check_dim(model.dim(), x0.dim())?;
    let x = invert_model(&x0.to_model(), steps, model, schedule)?;
    Ok(TrajectoryState { x, t: 1.0 })
}

/// `Ψ_rec`: terminal latent back to a clamped data point.
pub fn reconstruct(
    xt: &TrajectoryState,
    steps: usize,
    model: &dyn ScoreModel,
    schedule: &DiffusionSchedule,
) -> Result<DataPoint> {
    Error::check_dim(model.dim(), xt.x.len())?;
    if (xt.t - 1.0).abs() > TIME_EPS {
        return Err(Error::Integration {
            t: xt.t,
            reason: "reconstruction starts from t = 1".into(),
        });
    }
    let x = reconstruct_model(&xt.x, steps, model, schedule)?;
    Ok(DataPoint::from_model(&x))
}

/// `Ψ_rec(Ψ_inv(x))`.
pub fn round_trip(x0: &DataPoint, steps: usize, model: &dyn ScoreModel, schedule: &DiffusionSchedule) -> Result<DataPoint> {
    let xt = invert(x0, steps, model, schedule)?;
    reconstruct(&xt, steps, model, schedule)
}

/// Heun integration of the probability-flow ODE between two times. Used as
/// an independent reference for the DDIM maps.
pub fn integrate_flow_heun(
    x: &[f64],
    t0: f64,
    t1: f64,
    steps: usize,
    model: &dyn ScoreModel,
    schedule: &DiffusionSchedule,
) -> Result<Vec<f64>> {
    check_steps(steps)?;
    let h = (t1 - t0) / steps as f64;
    let mut state = TrajectoryState { x: x.to_vec(), t: t0 };
    for i in 0..steps {
        let t = t0 + h * i as f64;
        state.t = t;
        let k1 = ode_rhs(&state, model, schedule)?;
        let pred = TrajectoryState {
            x: state.x.iter().zip(&k1).map(|(x, k)| x + h * k).collect(),
            t: t + h,
        };
        let k2 = ode_rhs(&pred, model, schedule)?;
        for ((x, a), b) in state.x.iter_mut().zip(&k1).zip(&k2) {
            *x += 0.5 * h * (a + b);
        }
    }
    Ok(state.x)
}
