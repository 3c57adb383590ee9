//! Noise-prediction models `ε_θ(x, t)` in model space.
//!
//! Two families implement [`ScoreModel`]: exact scores of noised isotropic
//! Gaussian mixtures and small trained denoiser networks. Conversions use
//! `score = −ε / sqrt(1 − ᾱ(t))`.

mod denoiser;
mod generator;
mod gmm;

pub use denoiser::{train_denoiser, DenoiserNet, DenoiserTrainConfig, Optimizer, TrainingSource};
pub use generator::{generate_fakes, make_generator, GeneratorKind, GeneratorSpec, ScoreBackbone};
pub use gmm::{AnalyticScore, GaussianMixture};

use crate::error::Result;
use crate::sde::DiffusionSchedule;

pub trait ScoreModel: Send + Sync {
    fn dim(&self) -> usize;

    /// `ε_θ(x, t)`.
    fn eps(&self, x: &[f64], t: f64, schedule: &DiffusionSchedule) -> Result<Vec<f64>>;

    /// `vᵀ ∂ε_θ/∂x` at `(x, t)`.
    fn eps_vjp(&self, x: &[f64], t: f64, schedule: &DiffusionSchedule, v: &[f64]) -> Result<Vec<f64>>;

    /// Prediction and VJP at the same point; models override this when the
    /// two can share a forward pass.
    fn eps_and_vjp(
        &self,
        x: &[f64],
        t: f64,
        schedule: &DiffusionSchedule,
        v: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((self.eps(x, t, schedule)?, self.eps_vjp(x, t, schedule, v)?))
    }

    fn score(&self, x: &[f64], t: f64, schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
        let s = -1.0 / schedule.sigma(t);
        Ok(self.eps(x, t, schedule)?.into_iter().map(|e| s * e).collect())
    }

    fn score_vjp(&self, x: &[f64], t: f64, schedule: &DiffusionSchedule, v: &[f64]) -> Result<Vec<f64>> {
        let s = -1.0 / schedule.sigma(t);
        Ok(self.eps_vjp(x, t, schedule, v)?.into_iter().map(|e| s * e).collect())
    }
}
