use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ScoreModel;
use crate::error::{Error, Result};
use crate::rng::normal_vec;
use crate::sde::DiffusionSchedule;

/// Mixture of isotropic Gaussians in model space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    variances: Vec<f64>,
}

/// Per-component terms of the noised mixture at one `(x, t)`.
struct Noised {
    resp: Vec<f64>,
    /// `x − sqrt(ᾱ) μ_k`, flattened `K × d`.
    diff: Vec<f64>,
    var: Vec<f64>,
    log_density: f64,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || variances.len() != k {
            return Err(Error::config("mixture needs matching non-empty weights, means and variances"));
        }
        if weights.iter().any(|w| !(*w > 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::config("mixture weights must be positive and sum to 1"));
        }
        if variances.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::config("mixture variances must be positive"));
        }
        let d = means[0].len();
        for m in &means {
            Error::check_dim(d, m.len())?;
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::config("mixture means must be finite"));
            }
        }
        Ok(Self {
            weights,
            means,
            variances,
        })
    }

    /// `N(0, I)` in `d` dimensions; stationary under the VP flow.
    pub fn standard(d: usize) -> Self {
        Self::isotropic(vec![0.0; d], 1.0)
    }

    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Self {
        Self {
            weights: vec![1.0],
            means: vec![mean],
            variances: vec![variance],
        }
    }

    /// Equal-weight mixture with means uniform in `[−spread, spread]^d`.
    pub fn random<R: Rng + ?Sized>(d: usize, k: usize, spread: f64, variance: f64, rng: &mut R) -> Self {
        let means = (0..k)
            .map(|_| (0..d).map(|_| rng.random_range(-spread..=spread)).collect())
            .collect();
        Self {
            weights: vec![1.0 / k as f64; k],
            means,
            variances: vec![variance; k],
        }
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Per-coordinate second moment `E[x²]` averaged over coordinates.
    pub fn second_moment(&self) -> f64 {
        let d = self.dim() as f64;
        self.weights
            .iter()
            .zip(&self.means)
            .zip(&self.variances)
            .map(|((w, m), v)| w * (v + m.iter().map(|x| x * x).sum::<f64>() / d))
            .sum()
    }

    /// Means offset by `delta` in every coordinate, variances scaled by `var_scale`.
    pub fn perturbed(&self, delta: f64, var_scale: f64) -> Result<Self> {
        Self::new(
            self.weights.clone(),
            self.means.iter().map(|m| m.iter().map(|v| v + delta).collect()).collect(),
            self.variances.iter().map(|v| v * var_scale).collect(),
        )
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = self.components() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let sd = self.variances[k].sqrt();
        normal_vec(rng, self.dim())
            .into_iter()
            .zip(&self.means[k])
            .map(|(z, m)| m + sd * z)
            .collect()
    }

    fn noised(&self, x: &[f64], t: f64, schedule: &DiffusionSchedule) -> Result<Noised> {
        Error::check_dim(self.dim(), x.len())?;
        let ab = schedule.alpha_bar(t)?;
        let sa = ab.sqrt();
        let d = self.dim();
        let k = self.components();
        let mut diff = Vec::with_capacity(k * d);
        let mut var = Vec::with_capacity(k);
        let mut logp = Vec::with_capacity(k);
        for ((w, mu), s2) in self.weights.iter().zip(&self.means).zip(&self.variances) {
            let v = ab * s2 + (1.0 - ab);
            let mut sq = 0.0;
            for (xi, mi) in x.iter().zip(mu) {
                let r = xi - sa * mi;
                sq += r * r;
                diff.push(r);
            }
            var.push(v);
            logp.push(w.ln() - 0.5 * sq / v - 0.5 * d as f64 * (2.0 * std::f64::consts::PI * v).ln());
        }
        let max = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut resp: Vec<f64> = logp.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = resp.iter().sum();
        resp.iter_mut().for_each(|r| *r /= z);
        Ok(Noised {
            resp,
            diff,
            var,
            log_density: max + z.ln(),
        })
    }

    /// `log p_t(x)` of the noised mixture `Σ w_k N(sqrt(ᾱ) μ_k, (ᾱσ_k² + 1 − ᾱ) I)`.
    pub fn noised_log_density(&self, x: &[f64], t: f64, schedule: &DiffusionSchedule) -> Result<f64> {
        Ok(self.noised(x, t, schedule)?.log_density)
    }

    /// Exact `∇_x log p_t(x)`.
    pub fn score(&self, x: &[f64], t: f64, schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
        let n = self.noised(x, t, schedule)?;
        let d = self.dim();
        let mut s = vec![0.0; d];
        for (k, (r, v)) in n.resp.iter().zip(&n.var).enumerate() {
            let c = -r / v;
            for (si, di) in s.iter_mut().zip(&n.diff[k * d..(k + 1) * d]) {
                *si += c * di;
            }
        }
        Ok(s)
    }

    /// `vᵀ ∇²_x log p_t(x)` from the closed-form Hessian
    /// `Σ r_k (s_k s_kᵀ − I/v_k) − s sᵀ`.
    pub fn score_vjp(&self, x: &[f64], t: f64, schedule: &DiffusionSchedule, v: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim(self.dim(), v.len())?;
        let n = self.noised(x, t, schedule)?;
        let d = self.dim();
        let mut out = vec![0.0; d];
        let mut s = vec![0.0; d];
        for (k, (r, var)) in n.resp.iter().zip(&n.var).enumerate() {
            let diff = &n.diff[k * d..(k + 1) * d];
            // s_k = −diff / var
            let sk_dot_v = -crate::nn::dot(diff, v) / var;
            let c_outer = r * sk_dot_v * (-1.0 / var);
            for i in 0..d {
                out[i] += -r / var * v[i] + c_outer * diff[i];
                s[i] += -r / var * diff[i];
            }
        }
        let s_dot_v = crate::nn::dot(&s, v);
        for (o, si) in out.iter_mut().zip(&s) {
            *o -= si * s_dot_v;
        }
        Ok(out)
    }
}

/// [`ScoreModel`] backed by the exact score of a [`GaussianMixture`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticScore {
    pub mixture: GaussianMixture,
}

impl AnalyticScore {
    pub fn new(mixture: GaussianMixture) -> Self {
        Self { mixture }
    }
}

impl ScoreModel for AnalyticScore {
    fn dim(&self) -> usize {
        self.mixture.dim()
    }

    fn eps(&self, x: &[f64], t: f64, schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
        let s = -schedule.sigma(t);
        Ok(self.mixture.score(x, t, schedule)?.into_iter().map(|v| s * v).collect())
    }

    fn eps_vjp(&self, x: &[f64], t: f64, schedule: &DiffusionSchedule, v: &[f64]) -> Result<Vec<f64>> {
        let s = -schedule.sigma(t);
        Ok(self
            .mixture
            .score_vjp(x, t, schedule, v)?
            .into_iter()
            .map(|g| s * g)
            .collect())
    }

    fn score(&self, x: &[f64], t: f64, schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
        self.mixture.score(x, t, schedule)
    }

    fn score_vjp(&self, x: &[f64], t: f64, schedule: &DiffusionSchedule, v: &[f64]) -> Result<Vec<f64>> {
        self.mixture.score_vjp(x, t, schedule, v)
    }
}
