use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{train_denoiser, AnalyticScore, DenoiserNet, DenoiserTrainConfig, GaussianMixture, ScoreModel, TrainingSource};
use crate::error::{Error, Result};
use crate::rng::{normal_vec, stream};
use crate::sde::{reconstruct, DataPoint, DiffusionSchedule, TrajectoryState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GeneratorKind {
    AnalyticExact,
    AnalyticShifted {
        #[serde(default)]
        mean_offset: f64,
        #[serde(default = "one")]
        var_scale: f64,
    },
    Trained {
        seed: u64,
        hidden: usize,
        #[serde(default)]
        train: Option<DenoiserTrainConfig>,
    },
}

/// Training length of the default trained generators.
const TRAINED_GENERATOR_ITERS: usize = 500;

fn one() -> f64 {
    1.0
}

/// One toy generative source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: GeneratorKind,
}

impl GeneratorSpec {
    /// Four stand-ins for distinct diffusion backbones.
    pub fn default_grid() -> Vec<GeneratorSpec> {
        vec![
            GeneratorSpec {
                id: "shift-mean".into(),
                kind: GeneratorKind::AnalyticShifted {
                    mean_offset: 0.06,
                    var_scale: 1.0,
                },
            },
            GeneratorSpec {
                id: "scale-var".into(),
                kind: GeneratorKind::AnalyticShifted {
                    mean_offset: 0.0,
                    var_scale: 0.6,
                },
            },
            GeneratorSpec {
                id: "net-32".into(),
                kind: GeneratorKind::Trained {
                    seed: 1,
                    hidden: 32,
                    train: Some(TRAINED_GENERATOR_ITERS.into()),
                },
            },
            GeneratorSpec {
                id: "net-64".into(),
                kind: GeneratorKind::Trained {
                    seed: 2,
                    hidden: 64,
                    train: Some(TRAINED_GENERATOR_ITERS.into()),
                },
            },
        ]
    }
}

/// Serializable score model used as a generator or detector backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ScoreBackbone {
    Analytic(AnalyticScore),
    Net(DenoiserNet),
}

impl ScoreBackbone {
    fn inner(&self) -> &dyn ScoreModel {
        match self {
            ScoreBackbone::Analytic(a) => a,
            ScoreBackbone::Net(n) => n,
        }
    }
}

impl ScoreModel for ScoreBackbone {
    fn dim(&self) -> usize {
        self.inner().dim()
    }

    fn eps(&self, x: &[f64], t: f64, schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
        self.inner().eps(x, t, schedule)
    }

    fn eps_vjp(&self, x: &[f64], t: f64, schedule: &DiffusionSchedule, v: &[f64]) -> Result<Vec<f64>> {
        self.inner().eps_vjp(x, t, schedule, v)
    }

    fn eps_and_vjp(&self, x: &[f64], t: f64, schedule: &DiffusionSchedule, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.inner().eps_and_vjp(x, t, schedule, v)
    }

    fn score(&self, x: &[f64], t: f64, schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
        self.inner().score(x, t, schedule)
    }

    fn score_vjp(&self, x: &[f64], t: f64, schedule: &DiffusionSchedule, v: &[f64]) -> Result<Vec<f64>> {
        self.inner().score_vjp(x, t, schedule, v)
    }
}

/// Builds the score model of a generator relative to the true data mixture.
pub fn make_generator(spec: &GeneratorSpec, base: &GaussianMixture, schedule: &DiffusionSchedule) -> Result<ScoreBackbone> {
    if spec.id.is_empty() {
        return Err(Error::config("generator id must be non-empty"));
    }
    Ok(match &spec.kind {
        GeneratorKind::AnalyticExact => ScoreBackbone::Analytic(AnalyticScore::new(base.clone())),
        GeneratorKind::AnalyticShifted { mean_offset, var_scale } => {
            ScoreBackbone::Analytic(AnalyticScore::new(base.perturbed(*mean_offset, *var_scale)?))
        }
        GeneratorKind::Trained { seed, hidden, train } => {
            if *hidden == 0 {
                return Err(Error::config("trained generator needs hidden > 0"));
            }
            let cfg = DenoiserTrainConfig {
                seed: *seed,
                ..train.unwrap_or_default()
            };
            let net = DenoiserNet::new(base.dim(), &[*hidden, *hidden], &mut stream(*seed, 0x6E7))
                .preconditioned(base.second_moment().sqrt())?;
            let (net, _) = train_denoiser(net, TrainingSource::Mixture(base), &cfg, schedule)?;
            ScoreBackbone::Net(net)
        }
    })
}

/// Samples `n` fakes by reconstructing seed-keyed Gaussian noise with the
/// deterministic sampler.
pub fn generate_fakes(
    model: &dyn ScoreModel,
    n: usize,
    steps: usize,
    seed: u64,
    schedule: &DiffusionSchedule,
) -> Result<Vec<DataPoint>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let noise = normal_vec(&mut stream(seed, i as u64), model.dim());
            reconstruct(&TrajectoryState { x: noise, t: 1.0 }, steps, model, schedule)
        })
        .collect()
}
