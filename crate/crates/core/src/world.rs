//! The toy experimental world: the real mixture, generators, labeled splits,
//! the shared autoencoder and one detector per (kind, generator).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{train_autoencoder, AeTrainConfig, AutoEncoder};
use crate::detectors::{
    train_detector, train_latent_denoiser, Backbone, ClassifierTrainConfig, Detector, DetectorKind,
    DetectorTrainConfig, FeatureConfig, FeatureExtractor, LabeledDataset, Split, TrainReport,
};
use crate::error::{Error, Result};
use crate::rng::{label_salt, mix, stream};
use crate::score::{generate_fakes, make_generator, DenoiserTrainConfig, GaussianMixture, GeneratorSpec, ScoreBackbone};
use crate::sde::{to_data, DataPoint, DiffusionSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AeSpec {
    pub hidden: usize,
    /// `0` means `dim / 4`.
    pub latent: usize,
    pub train: AeTrainConfig,
}

impl Default for AeSpec {
    fn default() -> Self {
        Self {
            hidden: 64,
            latent: 0,
            train: AeTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatentSpec {
    pub hidden: usize,
    pub train: DenoiserTrainConfig,
}

impl Default for LatentSpec {
    fn default() -> Self {
        Self {
            hidden: 32,
            train: DenoiserTrainConfig {
                iters: 2000,
                ..Default::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub seed: u64,
    pub dim: usize,
    pub components: usize,
    /// Mixture means are uniform in `[−spread, spread]^d` (model space).
    pub spread: f64,
    pub variance: f64,
    pub schedule: DiffusionSchedule,
    pub generators: Vec<GeneratorSpec>,
    /// DDIM steps used to sample fakes.
    pub sample_steps: usize,
    pub features: FeatureConfig,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub ae: AeSpec,
    pub latent: LatentSpec,
    pub classifier: ClassifierTrainConfig,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: 64,
            components: 4,
            spread: 0.5,
            variance: 0.01,
            schedule: DiffusionSchedule::default(),
            generators: GeneratorSpec::default_grid(),
            sample_steps: 50,
            features: FeatureConfig::default(),
            train_per_class: 1000,
            val_per_class: 500,
            test_per_class: 500,
            ae: AeSpec::default(),
            latent: LatentSpec::default(),
            classifier: ClassifierTrainConfig::default(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.components == 0 {
            return Err(Error::config("world needs dim >= 2 and at least one component"));
        }
        if !(self.variance > 0.0) || !(self.spread >= 0.0) {
            return Err(Error::config("mixture needs variance > 0 and spread >= 0"));
        }
        if self.generators.is_empty() {
            return Err(Error::config("world needs at least one generator"));
        }
        let mut ids: Vec<&str> = self.generators.iter().map(|g| g.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("generator ids must be unique"));
        }
        if self.train_per_class == 0 || self.val_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::config("every split needs at least one sample per class"));
        }
        if self.sample_steps == 0 {
            return Err(Error::config("sample_steps must be >= 1"));
        }
        if self.latent_dim() >= self.dim || self.latent_dim() == 0 {
            return Err(Error::config("autoencoder latent must be in [1, dim)"));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        if self.ae.latent == 0 {
            (self.dim / 4).max(1)
        } else {
            self.ae.latent
        }
    }

    pub fn per_class(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_class,
            Split::Val => self.val_per_class,
            Split::Test => self.test_per_class,
        }
    }

    pub fn mixture(&self) -> GaussianMixture {
        GaussianMixture::random(self.dim, self.components, self.spread, self.variance, &mut stream(self.seed, 0x6D1))
    }
}

pub const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

fn split_salt(split: Split) -> u64 {
    match split {
        Split::Train => 1,
        Split::Val => 2,
        Split::Test => 3,
    }
}

/// Draws from the true mixture, mapped to data space and clamped.
pub fn sample_real(mixture: &GaussianMixture, n: usize, seed: u64) -> Vec<DataPoint> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| DataPoint::clamped(to_data(&mixture.sample(&mut stream(seed, i)))))
        .collect()
}

pub fn real_split(cfg: &WorldConfig, mixture: &GaussianMixture, split: Split) -> Vec<DataPoint> {
    sample_real(mixture, cfg.per_class(split), mix(cfg.seed, 0x4EA1 + split_salt(split)))
}

pub fn fake_split(cfg: &WorldConfig, generator: &Generator, split: Split) -> Result<Vec<DataPoint>> {
    let seed = mix(mix(cfg.seed, label_salt(&generator.spec.id)), split_salt(split));
    generate_fakes(&generator.model, cfg.per_class(split), cfg.sample_steps, seed, &cfg.schedule)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub spec: GeneratorSpec,
    pub model: ScoreBackbone,
}

pub fn build_generators(cfg: &WorldConfig, mixture: &GaussianMixture) -> Result<Vec<Generator>> {
    cfg.generators
        .par_iter()
        .map(|spec| {
            Ok(Generator {
                spec: spec.clone(),
                model: make_generator(spec, mixture, &cfg.schedule)?,
            })
        })
        .collect()
}

/// The three splits of one generator's real-vs-fake task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorData {
    pub generator: String,
    pub train: LabeledDataset,
    pub val: LabeledDataset,
    pub test: LabeledDataset,
}

impl GeneratorData {
    pub fn split(&self, split: Split) -> &LabeledDataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn fakes(&self, split: Split) -> Vec<DataPoint> {
        let d = self.split(split);
        d.samples
            .iter()
            .zip(&d.labels)
            .filter(|(_, l)| **l == crate::detectors::Label::Fake)
            .map(|(x, _)| x.clone())
            .collect()
    }

    pub fn reals(&self, split: Split) -> Vec<DataPoint> {
        let d = self.split(split);
        d.samples
            .iter()
            .zip(&d.labels)
            .filter(|(_, l)| **l == crate::detectors::Label::Real)
            .map(|(x, _)| x.clone())
            .collect()
    }
}

/// Real splits are shared across generators; fakes are per generator.
pub fn build_datasets(cfg: &WorldConfig, mixture: &GaussianMixture, generators: &[Generator]) -> Result<Vec<GeneratorData>> {
    let reals: Vec<Vec<DataPoint>> = SPLITS.iter().map(|s| real_split(cfg, mixture, *s)).collect();
    generators
        .iter()
        .map(|g| {
            let mut sets = Vec::with_capacity(3);
            for (split, real) in SPLITS.iter().zip(&reals) {
                sets.push(LabeledDataset::from_classes(real.clone(), fake_split(cfg, g, *split)?)?);
            }
            let test = sets.pop().unwrap();
            let val = sets.pop().unwrap();
            let train = sets.pop().unwrap();
            Ok(GeneratorData {
                generator: g.spec.id.clone(),
                train,
                val,
                test,
            })
        })
        .collect()
}

pub fn build_autoencoder(cfg: &WorldConfig, real_train: &[DataPoint]) -> Result<AutoEncoder> {
    let ae = AutoEncoder::new(cfg.dim, cfg.ae.hidden, cfg.latent_dim(), &mut stream(cfg.seed, 0xAE0))?;
    let data: Vec<Vec<f64>> = real_train.iter().map(|x| x.to_vec()).collect();
    let train = AeTrainConfig {
        seed: mix(cfg.seed, 0xAE1),
        ..cfg.ae.train
    };
    Ok(train_autoencoder(ae, &data, &train)?.0)
}

/// Untrained extractor of `kind` bound to `generator`.
pub fn build_extractor(
    cfg: &WorldConfig,
    kind: DetectorKind,
    generator: &Generator,
    data: &GeneratorData,
    ae: &AutoEncoder,
) -> Result<FeatureExtractor> {
    let backbone = match kind {
        DetectorKind::Dire => Backbone::Dire {
            model: generator.model.clone(),
        },
        DetectorKind::Lare2 => {
            let train = DenoiserTrainConfig {
                seed: mix(cfg.latent.train.seed ^ cfg.seed, label_salt(&generator.spec.id)),
                ..cfg.latent.train
            };
            let latent = train_latent_denoiser(ae, &data.fakes(Split::Train), cfg.latent.hidden, &train, &cfg.schedule)?;
            Backbone::Lare2 { ae: ae.clone(), latent }
        }
        DetectorKind::Aeroblade => Backbone::Aeroblade { ae: ae.clone() },
    };
    let features = FeatureConfig {
        lare_seed: mix(cfg.features.lare_seed ^ cfg.seed, label_salt(&generator.spec.id)),
        ..cfg.features
    };
    FeatureExtractor::new(generator.spec.id.clone(), features, cfg.schedule, backbone)
}

pub fn train_world_detector(
    cfg: &WorldConfig,
    kind: DetectorKind,
    generator: &Generator,
    data: &GeneratorData,
    ae: &AutoEncoder,
) -> Result<(Detector, TrainReport)> {
    let ext = build_extractor(cfg, kind, generator, data, ae)?;
    let train_cfg = DetectorTrainConfig {
        classifier: ClassifierTrainConfig {
            seed: mix(cfg.classifier.seed ^ cfg.seed, label_salt(&generator.spec.id) ^ kind as u64),
            ..cfg.classifier
        },
    };
    train_detector(ext, &data.train, &data.val, &train_cfg)
}

/// Everything a full experiment needs, built in memory.
#[derive(Debug, Clone)]
pub struct World {
    pub config: WorldConfig,
    pub mixture: GaussianMixture,
    pub generators: Vec<Generator>,
    pub data: Vec<GeneratorData>,
    pub ae: AutoEncoder,
    /// Indexed by `detector_index`.
    pub detectors: Vec<Detector>,
    pub reports: Vec<TrainReport>,
}

impl World {
    pub fn build(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let mixture = config.mixture();
        let generators = build_generators(&config, &mixture)?;
        let data = build_datasets(&config, &mixture, &generators)?;
        let ae = build_autoencoder(&config, &data[0].reals(Split::Train))?;
        let jobs: Vec<(DetectorKind, usize)> = DetectorKind::ALL
            .iter()
            .flat_map(|k| (0..generators.len()).map(move |g| (*k, g)))
            .collect();
        let trained: Vec<(Detector, TrainReport)> = jobs
            .par_iter()
            .map(|(k, g)| train_world_detector(&config, *k, &generators[*g], &data[*g], &ae))
            .collect::<Result<_>>()?;
        let (detectors, reports) = trained.into_iter().unzip();
        Ok(Self {
            config,
            mixture,
            generators,
            data,
            ae,
            detectors,
            reports,
        })
    }

    pub fn generator_index(&self, id: &str) -> Result<usize> {
        self.generators
            .iter()
            .position(|g| g.spec.id == id)
            .ok_or_else(|| Error::config(format!("unknown generator '{id}'")))
    }

    /// Detectors are ordered kind-major, then by generator.
    pub fn detector_index(&self, kind: DetectorKind, generator: usize) -> usize {
        let k = DetectorKind::ALL.iter().position(|x| *x == kind).unwrap();
        k * self.generators.len() + generator
    }

    pub fn detector(&self, kind: DetectorKind, generator: usize) -> &Detector {
        &self.detectors[self.detector_index(kind, generator)]
    }
}
