//! Diagnostics: relative feature perturbation ρ, transfer matrices and the
//! collapse probe.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{adversarial_set, attack_dataset, random_dataset, AdversarialExample, AttackConfig};
use crate::detectors::{Detector, DetectorKind, LabeledDataset, Label};
use crate::error::{Error, Result};
use crate::nn::norm2;
use crate::rng::{stream, uniform_vec};
use crate::sde::DataPoint;

/// `‖φ(x_adv) − φ(x)‖₂ / ‖φ(x)‖₂` on the data-aligned feature. `None` when
/// `φ(x)` is exactly zero.
pub fn rho(det: &Detector, x: &DataPoint, x_adv: &DataPoint) -> Result<Option<f64>> {
    Error::check_dim(x.dim(), x_adv.dim())?;
    let a = det.extractor.aligned_feature(x)?;
    let denom = norm2(&a);
    if denom == 0.0 {
        return Ok(None);
    }
    let b = det.extractor.aligned_feature(x_adv)?;
    let diff: Vec<f64> = a.iter().zip(&b).map(|(a, b)| b - a).collect();
    Ok(Some(norm2(&diff) / denom))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RhoRegime {
    IidAttack,
    OodTransfer,
    RandomNoise,
}

impl RhoRegime {
    pub const ALL: [RhoRegime; 3] = [RhoRegime::IidAttack, RhoRegime::OodTransfer, RhoRegime::RandomNoise];

    pub fn name(self) -> &'static str {
        match self {
            RhoRegime::IidAttack => "iid-attack",
            RhoRegime::OodTransfer => "ood-transfer",
            RhoRegime::RandomNoise => "random-noise",
        }
    }
}

impl fmt::Display for RhoRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RhoRecord {
    pub id: u64,
    pub label: Label,
    /// `None` for an undefined ratio.
    pub rho: Option<f64>,
}

/// Aggregates over defined records; means are NaN when nothing is defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoStats {
    pub regime: RhoRegime,
    pub records: Vec<RhoRecord>,
    pub mean: f64,
    pub mean_real: f64,
    pub mean_fake: f64,
    pub undefined: usize,
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

impl RhoStats {
    pub fn from_records(regime: RhoRegime, mut records: Vec<RhoRecord>) -> Self {
        records.sort_by_key(|r| r.id);
        let defined = |want: Option<Label>| {
            records
                .iter()
                .filter(move |r| want.is_none_or(|l| r.label == l))
                .filter_map(|r| r.rho)
        };
        Self {
            regime,
            mean: mean_of(defined(None)),
            mean_real: mean_of(defined(Some(Label::Real))),
            mean_fake: mean_of(defined(Some(Label::Fake))),
            undefined: records.iter().filter(|r| r.rho.is_none()).count(),
            records,
        }
    }
}

/// ρ of every example against its clean input.
pub fn rho_stats(det: &Detector, regime: RhoRegime, examples: &[AdversarialExample]) -> Result<RhoStats> {
    let records = examples
        .par_iter()
        .map(|e| {
            Ok(RhoRecord {
                id: e.id,
                label: e.label,
                rho: rho(det, &e.x_orig, &e.x_adv)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RhoStats::from_records(regime, records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoHierarchy {
    pub iid: RhoStats,
    pub ood: RhoStats,
    pub random: RhoStats,
}

impl RhoHierarchy {
    /// `μ_IID ≥ μ_OOD ≥ μ_random`.
    pub fn ordered(&self) -> bool {
        self.iid.mean >= self.ood.mean && self.ood.mean >= self.random.mean
    }
}

/// ρ on `det` under its own attack, a transferred attack from `ood`
/// (another generator's detector of the same kind) and random noise, all at
/// `attack.epsilon`.
pub fn rho_hierarchy(det: &Detector, ood: &Detector, data: &LabeledDataset, attack: &AttackConfig) -> Result<RhoHierarchy> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let iid = attack_dataset(det, data, attack)?;
    let transferred = attack_dataset(ood, data, attack)?;
    let noise = random_dataset(det, data, attack.epsilon, attack.seed)?;
    Ok(RhoHierarchy {
        iid: rho_stats(det, RhoRegime::IidAttack, &iid)?,
        ood: rho_stats(det, RhoRegime::OodTransfer, &transferred)?,
        random: rho_stats(det, RhoRegime::RandomNoise, &noise)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferRegime {
    WhiteBox,
    CrossGenerator,
    CrossMethod,
    CrossBoth,
}

impl TransferRegime {
    pub fn between(surrogate: &Detector, target: &Detector) -> Self {
        let same_gen = surrogate.extractor.generator == target.extractor.generator;
        let same_kind = surrogate.kind() == target.kind();
        match (same_gen, same_kind) {
            (true, true) => TransferRegime::WhiteBox,
            (false, true) => TransferRegime::CrossGenerator,
            (true, false) => TransferRegime::CrossMethod,
            (false, false) => TransferRegime::CrossBoth,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TransferRegime::WhiteBox => "white-box",
            TransferRegime::CrossGenerator => "cross-generator",
            TransferRegime::CrossMethod => "cross-method",
            TransferRegime::CrossBoth => "cross-both",
        }
    }
}

impl fmt::Display for TransferRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferCell {
    pub surrogate: String,
    pub target: String,
    pub regime: TransferRegime,
    pub robust_acc: f64,
}

/// Adversarial examples crafted on one surrogate for one generator's test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSet {
    pub surrogate: String,
    pub generator: String,
    pub examples: Vec<AdversarialExample>,
}

/// Attacks every generator's evaluation set once per surrogate.
pub fn craft_transfer_sets(
    surrogates: &[Detector],
    datasets: &[(String, LabeledDataset)],
    attack: &AttackConfig,
) -> Result<Vec<TransferSet>> {
    let mut sets = Vec::with_capacity(surrogates.len() * datasets.len());
    for s in surrogates {
        for (generator, data) in datasets {
            if let Some(d) = data.dim() {
                Error::check_dim(s.extractor.dim(), d)?;
            }
            sets.push(TransferSet {
                surrogate: s.id(),
                generator: generator.clone(),
                examples: attack_dataset(s, data, attack)?,
            });
        }
    }
    Ok(sets)
}

/// Long-format surrogate × target robust accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub cells: Vec<TransferCell>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub surrogate: DetectorKind,
    pub target: DetectorKind,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl TransferMatrix {
    pub fn cell(&self, surrogate: &str, target: &str) -> Option<&TransferCell> {
        self.cells.iter().find(|c| c.surrogate == surrogate && c.target == target)
    }

    /// Mean ± population std of the cells of `regime` per method pair.
    pub fn pair_summaries(&self, regime: TransferRegime) -> Vec<PairSummary> {
        let kind_of = |id: &str| id.split('@').next().and_then(|k| k.parse::<DetectorKind>().ok());
        let mut out = Vec::new();
        for s in DetectorKind::ALL {
            for t in DetectorKind::ALL {
                let vals: Vec<f64> = self
                    .cells
                    .iter()
                    .filter(|c| c.regime == regime && kind_of(&c.surrogate) == Some(s) && kind_of(&c.target) == Some(t))
                    .map(|c| c.robust_acc)
                    .collect();
                if vals.is_empty() {
                    continue;
                }
                let mean = mean_of(vals.iter().copied());
                let var = mean_of(vals.iter().map(|v| (v - mean).powi(2)));
                out.push(PairSummary {
                    surrogate: s,
                    target: t,
                    mean,
                    std: var.sqrt(),
                    n: vals.len(),
                });
            }
        }
        out
    }
}

/// Evaluates every target on the sets crafted for its own generator.
pub fn evaluate_transfer(sets: &[TransferSet], surrogates: &[Detector], targets: &[Detector]) -> Result<TransferMatrix> {
    let mut cells = Vec::with_capacity(surrogates.len() * targets.len());
    for s in surrogates {
        let sid = s.id();
        for t in targets {
            let set = sets
                .iter()
                .find(|x| x.surrogate == sid && x.generator == t.extractor.generator)
                .ok_or_else(|| Error::config(format!("no adversarial set from {sid} on generator {}", t.extractor.generator)))?;
            cells.push(TransferCell {
                surrogate: sid.clone(),
                target: t.id(),
                regime: TransferRegime::between(s, t),
                robust_acc: t.evaluate(&adversarial_set(&set.examples)?)?.accuracy,
            });
        }
    }
    Ok(TransferMatrix { cells })
}

/// Crafts once per (surrogate, generator) and evaluates all targets.
/// `datasets` holds each generator's evaluation set keyed by generator id.
pub fn transfer_eval(
    surrogates: &[Detector],
    targets: &[Detector],
    datasets: &[(String, LabeledDataset)],
    attack: &AttackConfig,
) -> Result<TransferMatrix> {
    for t in targets {
        for s in surrogates {
            Error::check_dim(s.extractor.dim(), t.extractor.dim())?;
        }
    }
    let sets = craft_transfer_sets(surrogates, datasets, attack)?;
    evaluate_transfer(&sets, surrogates, targets)
}

/// Fraction of `n` uniform-noise inputs the detector labels Real.
pub fn collapse_probe(det: &Detector, n: usize, seed: u64) -> Result<f64> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let d = det.extractor.dim();
    let real = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let x = DataPoint::new(uniform_vec(&mut stream(seed, i), d, 0.0, 1.0))?;
            Ok(det.predict(&x)?.label == Label::Real)
        })
        .collect::<Result<Vec<bool>>>()?;
    Ok(real.iter().filter(|r| **r).count() as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::AutoEncoder;
    use crate::detectors::{train_detector, Backbone, DetectorTrainConfig, FeatureConfig, FeatureExtractor, Head, Threshold};
    use crate::score::{AnalyticScore, GaussianMixture, ScoreBackbone};
    use crate::sde::{to_data, DiffusionSchedule};

    fn data(d: usize, n: u64) -> (GaussianMixture, LabeledDataset) {
        let real = GaussianMixture::random(d, 2, 0.5, 0.01, &mut stream(4, 0));
        let fake = real.perturbed(0.25, 1.0).unwrap();
        let draw = |m: &GaussianMixture, s| (0..n).map(|i| DataPoint::clamped(to_data(&m.sample(&mut stream(s, i))))).collect();
        let set = LabeledDataset::from_classes(draw(&real, 20), draw(&fake, 21)).unwrap();
        (fake, set)
    }

    fn dire(fake: &GaussianMixture, gen: &str, train: &LabeledDataset) -> Detector {
        let ext = FeatureExtractor::new(
            gen,
            FeatureConfig {
                steps: 4,
                ..Default::default()
            },
            DiffusionSchedule::default(),
            Backbone::Dire {
                model: ScoreBackbone::Analytic(AnalyticScore::new(fake.clone())),
            },
        )
        .unwrap();
        train_detector(ext, train, train, &DetectorTrainConfig::default()).unwrap().0
    }

    fn threshold_detector(d: usize, gen: &str, t: Threshold) -> Detector {
        let ae = AutoEncoder::new(d, 8, 2, &mut stream(0, 5)).unwrap();
        let ext = FeatureExtractor::new(gen, FeatureConfig::default(), DiffusionSchedule::default(), Backbone::Aeroblade { ae }).unwrap();
        Detector::new(ext, Head::Threshold(t)).unwrap()
    }

    #[test]
    fn rho_is_zero_on_identical_inputs_and_undefined_on_zero_features() {
        let (fake, train) = data(6, 12);
        let det = dire(&fake, "g", &train);
        for x in &train.samples {
            assert_eq!(rho(&det, x, x).unwrap(), Some(0.0));
        }
        let ident = FeatureExtractor::new(
            "g",
            FeatureConfig::default(),
            DiffusionSchedule::default(),
            Backbone::Aeroblade {
                ae: AutoEncoder::identity(6),
            },
        )
        .unwrap();
        let t = threshold_detector(6, "g", Threshold { tau: 0.1, fake_above: true, spread: 1.0 });
        let det = Detector::new(ident, t.head).unwrap();
        let x = DataPoint::new(vec![0.5; 6]).unwrap();
        assert_eq!(rho(&det, &x, &x).unwrap(), None);
    }

    #[test]
    fn stats_skip_undefined_and_ignore_order() {
        let recs = vec![
            RhoRecord { id: 2, label: Label::Fake, rho: Some(0.4) },
            RhoRecord { id: 0, label: Label::Real, rho: Some(0.2) },
            RhoRecord { id: 1, label: Label::Real, rho: None },
        ];
        let a = RhoStats::from_records(RhoRegime::IidAttack, recs.clone());
        let mut rev = recs;
        rev.reverse();
        let b = RhoStats::from_records(RhoRegime::IidAttack, rev);
        assert_eq!(a, b);
        assert!((a.mean - 0.3).abs() < 1e-15);
        assert_eq!(a.mean_real, 0.2);
        assert_eq!(a.mean_fake, 0.4);
        assert_eq!(a.undefined, 1);
        let single = RhoStats::from_records(RhoRegime::RandomNoise, vec![RhoRecord { id: 0, label: Label::Fake, rho: Some(0.7) }]);
        assert_eq!(single.mean, 0.7);
        assert!(single.mean_real.is_nan());
    }

    #[test]
    fn zero_budget_hierarchy_is_all_zero() {
        let (fake, train) = data(6, 8);
        let det = dire(&fake, "a", &train);
        let other = dire(&fake.perturbed(0.1, 1.0).unwrap(), "b", &train);
        let attack = AttackConfig {
            epsilon: 0.0,
            steps: 2,
            ..AttackConfig::default()
        };
        let h = rho_hierarchy(&det, &other, &train, &attack).unwrap();
        for s in [&h.iid, &h.ood, &h.random] {
            assert_eq!(s.mean, 0.0);
        }
        assert!(h.ordered());
    }

    #[test]
    fn constant_classifiers_collapse_to_a_pole() {
        let always_real = threshold_detector(5, "g", Threshold { tau: 1e9, fake_above: true, spread: 1.0 });
        let always_fake = threshold_detector(5, "g", Threshold { tau: -1e9, fake_above: true, spread: 1.0 });
        assert_eq!(collapse_probe(&always_real, 50, 1).unwrap(), 1.0);
        assert_eq!(collapse_probe(&always_fake, 50, 1).unwrap(), 0.0);
        let (_, train) = data(5, 10);
        assert_eq!(always_real.evaluate(&train).unwrap().accuracy, 0.5);
        assert!(collapse_probe(&always_real, 0, 1).is_err());
    }

    #[test]
    fn transfer_matrix_regimes_and_degenerate_cells() {
        let (fake, train) = data(6, 8);
        let fake_b = fake.perturbed(0.1, 1.0).unwrap();
        let a = dire(&fake, "a", &train);
        let b = dire(&fake_b, "b", &train);
        let t = threshold_detector(6, "a", Threshold { tau: 0.05, fake_above: true, spread: 0.1 });
        let dets = vec![a.clone(), b.clone(), t.clone()];
        let sets = vec![("a".to_string(), train.clone()), ("b".to_string(), train.clone())];
        let clean = AttackConfig {
            epsilon: 0.0,
            steps: 1,
            ..AttackConfig::default()
        };
        let m = transfer_eval(&dets, &dets, &sets, &clean).unwrap();
        assert_eq!(m.cells.len(), 9);
        for c in &m.cells {
            let target = dets.iter().find(|d| d.id() == c.target).unwrap();
            assert_eq!(c.robust_acc, target.evaluate(&train).unwrap().accuracy);
        }
        assert_eq!(m.cell(&a.id(), &a.id()).unwrap().regime, TransferRegime::WhiteBox);
        assert_eq!(m.cell(&a.id(), &b.id()).unwrap().regime, TransferRegime::CrossGenerator);
        assert_eq!(m.cell(&a.id(), &t.id()).unwrap().regime, TransferRegime::CrossMethod);
        assert_eq!(m.cell(&b.id(), &t.id()).unwrap().regime, TransferRegime::CrossBoth);
        let both = m.pair_summaries(TransferRegime::CrossBoth);
        assert_eq!(both.len(), 2);
        assert!(both.iter().all(|p| p.n == 1 && p.std == 0.0));
    }

    #[test]
    fn white_box_cell_matches_direct_attack() {
        let (fake, train) = data(6, 6);
        let det = dire(&fake, "a", &train);
        let attack = AttackConfig {
            steps: 5,
            ..AttackConfig::default()
        };
        let m = transfer_eval(std::slice::from_ref(&det), std::slice::from_ref(&det), &[("a".into(), train.clone())], &attack).unwrap();
        let direct = crate::attacks::robust_accuracy(&det, &attack_dataset(&det, &train, &attack).unwrap()).unwrap();
        assert_eq!(m.cells[0].robust_acc, direct);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let (fake, train) = data(6, 4);
        let det = dire(&fake, "a", &train);
        let other = threshold_detector(5, "a", Threshold { tau: 0.0, fake_above: true, spread: 1.0 });
        assert!(matches!(
            transfer_eval(&[det], &[other], &[("a".into(), train)], &AttackConfig::default()),
            Err(Error::Dimension { .. })
        ));
    }
}
