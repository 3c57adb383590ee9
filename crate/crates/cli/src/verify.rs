//! Model-free numerical oracles plus invariant scans over persisted
//! artifacts.

use std::path::{Path, PathBuf};

use reconbench::adjoint::{input_gradient, GradMode, GradRequest};
use reconbench::analysis::TransferSet;
use reconbench::attacks::AdversarialExample;
use reconbench::autoencoder::AutoEncoder;
use reconbench::checkpoint;
use reconbench::detectors::{Backbone, Classifier, Detector, FeatureConfig, FeatureExtractor, Head, Label};
use reconbench::rng::{stream, uniform_vec};
use reconbench::score::{AnalyticScore, GaussianMixture, ScoreBackbone};
use reconbench::sde::{ode_rhs, DataPoint, DiffusionSchedule, TrajectoryState};
use reconbench::world::GeneratorData;
use serde::de::DeserializeOwned;

use crate::error::CliError;
use crate::workspace::{ScoreCheckpoint, Stamped};

pub struct Check {
    pub module: &'static str,
    pub name: String,
    pub outcome: Result<String, String>,
}

impl Check {
    fn new(module: &'static str, name: impl Into<String>, outcome: Result<String, String>) -> Self {
        Self {
            module,
            name: name.into(),
            outcome,
        }
    }

    pub fn passed(&self) -> bool {
        self.outcome.is_ok()
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

fn probe_detector(seed: u64, dim: usize, steps: usize) -> Result<(Detector, DataPoint), reconbench::Error> {
    let schedule = DiffusionSchedule::default();
    let mut rng = stream(seed, 0);
    let mixture = GaussianMixture::random(dim, 3, 0.5, 0.05, &mut rng);
    let features = FeatureConfig { steps, ..FeatureConfig::default() };
    let backbone = Backbone::Dire {
        model: ScoreBackbone::Analytic(AnalyticScore::new(mixture)),
    };
    let ext = FeatureExtractor::new("probe", features, schedule, backbone)?;
    let inputs = (0..8u64)
        .map(|i| ext.head_input(&DataPoint::new(uniform_vec(&mut stream(seed, 100 + i), dim, 0.1, 0.9))?))
        .collect::<Result<Vec<_>, _>>()?;
    let head = Head::Classifier(Classifier::init(&inputs, 8, seed)?);
    let x = DataPoint::new(uniform_vec(&mut rng, dim, 0.2, 0.8))?;
    Ok((Detector::new(ext, head)?, x))
}

/// Adjoint gradient of a DIRE detector loss against central differences and
/// against the unrolled reference.
fn gradient_oracle() -> Result<String, String> {
    let (mut worst_fd, mut worst_unrolled) = (0.0f64, 0.0f64);
    for seed in 0..3 {
        let (det, x) = probe_detector(seed, 6, 20).map_err(|e| e.to_string())?;
        let y = Label::Fake;
        let (_, adj) = det.objective(&x, y, GradMode::Adjoint).map_err(|e| e.to_string())?;
        let (_, unr) = det.objective(&x, y, GradMode::Unrolled).map_err(|e| e.to_string())?;
        let h = 1e-6;
        let fd = (0..x.dim())
            .map(|i| {
                let at = |d: f64| {
                    let mut v = x.to_vec();
                    v[i] += d;
                    det.loss(&DataPoint::new(v)?, y)
                };
                Ok((at(h)? - at(-h)?) / (2.0 * h))
            })
            .collect::<Result<Vec<f64>, reconbench::Error>>()
            .map_err(|e| e.to_string())?;
        worst_fd = worst_fd.max(rel_err(&adj, &fd));
        worst_unrolled = worst_unrolled.max(rel_err(&adj, &unr));
    }
    let detail = format!("rel err vs FD {worst_fd:.2e}, vs unrolled {worst_unrolled:.2e}");
    if worst_fd < 1e-3 && worst_unrolled < 1e-5 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn memory_oracle() -> Result<String, String> {
    let schedule = DiffusionSchedule::default();
    let model = AnalyticScore::new(GaussianMixture::random(4, 2, 0.4, 0.05, &mut stream(3, 0)));
    let x = DataPoint::new(vec![0.3, 0.6, 0.5, 0.4]).map_err(|e| e.to_string())?;
    let tail = |x: &[f64], rec: &[f64]| -> reconbench::Result<(f64, Vec<f64>, Vec<f64>)> {
        let r: Vec<f64> = x.iter().zip(rec).map(|(a, b)| a - b).collect();
        let g: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        Ok((r.iter().map(|v| v * v).sum(), g.clone(), g.iter().map(|v| -v).collect()))
    };
    let peaks = [10, 40, 160]
        .iter()
        .map(|&steps| {
            let req = GradRequest { x: &x, tail: &tail, steps, mode: GradMode::Adjoint };
            Ok(input_gradient(&req, &model, &schedule)?.telemetry.peak_states)
        })
        .collect::<reconbench::Result<Vec<usize>>>()
        .map_err(|e| e.to_string())?;
    let detail = format!("peak states {peaks:?} for N = 10, 40, 160");
    if peaks.iter().all(|p| *p == peaks[0]) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn score_oracle() -> Result<String, String> {
    let schedule = DiffusionSchedule::default();
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let mut rng = stream(seed, 7);
        let m = GaussianMixture::random(5, 3, 0.6, 0.05, &mut rng);
        let x = uniform_vec(&mut rng, 5, -1.0, 1.0);
        let t = 0.05 + 0.2 * seed as f64;
        let score = m.score(&x, t, &schedule).map_err(|e| e.to_string())?;
        let h = 1e-5;
        let fd = (0..5)
            .map(|i| {
                let at = |d: f64| {
                    let mut v = x.clone();
                    v[i] += d;
                    m.noised_log_density(&v, t, &schedule)
                };
                Ok((at(h)? - at(-h)?) / (2.0 * h))
            })
            .collect::<reconbench::Result<Vec<f64>>>()
            .map_err(|e| e.to_string())?;
        worst = worst.max(rel_err(&score, &fd));
    }
    let detail = format!("rel err {worst:.2e}");
    if worst < 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn stationarity_oracle() -> Result<String, String> {
    let schedule = DiffusionSchedule::default();
    let model = AnalyticScore::new(GaussianMixture::standard(4));
    let mut worst = 0.0f64;
    for (i, t) in [0.01, 0.3, 0.7, 1.0].iter().enumerate() {
        let x = uniform_vec(&mut stream(11, i as u64), 4, -2.0, 2.0);
        let v = ode_rhs(&TrajectoryState { x, t: *t }, &model, &schedule).map_err(|e| e.to_string())?;
        worst = worst.max(v.iter().map(|a| a * a).sum::<f64>().sqrt());
    }
    let detail = format!("max ‖velocity‖ {worst:.1e}");
    if worst < 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn model_free_checks() -> Vec<Check> {
    vec![
        Check::new("adjoint-grad", "DIRE loss gradient matches finite differences and unrolled", gradient_oracle()),
        Check::new("adjoint-grad", "adjoint memory is constant in N", memory_oracle()),
        Check::new("score-models", "mixture score matches differentiated log-density", score_oracle()),
        Check::new("sde-core", "standard Gaussian is stationary under the flow", stationarity_oracle()),
    ]
}

fn json_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect()
        })
        .unwrap_or_default();
    files.sort();
    files
}

struct Scanner<'a> {
    root: &'a Path,
    checks: Vec<Check>,
    stamps: Vec<(String, String)>,
}

impl Scanner<'_> {
    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(self.root).unwrap_or(p).display().to_string()
    }

    /// Loads one artifact and runs `inspect` on it.
    fn scan<T: DeserializeOwned>(&mut self, module: &'static str, path: &Path, kind: &str, inspect: impl Fn(&T) -> Result<String, String>) {
        let rel = self.rel(path);
        let outcome = match checkpoint::load::<Stamped<T>>(path, kind) {
            Ok(s) => {
                self.stamps.push((rel.clone(), s.world.clone()));
                inspect(&s.value)
            }
            Err(e) => Err(e.to_string()),
        };
        self.checks.push(Check::new(module, rel, outcome));
    }
}

fn check_examples(examples: &[AdversarialExample]) -> Result<String, String> {
    for e in examples {
        e.check().map_err(|e| e.to_string())?;
    }
    Ok(format!("{} examples within budget and range", examples.len()))
}

/// Invariant scans over whatever the workspace contains.
pub fn artifact_checks(root: &Path) -> Vec<Check> {
    let mut s = Scanner {
        root,
        checks: Vec::new(),
        stamps: Vec::new(),
    };
    let score = root.join("checkpoints/score.json");
    if score.exists() {
        s.scan::<ScoreCheckpoint>("score-models", &score, "score", |c| Ok(format!("{} generators", c.generators.len())));
    }
    for p in json_files(&root.join("data")) {
        s.scan::<GeneratorData>("detectors", &p, "dataset", |d| {
            for (name, split) in [("train", &d.train), ("val", &d.val), ("test", &d.test)] {
                if !split.is_balanced() {
                    let (r, f) = split.counts();
                    return Err(format!("{name} split has {r} real and {f} fake samples"));
                }
            }
            Ok("splits balanced".into())
        });
    }
    let ae = root.join("checkpoints/autoencoder.json");
    if ae.exists() {
        s.scan::<AutoEncoder>("autoencoder", &ae, "autoencoder", |a| {
            if a.is_finite() {
                Ok("finite weights".into())
            } else {
                Err("non-finite weights".into())
            }
        });
    }
    for (dir, module) in [("checkpoints/detectors", "detectors"), ("checkpoints/hardened", "defenses")] {
        for p in json_files(&root.join(dir)) {
            s.scan::<Detector>(module, &p, "detector", |d| Ok(d.id()));
        }
    }
    for p in json_files(&root.join("results/adversarial")) {
        s.scan::<Vec<AdversarialExample>>("attacks", &p, "adversarial", |v| check_examples(v));
    }
    for p in json_files(&root.join("results/transfer")) {
        s.scan::<TransferSet>("analysis", &p, "transfer-set", |t| check_examples(&t.examples));
    }
    if let Some((first_path, first)) = s.stamps.first().cloned() {
        let stale: Vec<&str> = s.stamps.iter().filter(|(_, w)| *w != first).map(|(p, _)| p.as_str()).collect();
        let outcome = if stale.is_empty() {
            Ok(format!("{} artifacts share one world", s.stamps.len()))
        } else {
            Err(format!("built from a different world than {first_path}: {}", stale.join(", ")))
        };
        s.checks.push(Check::new("harness-cli", "artifacts are mutually consistent", outcome));
    }
    s.checks
}

/// Runs every check, prints one line each and fails if any check failed.
pub fn run(root: &Path) -> Result<Vec<Check>, CliError> {
    let mut checks = model_free_checks();
    if root.exists() {
        checks.extend(artifact_checks(root));
    }
    for c in &checks {
        match &c.outcome {
            Ok(d) => println!("PASS [{}] {}: {d}", c.module, c.name),
            Err(e) => println!("FAIL [{}] {}: {e}", c.module, c.name),
        }
    }
    let failed: Vec<&Check> = checks.iter().filter(|c| !c.passed()).collect();
    if let Some(first) = failed.first() {
        return Err(CliError::Verify(format!(
            "{} of {} checks failed; first: [{}] {}",
            failed.len(),
            checks.len(),
            first.module,
            first.name
        )));
    }
    println!("all {} checks passed", checks.len());
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_free_oracles_pass() {
        for c in model_free_checks() {
            assert!(c.passed(), "{}: {:?}", c.name, c.outcome);
        }
    }

    #[test]
    fn corrupt_checkpoint_names_its_module() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("checkpoints")).unwrap();
        std::fs::write(dir.path().join("checkpoints/autoencoder.json"), "{\"format\":").unwrap();
        let checks = artifact_checks(dir.path());
        assert_eq!(checks.len(), 1);
        assert_eq!(checks[0].module, "autoencoder");
        assert!(!checks[0].passed());
    }
}
