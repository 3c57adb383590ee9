//! End-to-end acceptance run. Builds one workspace with the CLI, then checks
//! every criterion in order and prints one PASS/FAIL line each. Runs
//! sequentially so the wall-clock limits measure a single pipeline.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use reconbench::adjoint::{input_gradient, GradMode, GradRequest};
use reconbench::attacks::{attack_dataset, random_dataset, robust_accuracy, AdversarialExample, AttackConfig, AttackVariant, MAX_EPSILON};
use reconbench::analysis::rho;
use reconbench::checkpoint;
use reconbench::detectors::{Backbone, Classifier, Detector, FeatureConfig, FeatureExtractor, Head, Label};
use reconbench::rng::{stream, uniform_vec};
use reconbench::score::{AnalyticScore, GaussianMixture, ScoreBackbone};
use reconbench::sde::{ode_rhs, DataPoint, DiffusionSchedule, TrajectoryState};
use reconbench::world::GeneratorData;
use reconbench_cli::workspace::Stamped;
use serde::Deserialize;

const CONFIG: &str = r#"{
  "seed": 0,
  "world": {"sample_steps": 20, "features": {"steps": 20}},
  "attack": {"per_class": 250},
  "transfer": {"per_class": 20},
  "purify": {"per_class": 25},
  "advtrain": {"train_per_class": 100, "val_per_class": 25, "test_per_class": 25, "grid": {"outer": {"epochs": 20}}},
  "rho": {"per_class": 25},
  "collapse": {"n": 500}
}"#;

const STAGES: [&str; 10] = [
    "train-score",
    "gen-data",
    "train-ae",
    "train-detector",
    "attack",
    "transfer",
    "purify",
    "advtrain",
    "analyze-rho",
    "collapse",
];

struct Outcome {
    id: u32,
    title: &'static str,
    result: Result<String, String>,
}

fn check(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

fn random_mixture(seed: u64, dim: usize) -> GaussianMixture {
    let mut rng = stream(seed, 0xACC);
    let k = 1 + (seed as usize % 4);
    let spread = 0.3 + 0.1 * (seed % 4) as f64;
    let var = [0.01, 0.03, 0.08][seed as usize % 3];
    GaussianMixture::random(dim, k, spread, var, &mut rng)
}

fn dire_probe(seed: u64, dim: usize) -> (Detector, DataPoint) {
    let schedule = DiffusionSchedule::default();
    let backbone = Backbone::Dire {
        model: ScoreBackbone::Analytic(AnalyticScore::new(random_mixture(seed, dim))),
    };
    let features = FeatureConfig { steps: 20, ..FeatureConfig::default() };
    let ext = FeatureExtractor::new("probe", features, schedule, backbone).unwrap();
    let inputs: Vec<Vec<f64>> = (0..16u64)
        .map(|i| ext.head_input(&DataPoint::new(uniform_vec(&mut stream(seed, 50 + i), dim, 0.05, 0.95)).unwrap()).unwrap())
        .collect();
    let head = Head::Classifier(Classifier::init(&inputs, 16, seed).unwrap());
    let x = DataPoint::new(uniform_vec(&mut stream(seed, 7), dim, 0.15, 0.85)).unwrap();
    (Detector::new(ext, head).unwrap(), x)
}

fn gradient_correctness() -> Result<String, String> {
    let start = Instant::now();
    let (mut worst_fd, mut worst_unrolled) = (0.0f64, 0.0f64);
    for seed in 0..10 {
        let (det, x) = dire_probe(seed, 8);
        let y = if seed % 2 == 0 { Label::Fake } else { Label::Real };
        let (_, adj) = det.objective(&x, y, GradMode::Adjoint).map_err(|e| e.to_string())?;
        let (_, unr) = det.objective(&x, y, GradMode::Unrolled).map_err(|e| e.to_string())?;
        let fd = central_difference(|v| det.loss(&DataPoint::new(v.to_vec()).unwrap(), y).unwrap(), &x, 1e-6);
        worst_fd = worst_fd.max(rel_err(&adj, &fd));
        worst_unrolled = worst_unrolled.max(rel_err(&adj, &unr));
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst_fd < 1e-3 && worst_unrolled < 1e-5 && secs < 60.0,
        format!("10 probes, worst rel err vs FD {worst_fd:.2e} (< 1e-3), vs unrolled {worst_unrolled:.2e} (< 1e-5), {secs:.1}s (< 60s)"),
    )
}

fn constant_memory() -> Result<String, String> {
    let schedule = DiffusionSchedule::default();
    let model = AnalyticScore::new(random_mixture(3, 6));
    let x = DataPoint::new(uniform_vec(&mut stream(3, 1), 6, 0.2, 0.8)).unwrap();
    let tail = |x: &[f64], rec: &[f64]| -> reconbench::Result<(f64, Vec<f64>, Vec<f64>)> {
        let r: Vec<f64> = x.iter().zip(rec).map(|(a, b)| a - b).collect();
        let g: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        Ok((r.iter().map(|v| v * v).sum(), g.clone(), g.iter().map(|v| -v).collect()))
    };
    let mut adjoint = Vec::new();
    let mut unrolled = Vec::new();
    for steps in [10, 40, 160] {
        for (mode, out) in [(GradMode::Adjoint, &mut adjoint), (GradMode::Unrolled, &mut unrolled)] {
            let req = GradRequest { x: &x, tail: &tail, steps, mode };
            out.push(input_gradient(&req, &model, &schedule).map_err(|e| e.to_string())?.telemetry.peak_states);
        }
    }
    check(
        adjoint.iter().all(|p| *p == adjoint[0]),
        format!("adjoint peak states {adjoint:?} for N = 10, 40, 160 (unrolled {unrolled:?})"),
    )
}

fn exact_score() -> Result<String, String> {
    let schedule = DiffusionSchedule::default();
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let m = random_mixture(seed, 5);
        let x = uniform_vec(&mut stream(seed, 9), 5, -1.2, 1.2);
        let t = 0.02 + 0.09 * seed as f64;
        let score = m.score(&x, t, &schedule).map_err(|e| e.to_string())?;
        let fd = central_difference(|v| m.noised_log_density(v, t, &schedule).unwrap(), &x, 1e-5);
        worst = worst.max(rel_err(&score, &fd));
    }
    let model = AnalyticScore::new(GaussianMixture::standard(6));
    let mut velocity = 0.0f64;
    for (i, t) in [0.001, 0.1, 0.5, 0.9, 1.0].iter().enumerate() {
        let x = uniform_vec(&mut stream(21, i as u64), 6, -3.0, 3.0);
        let v = ode_rhs(&TrajectoryState { x, t: *t }, &model, &schedule).map_err(|e| e.to_string())?;
        velocity = velocity.max(v.iter().map(|a| a * a).sum::<f64>().sqrt());
    }
    check(
        worst < 1e-6 && velocity < 1e-12,
        format!("score rel err {worst:.2e} (< 1e-6), stationary velocity {velocity:.1e} (< 1e-12)"),
    )
}

struct Pipeline {
    root: PathBuf,
    times: BTreeMap<&'static str, Duration>,
    failure: Option<String>,
}

impl Pipeline {
    fn run(root: &Path) -> Self {
        let config = root.join("acceptance.json");
        std::fs::write(&config, CONFIG).unwrap();
        let ws = root.join("ws");
        let mut times = BTreeMap::new();
        let mut failure = None;
        for stage in STAGES {
            let start = Instant::now();
            let out = Command::new(env!("CARGO_BIN_EXE_reconbench"))
                .args([stage, "--out", ws.to_str().unwrap(), "--config", config.to_str().unwrap()])
                .output()
                .expect("binary runs");
            times.insert(stage, start.elapsed());
            std::fs::write(root.join(format!("{stage}.log")), [out.stdout.as_slice(), out.stderr.as_slice()].concat()).unwrap();
            println!("  stage {stage:15} {:6.1}s", start.elapsed().as_secs_f64());
            if !out.status.success() {
                failure = Some(format!("{stage} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr).trim()));
                break;
            }
        }
        Self { root: ws, times, failure }
    }

    fn ready(&self) -> Result<(), String> {
        match &self.failure {
            Some(f) => Err(format!("pipeline failed: {f}")),
            None => Ok(()),
        }
    }

    fn seconds(&self, stages: &[&str]) -> f64 {
        stages.iter().filter_map(|s| self.times.get(s)).map(Duration::as_secs_f64).sum()
    }

    fn csv<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<Vec<T>, String> {
        let path = self.root.join(format!("results/{name}.csv"));
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_path(&path)
            .map_err(|e| format!("{}: {e}", path.display()))?;
        reader.deserialize().collect::<Result<Vec<T>, _>>().map_err(|e| e.to_string())
    }

    fn detector(&self, id: &str) -> Result<Detector, String> {
        let s: Stamped<Detector> = checkpoint::load(&self.root.join(format!("checkpoints/detectors/{id}.json")), "detector").map_err(|e| e.to_string())?;
        Ok(s.value)
    }

    fn data(&self, generator: &str) -> Result<GeneratorData, String> {
        let s: Stamped<GeneratorData> = checkpoint::load(&self.root.join(format!("data/{generator}.json")), "dataset").map_err(|e| e.to_string())?;
        Ok(s.value)
    }
}

fn kind_of(id: &str) -> &str {
    id.split('@').next().unwrap_or(id)
}

fn generator_of(id: &str) -> &str {
    id.split('@').nth(1).unwrap_or("")
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

#[derive(Deserialize)]
struct DetectorRow {
    detector: String,
    test_accuracy: f64,
}

fn benign_detection(p: &Pipeline) -> Result<String, String> {
    p.ready()?;
    let rows: Vec<DetectorRow> = p.csv("detectors")?;
    let mut parts = Vec::new();
    let mut ok = true;
    for kind in ["dire", "lare2", "aeroblade"] {
        let accs: Vec<f64> = rows.iter().filter(|r| kind_of(&r.detector) == kind).map(|r| r.test_accuracy).collect();
        let m = mean(accs.iter().copied());
        let min = accs.iter().copied().fold(f64::INFINITY, f64::min);
        ok &= m >= 0.85;
        parts.push(format!("{kind} mean {m:.3} (min {min:.3})"));
    }
    let secs = p.seconds(&["train-score", "gen-data", "train-ae", "train-detector"]);
    ok &= secs < 180.0;
    check(ok, format!("{}; build {secs:.0}s (< 180s)", parts.join(", ")))
}

#[derive(Deserialize)]
struct AttackSummaryRow {
    detector: String,
    n: usize,
    steps: usize,
    variant: String,
    robust_accuracy: f64,
}

fn white_box_collapse(p: &Pipeline) -> Result<String, String> {
    p.ready()?;
    let rows: Vec<AttackSummaryRow> = p.csv("attack_summary")?;
    let worst = rows.iter().max_by(|a, b| a.robust_accuracy.total_cmp(&b.robust_accuracy)).ok_or("no rows")?;
    let shape_ok = rows.len() == 12 && rows.iter().all(|r| r.n == 500 && r.steps == 100 && r.variant == "apgd");
    let secs = p.seconds(&["attack"]);
    check(
        shape_ok && worst.robust_accuracy <= 0.05 && secs < 180.0,
        format!(
            "{} detectors, 500 samples each, worst robust accuracy {:.3} ({}) (<= 0.05), {secs:.0}s (< 180s)",
            rows.len(),
            worst.robust_accuracy,
            worst.detector
        ),
    )
}

#[derive(Deserialize)]
struct PairRow {
    regime: String,
    surrogate: String,
    target: String,
    mean: f64,
    std: f64,
}

fn transfer_collapse(p: &Pipeline) -> Result<String, String> {
    p.ready()?;
    let rows: Vec<PairRow> = p.csv("transfer_summary")?;
    let cross: Vec<&PairRow> = rows.iter().filter(|r| r.regime == "cross-both").collect();
    let outside: Vec<String> = cross
        .iter()
        .filter(|r| !(0.40..=0.60).contains(&r.mean))
        .map(|r| format!("{}→{} {:.3}±{:.3}", r.surrogate, r.target, r.mean, r.std))
        .collect();
    let all: Vec<String> = cross.iter().map(|r| format!("{}→{} {:.2}", r.surrogate, r.target, r.mean)).collect();
    check(
        cross.len() == 6 && outside.is_empty(),
        format!("{} of {} pairs outside [0.40, 0.60]: {}", outside.len(), cross.len(), if outside.is_empty() { all.join(", ") } else { outside.join(", ") }),
    )
}

fn noise_gap(p: &Pipeline) -> Result<String, String> {
    p.ready()?;
    let rows: Vec<DetectorRow> = p.csv("detectors")?;
    let pgd = AttackConfig {
        variant: AttackVariant::Pgd,
        early_stop: true,
        ..AttackConfig::default()
    };
    let (mut noise_acc, mut pgd_acc) = (Vec::new(), Vec::new());
    for r in &rows {
        let det = p.detector(&r.detector)?;
        let data = p.data(generator_of(&r.detector))?.test.balanced_head(50).map_err(|e| e.to_string())?;
        let adv = attack_dataset(&det, &data, &pgd).map_err(|e| e.to_string())?;
        let noise = random_dataset(&det, &data, MAX_EPSILON, 0).map_err(|e| e.to_string())?;
        pgd_acc.push(robust_accuracy(&det, &adv).map_err(|e| e.to_string())?);
        noise_acc.push(robust_accuracy(&det, &noise).map_err(|e| e.to_string())?);
    }
    let (n, g) = (mean(noise_acc), mean(pgd_acc));
    check(
        n - g >= 0.20,
        format!("ε = {MAX_EPSILON}: noise {n:.3} vs PGD {g:.3}, gap {:.1} pp (>= 20)", 100.0 * (n - g)),
    )
}

#[derive(Deserialize)]
struct RhoSummaryRow {
    detector: String,
    regime: String,
    mean: f64,
    ordered: bool,
}

fn rho_hierarchy(p: &Pipeline) -> Result<String, String> {
    p.ready()?;
    let rows: Vec<RhoSummaryRow> = p.csv("rho_summary")?;
    let mut cells: BTreeMap<&str, (bool, Vec<String>)> = BTreeMap::new();
    for r in &rows {
        let e = cells.entry(r.detector.as_str()).or_insert((r.ordered, Vec::new()));
        e.1.push(format!("{} {:.3}", r.regime, r.mean));
    }
    let ordered = cells.values().filter(|c| c.0).count();
    let unordered: Vec<String> = cells.iter().filter(|c| !c.1 .0).map(|(d, c)| format!("{d} [{}]", c.1.join(", "))).collect();

    // ρ(x, x) on every detector's analysis subset.
    let (mut zero, mut total) = (0usize, 0usize);
    for d in cells.keys() {
        let det = p.detector(d)?;
        let data = p.data(generator_of(d))?.test.balanced_head(25).map_err(|e| e.to_string())?;
        for x in &data.samples {
            total += 1;
            zero += (rho(&det, x, x).map_err(|e| e.to_string())? == Some(0.0)) as usize;
        }
    }
    check(
        cells.len() == 12 && ordered >= 10 && zero == total,
        format!(
            "{ordered}/{} cells ordered (>= 10){}; ρ(x, x) = 0 on {zero}/{total} samples",
            cells.len(),
            if unordered.is_empty() { String::new() } else { format!(", unordered: {}", unordered.join("; ")) }
        ),
    )
}

#[derive(Deserialize)]
struct PurifyRow {
    detector: String,
    input: String,
    ratio: f64,
    accuracy: f64,
    unpurified_accuracy: f64,
}

fn purification_direction(p: &Pipeline) -> Result<String, String> {
    p.ready()?;
    let rows: Vec<PurifyRow> = p.csv("purify")?;
    let benign: Vec<&PurifyRow> = rows.iter().filter(|r| r.input == "benign").collect();
    let not_reduced: Vec<String> = benign
        .iter()
        .filter(|r| r.accuracy >= r.unpurified_accuracy)
        .map(|r| format!("{}@{} {:.2}≥{:.2}", r.detector, r.ratio, r.accuracy, r.unpurified_accuracy))
        .collect();
    let dire_adv: Vec<&PurifyRow> = rows.iter().filter(|r| r.input == "adversarial" && kind_of(&r.detector) == "dire").collect();
    let out_of_band: Vec<String> = dire_adv
        .iter()
        .filter(|r| !(0.40..=0.65).contains(&r.accuracy))
        .map(|r| format!("{}@{} {:.2}", r.detector, r.ratio, r.accuracy))
        .collect();
    let ok = !benign.is_empty() && !dire_adv.is_empty() && not_reduced.is_empty() && out_of_band.is_empty();
    check(
        ok,
        format!(
            "benign reduced in {}/{} cells{}; attacked DIRE in [0.40, 0.65] in {}/{} cells{}",
            benign.len() - not_reduced.len(),
            benign.len(),
            if not_reduced.is_empty() { String::new() } else { format!(" (not: {})", not_reduced.join(", ")) },
            dire_adv.len() - out_of_band.len(),
            dire_adv.len(),
            if out_of_band.is_empty() { String::new() } else { format!(" (outside: {})", out_of_band.join(", ")) }
        ),
    )
}

#[derive(Deserialize)]
struct HardenedRow {
    detector: String,
    robust_accuracy: f64,
}

fn at_divergence(p: &Pipeline) -> Result<String, String> {
    p.ready()?;
    let rows: Vec<HardenedRow> = p.csv("advtrain")?;
    let of = |kind: &str| rows.iter().filter(|r| kind_of(&r.detector) == kind).map(|r| r.robust_accuracy).collect::<Vec<_>>();
    let (lare, dire) = (of("lare2"), of("dire"));
    let (ml, md) = (mean(lare.iter().copied()), mean(dire.iter().copied()));
    check(
        !lare.is_empty() && lare.len() == dire.len() && ml > md,
        format!("hardened robust accuracy: LaRE² {ml:.3} {lare:.2?} vs DIRE {md:.3} {dire:.2?}"),
    )
}

fn invariant_scan(p: &Pipeline) -> Result<String, String> {
    p.ready()?;
    let mut examples = 0usize;
    let mut violations = Vec::new();
    let dir = p.root.join("results/adversarial");
    for entry in std::fs::read_dir(&dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let s: Stamped<Vec<AdversarialExample>> = checkpoint::load(&path, "adversarial").map_err(|e| e.to_string())?;
        for e in &s.value {
            examples += 1;
            let linf = e.x_adv.iter().zip(e.x_orig.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if linf > e.epsilon + 1e-12 || e.x_adv.iter().any(|v| !(0.0..=1.0).contains(v)) {
                violations.push(format!("{} #{}", path.file_name().unwrap().to_string_lossy(), e.id));
            }
        }
    }
    let mut unbalanced = Vec::new();
    let mut splits = 0;
    for entry in std::fs::read_dir(p.root.join("data")).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let s: Stamped<GeneratorData> = checkpoint::load(&path, "dataset").map_err(|e| e.to_string())?;
        for d in [&s.value.train, &s.value.val, &s.value.test] {
            splits += 1;
            let fake = d.labels.iter().filter(|l| **l == Label::Fake).count();
            if 2 * fake != d.len() {
                unbalanced.push(path.display().to_string());
            }
        }
    }
    let verify = Command::new(env!("CARGO_BIN_EXE_reconbench"))
        .args(["verify", "--out", p.root.to_str().unwrap()])
        .output()
        .expect("binary runs");
    check(
        examples > 0 && violations.is_empty() && unbalanced.is_empty() && verify.status.success(),
        format!(
            "{examples} examples, {} violations; {splits} splits, {} unbalanced; verify exit {:?}",
            violations.len(),
            unbalanced.len(),
            verify.status.code()
        ),
    )
}

fn main() {
    // libtest flags such as --nocapture are accepted and ignored; a filter
    // argument that matches nothing here skips the run.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let start = Instant::now();
    let mut outcomes = vec![
        Outcome { id: 1, title: "gradient correctness", result: gradient_correctness() },
        Outcome { id: 2, title: "constant-memory adjoint", result: constant_memory() },
        Outcome { id: 3, title: "exact-score oracles", result: exact_score() },
    ];
    for o in &outcomes {
        report(o);
    }
    let dir = tempfile::tempdir().unwrap();
    println!("building the acceptance workspace in {}", dir.path().display());
    let p = Pipeline::run(dir.path());
    let later: [(u32, &'static str, fn(&Pipeline) -> Result<String, String>); 8] = [
        (4, "benign detection", benign_detection),
        (5, "white-box collapse", white_box_collapse),
        (6, "transfer collapse", transfer_collapse),
        (7, "random-noise gap", noise_gap),
        (8, "ρ hierarchy", rho_hierarchy),
        (9, "purification direction", purification_direction),
        (10, "adversarial-training divergence", at_divergence),
        (11, "invariant scan", invariant_scan),
    ];
    for (id, title, f) in later {
        let o = Outcome { id, title, result: f(&p) };
        report(&o);
        outcomes.push(o);
    }
    let failed: Vec<u32> = outcomes.iter().filter(|o| o.result.is_err()).map(|o| o.id).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.0}s",
        outcomes.len() - failed.len(),
        outcomes.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

fn report(o: &Outcome) {
    match &o.result {
        Ok(d) => println!("criterion {:2} PASS {}: {d}", o.id, o.title),
        Err(d) => println!("criterion {:2} FAIL {}: {d}", o.id, o.title),
    }
}
