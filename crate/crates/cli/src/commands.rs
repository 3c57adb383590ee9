//! One function per subcommand. Each reads its prerequisites from the
//! workspace, writes only its own outputs and returns a metric payload for
//! the run record.

use rayon::prelude::*;
use reconbench::analysis::{collapse_probe, craft_transfer_sets, evaluate_transfer, rho_hierarchy, RhoRegime, RhoStats, TransferRegime};
use reconbench::attacks::{adversarial_set, attack_dataset, random_dataset, robust_accuracy, AttackConfig, AttackVariant};
use reconbench::autoencoder::AutoEncoder;
use reconbench::defenses::{at_grid_search, evaluate_defense, purification_sweep};
use reconbench::detectors::{Detector, DetectorKind, LabeledDataset, Split};
use reconbench::score::ScoreModel;
use reconbench::world::{build_autoencoder, build_datasets, build_generators, train_world_detector, GeneratorData, SPLITS};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::workspace::{ScoreCheckpoint, Workspace};

pub struct Ctx {
    pub ws: Workspace,
    pub config: ExperimentConfig,
    /// Hash of the full resolved configuration.
    pub hash: String,
    /// Hash of the world section; stamps every artifact.
    pub world: String,
}

impl Ctx {
    fn generator_ids(&self) -> Vec<String> {
        self.config.world.generators.iter().map(|g| g.id.clone()).collect()
    }

    /// Detector ids, kind-major then generator.
    fn detector_ids(&self) -> Vec<(DetectorKind, usize, String)> {
        let gens = self.generator_ids();
        DetectorKind::ALL
            .iter()
            .flat_map(|k| gens.iter().enumerate().map(move |(g, id)| (*k, g, format!("{k}@{id}"))))
            .collect()
    }

    fn detectors(&self) -> Result<Vec<Detector>, CliError> {
        self.detector_ids().iter().map(|(_, _, id)| self.ws.load_detector(&self.world, id)).collect()
    }

    fn datasets(&self) -> Result<Vec<GeneratorData>, CliError> {
        self.generator_ids().iter().map(|g| self.ws.load_data(&self.world, g)).collect()
    }
}

fn variant_name(a: &AttackConfig) -> &'static str {
    match a.variant {
        AttackVariant::Pgd => "pgd",
        AttackVariant::Apgd => "apgd",
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

pub fn train_score(ctx: &Ctx) -> Result<Value, CliError> {
    let world = &ctx.config.world;
    let mixture = world.mixture();
    let generators = build_generators(world, &mixture)?;
    let ids: Vec<String> = generators.iter().map(|g| g.spec.id.clone()).collect();
    ctx.ws.save(&ctx.ws.score_path(), "score", &ctx.world, &ScoreCheckpoint { mixture, generators })?;
    println!("trained {} generators: {}", ids.len(), ids.join(", "));
    Ok(json!({ "generators": ids }))
}

#[derive(Serialize)]
struct SplitRow<'a> {
    generator: &'a str,
    split: &'static str,
    real: usize,
    fake: usize,
}

fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

pub fn gen_data(ctx: &Ctx) -> Result<Value, CliError> {
    let score = ctx.ws.load_score(&ctx.world)?;
    let data = build_datasets(&ctx.config.world, &score.mixture, &score.generators)?;
    let mut rows = Vec::new();
    for d in &data {
        ctx.ws.save(&ctx.ws.data_path(&d.generator), "dataset", &ctx.world, d)?;
        for s in SPLITS {
            let (real, fake) = d.split(s).counts();
            rows.push(SplitRow {
                generator: &d.generator,
                split: split_name(s),
                real,
                fake,
            });
        }
    }
    ctx.ws.write_csv("datasets", &ctx.hash, &rows)?;
    let total: usize = rows.iter().map(|r| r.real + r.fake).sum();
    println!("wrote {total} samples for {} generators", data.len());
    Ok(json!({ "samples": total }))
}

fn mean_reconstruction_error(ae: &AutoEncoder, xs: &[reconbench::sde::DataPoint]) -> Result<f64, CliError> {
    let errs = xs
        .par_iter()
        .map(|x| {
            let r = ae.reconstruct(x)?;
            Ok(x.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.dim() as f64)
        })
        .collect::<Result<Vec<f64>, reconbench::Error>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len().max(1) as f64)
}

pub fn train_ae(ctx: &Ctx) -> Result<Value, CliError> {
    // Real splits are shared, so any generator's file provides them.
    let first = &ctx.generator_ids()[0];
    let data = ctx.ws.load_data(&ctx.world, first)?;
    let ae = build_autoencoder(&ctx.config.world, &data.reals(Split::Train))?;
    let test_mse = mean_reconstruction_error(&ae, &data.reals(Split::Test))?;
    ctx.ws.save(&ctx.ws.ae_path(), "autoencoder", &ctx.world, &ae)?;
    println!("autoencoder real-test mse {test_mse:.5}");
    Ok(json!({ "real_test_mse": test_mse }))
}

#[derive(Serialize)]
struct DetectorRow {
    detector: String,
    train_accuracy: f64,
    val_accuracy: f64,
    test_accuracy: f64,
    test_auc: f64,
}

pub fn train_detector(ctx: &Ctx) -> Result<Value, CliError> {
    let score = ctx.ws.load_score(&ctx.world)?;
    let data = ctx.datasets()?;
    let ae = ctx.ws.load_ae(&ctx.world)?;
    let jobs = ctx.detector_ids();
    let trained = jobs
        .par_iter()
        .map(|(k, g, _)| train_world_detector(&ctx.config.world, *k, &score.generators[*g], &data[*g], &ae))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rows = Vec::new();
    for ((_, g, id), (det, report)) in jobs.iter().zip(&trained) {
        ctx.ws.save(&ctx.ws.detector_path(id), "detector", &ctx.world, det)?;
        let test = det.evaluate(&data[*g].test)?;
        println!("{id:24} val {:.3} test {:.3}", report.val.accuracy, test.accuracy);
        rows.push(DetectorRow {
            detector: id.clone(),
            train_accuracy: report.train.accuracy,
            val_accuracy: report.val.accuracy,
            test_accuracy: test.accuracy,
            test_auc: test.auc,
        });
    }
    ctx.ws.write_csv("detectors", &ctx.hash, &rows)?;
    Ok(to_value(&rows))
}

#[derive(Serialize)]
struct AttackRow<'a> {
    detector: &'a str,
    sample_id: u64,
    label: String,
    epsilon: f64,
    steps: usize,
    variant: &'a str,
    success: bool,
    final_loss: f64,
    delta_linf: f64,
    delta_l2: f64,
}

#[derive(Serialize)]
struct AttackSummaryRow {
    detector: String,
    n: usize,
    epsilon: f64,
    variant: &'static str,
    steps: usize,
    clean_accuracy: f64,
    robust_accuracy: f64,
    noise_accuracy: f64,
}

pub fn attack(ctx: &Ctx) -> Result<Value, CliError> {
    let cfg = &ctx.config.attack;
    let data = ctx.datasets()?;
    let detectors = ctx.detectors()?;
    let variant = variant_name(&cfg.attack);
    let ids = ctx.detector_ids();
    let mut records = Vec::new();
    let mut summary = Vec::new();
    for ((_, g, id), det) in ids.iter().zip(&detectors) {
        let subset = data[*g].test.balanced_head(cfg.per_class)?;
        let adv = attack_dataset(det, &subset, &cfg.attack)?;
        let noise = random_dataset(det, &subset, cfg.attack.epsilon, cfg.attack.seed)?;
        ctx.ws.save(&ctx.ws.adversarial_path(id), "adversarial", &ctx.world, &adv)?;
        for e in &adv {
            let r = e.record(cfg.attack.steps, variant);
            records.push(AttackRow {
                detector: id,
                sample_id: r.sample_id,
                label: r.label.to_string(),
                epsilon: r.epsilon,
                steps: r.steps,
                variant,
                success: r.success,
                final_loss: r.final_loss,
                delta_linf: r.delta_linf,
                delta_l2: r.delta_l2,
            });
        }
        let row = AttackSummaryRow {
            detector: id.clone(),
            n: subset.len(),
            epsilon: cfg.attack.epsilon,
            variant,
            steps: cfg.attack.steps,
            clean_accuracy: det.evaluate(&subset)?.accuracy,
            robust_accuracy: robust_accuracy(det, &adv)?,
            noise_accuracy: robust_accuracy(det, &noise)?,
        };
        println!(
            "{id:24} clean {:.3} robust {:.3} noise {:.3}",
            row.clean_accuracy, row.robust_accuracy, row.noise_accuracy
        );
        summary.push(row);
    }
    ctx.ws.write_csv("attack_records", &ctx.hash, &records)?;
    ctx.ws.write_csv("attack_summary", &ctx.hash, &summary)?;
    Ok(to_value(&summary))
}

#[derive(Serialize)]
struct PairRow {
    regime: &'static str,
    surrogate: &'static str,
    target: &'static str,
    mean: f64,
    std: f64,
    n: usize,
}

const REGIMES: [TransferRegime; 4] = [
    TransferRegime::WhiteBox,
    TransferRegime::CrossGenerator,
    TransferRegime::CrossMethod,
    TransferRegime::CrossBoth,
];

pub fn transfer(ctx: &Ctx) -> Result<Value, CliError> {
    let cfg = &ctx.config.transfer;
    let data = ctx.datasets()?;
    let detectors = ctx.detectors()?;
    let sets_in: Vec<(String, LabeledDataset)> = data
        .iter()
        .map(|d| Ok((d.generator.clone(), d.test.balanced_head(cfg.per_class)?)))
        .collect::<Result<_, CliError>>()?;
    let sets = craft_transfer_sets(&detectors, &sets_in, &cfg.attack)?;
    for s in &sets {
        ctx.ws.save(&ctx.ws.transfer_set_path(&s.surrogate, &s.generator), "transfer-set", &ctx.world, s)?;
    }
    let matrix = evaluate_transfer(&sets, &detectors, &detectors)?;
    ctx.ws.write_csv("transfer", &ctx.hash, &matrix.cells)?;
    let mut pairs = Vec::new();
    for regime in REGIMES {
        for p in matrix.pair_summaries(regime) {
            pairs.push(PairRow {
                regime: regime.name(),
                surrogate: p.surrogate.name(),
                target: p.target.name(),
                mean: p.mean,
                std: p.std,
                n: p.n,
            });
        }
    }
    for p in pairs.iter().filter(|p| p.regime == TransferRegime::CrossBoth.name()) {
        println!("cross-both {:10} -> {:10} {:.3} ± {:.3}", p.surrogate, p.target, p.mean, p.std);
    }
    ctx.ws.write_csv("transfer_summary", &ctx.hash, &pairs)?;
    Ok(to_value(&pairs))
}

#[derive(Serialize)]
struct PurifyRow<'a> {
    detector: &'a str,
    input: &'static str,
    ratio: f64,
    accuracy: f64,
    auc: f64,
    unpurified_accuracy: f64,
}

pub fn purify(ctx: &Ctx) -> Result<Value, CliError> {
    let cfg = &ctx.config.purify;
    let score = ctx.ws.load_score(&ctx.world)?;
    let data = ctx.datasets()?;
    let detectors = ctx.detectors()?;
    let schedule = &ctx.config.world.schedule;
    let source = match &cfg.purify.source {
        Some(s) => Some(score.generators.iter().position(|g| &g.spec.id == s).expect("resolved at load")),
        None => None,
    };
    let ids = ctx.detector_ids();
    let mut rows = Vec::new();
    for ((_, g, id), det) in ids.iter().zip(&detectors) {
        let model: &dyn ScoreModel = &score.generators[source.unwrap_or(*g)].model;
        let benign = data[*g].test.balanced_head(cfg.per_class)?;
        let attacked = ctx.ws.load_adversarial(&ctx.world, id)?;
        let adversarial = adversarial_set(&attacked)?.balanced_head(cfg.per_class)?;
        if adversarial.ids != benign.ids {
            return Err(CliError::Config(format!("adversarial set of {id} does not match the test split; rerun `reconbench attack`")));
        }
        let adv_examples: Vec<_> = attacked.into_iter().filter(|e| benign.ids.contains(&e.id)).collect();
        let inputs = [
            ("benign", &benign, det.evaluate(&benign)?.accuracy),
            ("adversarial", &adversarial, robust_accuracy(det, &adv_examples)?),
        ];
        for (name, set, before) in inputs {
            let sweep = purification_sweep(det, set, &cfg.ratios, &cfg.purify, model, schedule)?;
            let accs: Vec<String> = sweep.iter().map(|p| format!("{:.3}", p.metrics.accuracy)).collect();
            println!("{id:24} {name:11} {before:.3} -> [{}]", accs.join(", "));
            for p in sweep {
                rows.push(PurifyRow {
                    detector: id,
                    input: name,
                    ratio: p.ratio,
                    accuracy: p.metrics.accuracy,
                    auc: p.metrics.auc,
                    unpurified_accuracy: before,
                });
            }
        }
    }
    ctx.ws.write_csv("purify", &ctx.hash, &rows)?;
    Ok(to_value(&rows))
}

#[derive(Serialize)]
struct GridRow<'a> {
    detector: &'a str,
    inner_steps: usize,
    epsilon: f64,
    epsilon_feat: Option<f64>,
    val_clean_accuracy: f64,
    val_robust_accuracy: f64,
}

#[derive(Serialize)]
struct HardenedRow {
    detector: String,
    inner_steps: usize,
    epsilon: f64,
    epsilon_feat: Option<f64>,
    clean_accuracy: f64,
    robust_accuracy: f64,
}

pub fn advtrain(ctx: &Ctx) -> Result<Value, CliError> {
    let cfg = &ctx.config.advtrain;
    let selected = |gen: &str| cfg.generators.is_empty() || cfg.generators.iter().any(|g| g == gen);
    let gens = ctx.generator_ids();
    let ids = ctx.detector_ids();
    let mut grid_rows = Vec::new();
    let mut rows = Vec::new();
    for (kind, g, id) in &ids {
        let (kind, g) = (*kind, *g);
        if kind == DetectorKind::Aeroblade || !selected(&gens[g]) {
            continue;
        }
        let det = ctx.ws.load_detector(&ctx.world, id)?;
        let data = ctx.ws.load_data(&ctx.world, &gens[g])?;
        let train = data.train.balanced_head(cfg.train_per_class)?;
        let val = data.val.balanced_head(cfg.val_per_class)?;
        let test = data.test.balanced_head(cfg.test_per_class)?;
        let result = at_grid_search(&det, &train, &val, &cfg.grid)?;
        for c in &result.cells {
            grid_rows.push(GridRow {
                detector: id,
                inner_steps: c.inner_steps,
                epsilon: c.epsilon,
                epsilon_feat: c.epsilon_feat,
                val_clean_accuracy: c.val.clean.accuracy,
                val_robust_accuracy: c.val.robust,
            });
        }
        let eval = evaluate_defense(&result.best, &test, &cfg.eval_attack)?;
        ctx.ws.save(&ctx.ws.hardened_path(id), "detector", &ctx.world, &result.best)?;
        println!(
            "{id:24} K {} ε {} clean {:.3} robust {:.3}",
            result.best_cell.inner_steps, result.best_cell.epsilon, eval.clean.accuracy, eval.robust
        );
        rows.push(HardenedRow {
            detector: id.clone(),
            inner_steps: result.best_cell.inner_steps,
            epsilon: result.best_cell.epsilon,
            epsilon_feat: result.best_cell.epsilon_feat,
            clean_accuracy: eval.clean.accuracy,
            robust_accuracy: eval.robust,
        });
    }
    ctx.ws.write_csv("advtrain_grid", &ctx.hash, &grid_rows)?;
    ctx.ws.write_csv("advtrain", &ctx.hash, &rows)?;
    Ok(to_value(&rows))
}

#[derive(Serialize)]
struct RhoRow<'a> {
    detector: &'a str,
    sample_id: u64,
    regime: &'static str,
    class: String,
    /// Empty when the clean feature is zero.
    rho: Option<f64>,
}

#[derive(Serialize)]
struct RhoSummaryRow<'a> {
    detector: &'a str,
    regime: &'static str,
    mean: f64,
    mean_real: f64,
    mean_fake: f64,
    undefined: usize,
    ordered: bool,
}

pub fn analyze_rho(ctx: &Ctx) -> Result<Value, CliError> {
    let cfg = &ctx.config.rho;
    let gens = ctx.generator_ids();
    if gens.len() < 2 {
        return Err(CliError::Config("analyze-rho needs at least two generators for the transferred regime".into()));
    }
    let data = ctx.datasets()?;
    let detectors = ctx.detectors()?;
    let ids = ctx.detector_ids();
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    let mut ordered = 0;
    for (i, (kind, g, id)) in ids.iter().enumerate() {
        let ood_idx = ids.iter().position(|(k, h, _)| k == kind && *h == (g + 1) % gens.len()).unwrap();
        let subset = data[*g].test.balanced_head(cfg.per_class)?;
        let h = rho_hierarchy(&detectors[i], &detectors[ood_idx], &subset, &cfg.attack)?;
        let is_ordered = h.ordered();
        ordered += is_ordered as usize;
        println!(
            "{id:24} iid {:.3} ood {:.3} random {:.3}{}",
            h.iid.mean,
            h.ood.mean,
            h.random.mean,
            if is_ordered { "" } else { "  (not ordered)" }
        );
        for stats in [&h.iid, &h.ood, &h.random] {
            push_rho(&mut rows, &mut summary, id, stats, is_ordered);
        }
    }
    ctx.ws.write_csv("rho", &ctx.hash, &rows)?;
    ctx.ws.write_csv("rho_summary", &ctx.hash, &summary)?;
    println!("ordered cells: {ordered}/{}", ids.len());
    Ok(json!({ "ordered": ordered, "cells": ids.len() }))
}

fn push_rho<'a>(rows: &mut Vec<RhoRow<'a>>, summary: &mut Vec<RhoSummaryRow<'a>>, id: &'a str, stats: &RhoStats, ordered: bool) {
    let regime: RhoRegime = stats.regime;
    for r in &stats.records {
        rows.push(RhoRow {
            detector: id,
            sample_id: r.id,
            regime: regime.name(),
            class: r.label.to_string(),
            rho: r.rho,
        });
    }
    summary.push(RhoSummaryRow {
        detector: id,
        regime: regime.name(),
        mean: stats.mean,
        mean_real: stats.mean_real,
        mean_fake: stats.mean_fake,
        undefined: stats.undefined,
        ordered,
    });
}

#[derive(Serialize)]
struct CollapseRow {
    detector: String,
    fraction_real: f64,
    n: usize,
    seed: u64,
}

pub fn collapse(ctx: &Ctx) -> Result<Value, CliError> {
    let n = ctx.config.collapse.n;
    let seed = ctx.config.seed;
    let mut rows = Vec::new();
    for ((_, _, id), det) in ctx.detector_ids().iter().zip(&ctx.detectors()?) {
        let fraction_real = collapse_probe(det, n, seed)?;
        println!("{id:24} fraction real {fraction_real:.3}");
        rows.push(CollapseRow {
            detector: id.clone(),
            fraction_real,
            n,
            seed,
        });
    }
    ctx.ws.write_csv("collapse", &ctx.hash, &rows)?;
    Ok(to_value(&rows))
}
