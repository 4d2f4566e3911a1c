//! Subcommand implementations. Each command validates its full
//! configuration before producing any output, stages every artifact in
//! memory, and commits the files atomically at the end.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use cil_core::data::{filter_by_classes, save_dataset, stratified_split, Dataset, SplitIndices};
use cil_core::engine::{run_experiment, ExperimentReport};
use cil_core::gradcheck::run_standard_suite;
use cil_core::model::ModelState;
use cil_core::tasks::TaskPlan;
use cil_core::trainer::{extract_for_incremental, train_base, TrainLog};
use cil_core::{Error, Result};

use crate::config::{default_head_grid, plan_label, ExperimentConfig, PlanConfig};
use crate::output::OutputSet;

pub const GRADCHECK_SEEDS: [u64; 3] = [11, 23, 47];

/// Generate the configured synthetic dataset and write it as a loadable
/// dataset directory.
pub fn cmd_synth(cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    let ds = cfg.resolve_dataset()?;
    save_dataset(&ds, &cfg.out_dir)?;
    println!(
        "wrote dataset: {} samples, {} classes, features {:?} -> {}",
        ds.num_samples(),
        ds.num_classes(),
        ds.feature_shape(),
        cfg.out_dir.display()
    );
    Ok(())
}

struct Prepared {
    ds: Dataset,
    split: SplitIndices,
    schedule: cil_core::data::ClassSchedule,
    base_classes: Vec<usize>,
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let ds = cfg.resolve_dataset()?;
    let split = stratified_split(&ds, &cfg.split.spec, cfg.split.seed)?;
    let schedule = cfg.resolve_schedule(ds.num_classes())?;
    let base_classes = {
        let mut b = schedule.base_classes().to_vec();
        b.sort_unstable();
        b
    };
    Ok(Prepared { ds, split, schedule, base_classes })
}

fn train_base_once(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    plan: &TaskPlan,
    seed: u64,
) -> Result<(ModelState<f32>, TrainLog)> {
    let spec = cfg.backbone.to_spec(prep.ds.feature_shape())?;
    let train = filter_by_classes(&prep.ds, &prep.split.train, &prep.base_classes);
    let val = filter_by_classes(&prep.ds, &prep.split.val, &prep.base_classes);
    let base_cfg = cfg.base_train_for_seed(seed);
    train_base(&spec, plan, &prep.ds, &train, &val, &base_cfg)
}

#[derive(Serialize)]
struct TrainBaseReport {
    config_echo: serde_json::Value,
    seed: u64,
    plan: Vec<Vec<usize>>,
    best_epoch: usize,
    best_val_accuracy: f64,
    epochs_run: usize,
    mean_epoch_seconds: f64,
}

/// Train the multitask base model and write the snapshot plus the epoch log.
pub fn cmd_train_base(cfg: &ExperimentConfig, heads: Option<&str>) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(flag) = heads {
        cfg.plan = PlanConfig::from_heads_flag(flag)?;
    }
    let prep = prepare(&cfg)?;
    let plan = cfg.plan.build(&prep.base_classes, cfg.plan_seed)?;
    let seed = cfg.seeds[0];
    let (model, log) = train_base_once(&cfg, &prep, &plan, seed)?;
    let single = extract_for_incremental(&model, &plan)?;

    let mut out = OutputSet::default();
    out.add("train_log.csv", log.to_csv_string().into_bytes());
    out.add_json(
        "train_base_report.json",
        &TrainBaseReport {
            config_echo: cfg.echo()?,
            seed,
            plan: plan.label_sets(),
            best_epoch: log.best_epoch,
            best_val_accuracy: log.best_val_accuracy,
            epochs_run: log.epochs.len(),
            mean_epoch_seconds: log.mean_epoch_seconds(),
        },
    )?;
    let written = out.commit(&cfg.out_dir)?;
    // The snapshot writer owns its format; stage it through the same
    // temp-then-rename discipline.
    let snapshot_path = cfg.out_dir.join("base_model.cilm");
    let tmp = cfg.out_dir.join(format!("base_model.cilm.tmp-{}", std::process::id()));
    single.save_snapshot(&tmp)?;
    std::fs::rename(&tmp, &snapshot_path)?;
    println!(
        "trained base model (plan {}, best val acc {:.4}); wrote {} files + {}",
        plan_label(&plan.label_sets()),
        log.best_val_accuracy,
        written.len(),
        snapshot_path.display()
    );
    Ok(())
}

fn run_cil_once(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    base: ModelState<f32>,
    seed: u64,
) -> Result<ExperimentReport> {
    let ex = cfg.exemplar_for_seed(seed);
    let step = cfg.step_for_seed(seed);
    let mut report = run_experiment(base, &prep.schedule, &prep.ds, &prep.split, &ex, &step)?;
    report.config_echo = cfg.echo()?;
    report.seed = seed;
    Ok(report)
}

/// Run the incremental pipeline from a base snapshot.
pub fn cmd_run_cil(cfg: &ExperimentConfig, base_snapshot: &Path) -> Result<()> {
    let prep = prepare(cfg)?;
    let base = ModelState::<f32>::load_snapshot(base_snapshot)?;
    let seed = cfg.seeds[0];
    let report = run_cil_once(cfg, &prep, base, seed)?;

    let mut out = OutputSet::default();
    out.add_json("report.json", &report)?;
    out.add("steps.csv", report.steps_csv().into_bytes());
    out.add("confusion_step0.csv", report.base.confusion.to_csv_string().into_bytes());
    for rec in &report.steps {
        out.add(
            format!("confusion_step{}.csv", rec.report.step_index),
            rec.eval.confusion.to_csv_string().into_bytes(),
        );
    }
    out.add_json("exemplar_store.json", &report.exemplar_store)?;
    let written = out.commit(&cfg.out_dir)?;
    match report.avg_incremental_accuracy {
        Some(avg) => println!(
            "ran {} incremental steps; avg incremental accuracy {:.4}; wrote {} files",
            report.steps.len(),
            avg,
            written.len()
        ),
        None => println!(
            "base-only schedule evaluated (accuracy {:.4}); wrote {} files",
            report.base.accuracy,
            written.len()
        ),
    }
    Ok(())
}

#[derive(Serialize)]
struct AblationCell {
    label: String,
    seed: u64,
    step_accuracies: Vec<f64>,
    avg_incremental_accuracy: f64,
}

#[derive(Serialize)]
struct AblationReport {
    config_echo: serde_json::Value,
    rows: Vec<AblationCell>,
}

/// Run the six-configuration loss ablation and emit a table shaped like the
/// published one: one row per switch set, per-step accuracies plus the
/// exclude-base average, meaned over seeds.
pub fn cmd_ablate_losses(cfg: &ExperimentConfig, jobs: usize) -> Result<()> {
    let prep = prepare(cfg)?;
    let grid = cil_core::engine::ablation_grid();
    let plan = cfg.plan.build(&prep.base_classes, cfg.plan_seed)?;

    let cells: Vec<(usize, u64)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| (0..grid.len()).map(move |g| (g, s)))
        .collect();
    // One base model per seed, shared across the six loss rows.
    let bases: Vec<(u64, ModelState<f32>)> = pool(jobs)?.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let (model, _) = train_base_once(cfg, &prep, &plan, seed)?;
                Ok((seed, extract_for_incremental(&model, &plan)?))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let base_of = |seed: u64| {
        bases
            .iter()
            .find(|(s, _)| *s == seed)
            .map(|(_, m)| m.clone())
            .expect("base trained for every seed")
    };

    let results: Vec<AblationCell> = pool(jobs)?.install(|| {
        cells
            .par_iter()
            .map(|&(g, seed)| {
                let mut step = cfg.step_for_seed(seed);
                step.losses = grid[g].clone();
                let ex = cfg.exemplar_for_seed(seed);
                let report =
                    run_experiment(base_of(seed), &prep.schedule, &prep.ds, &prep.split, &ex, &step)?;
                Ok(AblationCell {
                    label: grid[g].label(),
                    seed,
                    step_accuracies: report.step_accuracies(),
                    avg_incremental_accuracy: report.avg_incremental_accuracy.unwrap_or(f64::NAN),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    // Mean over seeds, per configuration, in grid order.
    let n_steps = prep.schedule.step_sizes.len();
    let mut csv = String::from("losses");
    let mut n_classes = 0;
    for size in &prep.schedule.step_sizes {
        n_classes += size;
        csv.push_str(&format!(",acc_{n_classes}"));
    }
    csv.push_str(",avg\n");
    for switches in &grid {
        let label = switches.label();
        let rows: Vec<&AblationCell> = results.iter().filter(|c| c.label == label).collect();
        let mut means = vec![0.0f64; n_steps];
        let mut avg = 0.0;
        for cell in &rows {
            for (i, v) in cell.step_accuracies.iter().enumerate() {
                means[i] += v;
            }
            avg += cell.avg_incremental_accuracy;
        }
        let k = rows.len() as f64;
        csv.push_str(&label);
        for m in means {
            csv.push_str(&format!(",{:.2}", m / k * 100.0));
        }
        csv.push_str(&format!(",{:.2}\n", avg / k * 100.0));
    }

    let mut out = OutputSet::default();
    out.add("ablation.csv", csv.clone().into_bytes());
    out.add_json("ablation.json", &AblationReport { config_echo: cfg.echo()?, rows: results })?;
    let written = out.commit(&cfg.out_dir)?;
    print!("{csv}");
    println!("wrote {} files to {}", written.len(), cfg.out_dir.display());
    Ok(())
}

#[derive(Serialize)]
struct SweepCell {
    label: String,
    seed: u64,
    avg_incremental_accuracy: f64,
    base_epoch_seconds: f64,
}

#[derive(Serialize)]
struct SweepReport {
    config_echo: serde_json::Value,
    cells: Vec<SweepCell>,
}

/// Sweep task-plan shapes: per (plan, seed) cell, train the base model
/// (recording seconds per epoch) and run the incremental pipeline.
pub fn cmd_sweep_heads(cfg: &ExperimentConfig, jobs: usize) -> Result<()> {
    let prep = prepare(cfg)?;
    let grids: Vec<Vec<usize>> = match &cfg.sweep_heads {
        Some(s) if !s.plans.is_empty() => s.plans.clone(),
        _ => default_head_grid(prep.base_classes.len()),
    };
    // Validate the whole grid before any training starts.
    let mut plans = Vec::new();
    for sizes in &grids {
        plans.push((
            format!("[{}]", sizes.iter().map(usize::to_string).collect::<Vec<_>>().join(",")),
            PlanConfig::Decreasing { sizes: sizes.clone(), nested: false }
                .build(&prep.base_classes, cfg.plan_seed)?,
        ));
    }

    let cells: Vec<(usize, u64)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| (0..plans.len()).map(move |p| (p, s)))
        .collect();
    let results: Vec<SweepCell> = pool(jobs)?.install(|| {
        cells
            .par_iter()
            .map(|&(p, seed)| {
                let (label, plan) = &plans[p];
                let (model, log) = train_base_once(cfg, &prep, plan, seed)?;
                let base = extract_for_incremental(&model, plan)?;
                let report = run_cil_report(cfg, &prep, base, seed)?;
                Ok(SweepCell {
                    label: label.clone(),
                    seed,
                    avg_incremental_accuracy: report
                        .avg_incremental_accuracy
                        .unwrap_or(f64::NAN),
                    base_epoch_seconds: log.mean_epoch_seconds(),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut acc_csv = String::from("plan,seed,avg_incremental_accuracy\n");
    let mut time_csv = String::from("plan,seed,seconds_per_epoch\n");
    for c in &results {
        acc_csv.push_str(&format!(
            "\"{}\",{},{:.6}\n",
            c.label, c.seed, c.avg_incremental_accuracy
        ));
        time_csv.push_str(&format!("\"{}\",{},{:.6}\n", c.label, c.seed, c.base_epoch_seconds));
    }
    let mut out = OutputSet::default();
    out.add("heads_accuracy.csv", acc_csv.into_bytes());
    out.add("heads_epoch_time.csv", time_csv.into_bytes());
    out.add_json("sweep_heads.json", &SweepReport { config_echo: cfg.echo()?, cells: results })?;
    let written = out.commit(&cfg.out_dir)?;
    println!(
        "swept {} plans x {} seeds; wrote {} files to {}",
        plans.len(),
        cfg.seeds.len(),
        written.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

fn run_cil_report(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    base: ModelState<f32>,
    seed: u64,
) -> Result<ExperimentReport> {
    let ex = cfg.exemplar_for_seed(seed);
    let step = cfg.step_for_seed(seed);
    run_experiment(base, &prep.schedule, &prep.ds, &prep.split, &ex, &step)
}

/// Sweep the exemplar budget K: one base model per seed, one incremental
/// run per (K, seed) cell.
pub fn cmd_sweep_exemplars(cfg: &ExperimentConfig, jobs: usize) -> Result<()> {
    let prep = prepare(cfg)?;
    let capacities: Vec<usize> = match &cfg.sweep_exemplars {
        Some(s) if !s.capacities.is_empty() => s.capacities.clone(),
        _ => vec![20, 50, 100, 200, 300, 400],
    };
    for &k in &capacities {
        if k < prep.ds.num_classes() {
            return Err(Error::InvalidConfig(format!(
                "exemplar capacity {k} cannot cover {} classes",
                prep.ds.num_classes()
            )));
        }
    }
    let plan = cfg.plan.build(&prep.base_classes, cfg.plan_seed)?;
    let bases: Vec<(u64, ModelState<f32>)> = pool(jobs)?.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let (model, _) = train_base_once(cfg, &prep, &plan, seed)?;
                Ok((seed, extract_for_incremental(&model, &plan)?))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let base_of = |seed: u64| {
        bases
            .iter()
            .find(|(s, _)| *s == seed)
            .map(|(_, m)| m.clone())
            .expect("base trained for every seed")
    };

    let cells: Vec<(usize, u64)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| capacities.iter().map(move |&k| (k, s)))
        .collect();
    let results: Vec<SweepCell> = pool(jobs)?.install(|| {
        cells
            .par_iter()
            .map(|&(k, seed)| {
                let mut ex = cfg.exemplar_for_seed(seed);
                ex.capacity = k;
                let step = cfg.step_for_seed(seed);
                let report = run_experiment(
                    base_of(seed),
                    &prep.schedule,
                    &prep.ds,
                    &prep.split,
                    &ex,
                    &step,
                )?;
                Ok(SweepCell {
                    label: k.to_string(),
                    seed,
                    avg_incremental_accuracy: report
                        .avg_incremental_accuracy
                        .unwrap_or(f64::NAN),
                    base_epoch_seconds: 0.0,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut csv = String::from("capacity,seed,avg_incremental_accuracy\n");
    for c in &results {
        csv.push_str(&format!("{},{},{:.6}\n", c.label, c.seed, c.avg_incremental_accuracy));
    }
    let mut out = OutputSet::default();
    out.add("exemplars_accuracy.csv", csv.into_bytes());
    out.add_json(
        "sweep_exemplars.json",
        &SweepReport { config_echo: cfg.echo()?, cells: results },
    )?;
    let written = out.commit(&cfg.out_dir)?;
    println!(
        "swept {} capacities x {} seeds; wrote {} files to {}",
        capacities.len(),
        cfg.seeds.len(),
        written.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

/// Finite-difference verification of every backward rule; exits nonzero on
/// any failure (numerical-failure code).
pub fn cmd_gradcheck() -> Result<()> {
    let started = Instant::now();
    let report = run_standard_suite(&GRADCHECK_SEEDS, 1e-6)?;
    for line in report.summary_lines() {
        println!("{line}");
    }
    println!(
        "{} checks in {:.2}s",
        report.cases.len(),
        started.elapsed().as_secs_f64()
    );
    if report.all_passed() {
        println!("gradcheck: PASS");
        Ok(())
    } else {
        println!("gradcheck: FAIL");
        Err(Error::NonFinite("analytic gradients disagree with finite differences".into()))
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot build thread pool: {e}")))
}
