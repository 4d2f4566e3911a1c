//! Acceptance suite: one test per criterion, each printing a final
//! `ACCEPT-NN <name>: PASS` (or FAIL) line. Run with `-- --nocapture` to
//! see every line.
//!
//! Scope notes: dataset-scale reference accuracies are not reproducible at
//! desk scale, so the criteria combine arithmetic oracles against published
//! reference numbers with property-based and synthetic-data checks.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cil_core::data::{
    filter_by_classes, load_dataset, parse_schedule_ordered, save_dataset, stratified_split,
    synth_blobs, Dataset, SplitIndices, SplitSpec,
};
use cil_core::engine::{
    run_experiment, run_step, ExemplarConfig, ExperimentReport, IncrementalState, LossSwitches,
    Phase1Config, Phase2Config, StepConfig,
};
use cil_core::exemplar::{herding_order, ClassIndex, ExemplarStore, SelectionStrategy};
use cil_core::gradcheck::run_standard_suite;
use cil_core::loss::{cross_entropy, kd_loss};
use cil_core::metrics::avg_incremental_accuracy;
use cil_core::model::{BackboneSpec, FreezeScope, LossTerm, ModelState};
use cil_core::optim::{sgd_step, LrSchedule, OptimizerState};
use cil_core::tasks::{
    enumerate_task_count, make_decreasing_plan, make_explicit_plan, make_fixed_size_plan,
    TaskPlan,
};
use cil_core::tensor::Tensor;
use cil_core::trainer::{
    evaluate_accuracy, extract_for_incremental, train_base, BaseTrainConfig,
};
use cil_core::Mode;

// ---------------------------------------------------------------------------
// Criterion 1: gradient suite, every layer/loss vs central finite
// differences, 1e-6 relative in f64, >= 3 seeds per layer type, < 60 s.
// ---------------------------------------------------------------------------
#[test]
fn accept_01_gradient_suite() {
    let started = Instant::now();
    let report = run_standard_suite(&[11, 23, 47], 1e-6).unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    for line in report.summary_lines() {
        println!("  {line}");
    }
    let ok = report.all_passed() && elapsed < 60.0;
    println!(
        "ACCEPT-01 gradient suite ({} checks, {elapsed:.2}s): {}",
        report.cases.len(),
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(report.all_passed(), "a gradient check exceeded 1e-6");
    assert!(elapsed < 60.0, "gradient suite took {elapsed:.1}s");
}

// ---------------------------------------------------------------------------
// Criterion 2: loss identities.
// ---------------------------------------------------------------------------
#[test]
fn accept_02_loss_identities() {
    let uniform = Tensor::<f64>::from_vec(&[2, 4], vec![1.7; 8]).unwrap();
    let ce = cross_entropy(&uniform, &[0, 3]).unwrap();
    assert!((ce - 4.0f64.ln()).abs() <= 1e-9, "CE(uniform, C=4) = {ce}");

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let x = Tensor::<f64>::from_vec(
        &[3, 5],
        (0..15).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect(),
    )
    .unwrap();
    for t in [1.0, 2.0, 4.0] {
        let self_kd = kd_loss(&x, &x, t).unwrap();
        assert!(self_kd.abs() <= 1e-12, "KD(x, x, {t}) = {self_kd}");
    }
    let mut shifted = x.clone();
    for r in 0..3 {
        let c = 2.0 + r as f64 * 0.7;
        for v in shifted.row_mut(r) {
            *v += c;
        }
    }
    let drift = kd_loss(&shifted, &x, 2.0).unwrap();
    assert!(drift.abs() <= 1e-9, "KD shift invariance violated: {drift}");
    println!("ACCEPT-02 loss identities: PASS");
}

// ---------------------------------------------------------------------------
// Criterion 3: published-average oracle. The six reference rows of the loss
// ablation must be reproduced from their per-step columns within +/-0.005.
//
// Note: two of the published "Avg" cells (42.52 and 77.39) sit 0.006 from
// the mean of their published two-decimal step columns; the stated +/-0.005
// cannot absorb both roundings (inputs and output each carry up to 0.005),
// so those two assertions fail by 0.001. They are asserted as stated
// anyway; see the per-row lines below.
// ---------------------------------------------------------------------------
#[test]
fn accept_03_published_average_oracle() {
    let rows: [(&str, [f64; 6], f64); 6] = [
        ("CE_N", [96.97, 60.23, 43.79, 35.73, 29.46, 26.22], 39.09),
        ("CE_N+KD_N", [97.08, 60.75, 43.34, 37.43, 36.20, 34.85], 42.52),
        ("CE_N+CE_O", [97.25, 88.77, 79.07, 72.88, 72.82, 57.27], 74.16),
        ("CE_N+CE_O+KD_N", [96.78, 84.65, 78.27, 77.91, 73.60, 72.55], 77.39),
        ("CE_N+CE_O+KD_O", [97.12, 85.72, 80.64, 78.99, 74.30, 71.93], 78.32),
        ("CE_N+CE_O+KD_N+KD_O", [97.35, 87.92, 81.47, 77.66, 73.80, 73.27], 78.82),
    ];
    let mut failures = Vec::new();
    for (label, steps, published) in &rows {
        let got = avg_incremental_accuracy(steps, false).unwrap();
        let diff = (got - published).abs();
        let ok = diff <= 0.005;
        println!(
            "  {label}: recomputed {got:.4} vs published {published} (|diff| {diff:.4}) {}",
            if ok { "ok" } else { "OUTSIDE +/-0.005" }
        );
        if !ok {
            failures.push(format!("{label}: {got:.4} vs {published}"));
        }
    }
    // The exclude-base convention itself is unambiguous: including the base
    // step lands ~9.6 points away on the first row.
    let with_base = avg_incremental_accuracy(&rows[0].1, true).unwrap();
    assert!((with_base - 48.7333).abs() < 5e-4);

    if failures.is_empty() {
        println!("ACCEPT-03 published-average oracle: PASS");
    } else {
        println!(
            "ACCEPT-03 published-average oracle: FAIL ({} of 6 rows outside +/-0.005; \
             the published cells carry a rounded-input residual of 0.006)",
            failures.len()
        );
        panic!("rows outside the stated tolerance: {failures:?}");
    }
}

// ---------------------------------------------------------------------------
// Criterion 4: task factory: closed-form count, 1000-case plan validity,
// subset-sampling uniformity.
// ---------------------------------------------------------------------------
#[test]
fn accept_04_task_factory() {
    for n in 1..=10usize {
        let mut expect = 1u64;
        for _ in 0..n {
            expect *= 2;
        }
        assert_eq!(enumerate_task_count(n).unwrap(), expect - 1, "n = {n}");
    }

    // 1000 seeded random configurations, every produced plan validates.
    let mut produced = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    while produced < 1000 {
        let n = rng.random_range(3..9usize);
        let base: Vec<usize> = (0..n).collect();
        let seed = rng.random::<u64>();
        let plan: TaskPlan = if rng.random::<bool>() {
            let size = rng.random_range(2..=n.saturating_sub(1).max(2));
            let heads = rng.random_range(1..=3usize);
            match make_fixed_size_plan(&base, heads, size, seed) {
                Ok(p) => p,
                Err(_) => continue,
            }
        } else {
            let mut sizes = vec![n];
            let mut s = n;
            while s > 2 && sizes.len() < 4 {
                s -= rng.random_range(1..=2usize);
                if s >= 2 {
                    sizes.push(s);
                }
            }
            match make_decreasing_plan(&base, &sizes, seed, false) {
                Ok(p) => p,
                Err(_) => continue,
            }
        };
        plan.validate().expect("factory output must satisfy the plan invariants");
        produced += 1;
    }

    // Uniformity: the sampled 3-subset of {0..4} across 10^4 seeds covers
    // each of the C(5,3) = 10 subsets with frequency 0.1 +/- 0.02.
    let base = [0usize, 1, 2, 3, 4];
    let mut counts: std::collections::BTreeMap<Vec<usize>, usize> = Default::default();
    let draws = 10_000usize;
    for seed in 0..draws as u64 {
        let plan = make_fixed_size_plan(&base, 2, 3, seed).unwrap();
        *counts.entry(plan.tasks[1].class_labels.clone()).or_default() += 1;
    }
    assert_eq!(counts.len(), 10, "all C(5,3) subsets should appear");
    let mut worst: f64 = 0.0;
    for (subset, count) in &counts {
        let freq = *count as f64 / draws as f64;
        worst = worst.max((freq - 0.1).abs());
        assert!(
            (freq - 0.1).abs() <= 0.02,
            "subset {subset:?} frequency {freq:.4} outside 0.1 +/- 0.02"
        );
    }
    println!("ACCEPT-04 task factory (uniformity worst |dev| {worst:.4}): PASS");
}

// ---------------------------------------------------------------------------
// Criterion 5: exemplar invariants across 500 random schedules, the K=100
// six-class quota split, and herding vs the exhaustive greedy oracle.
// ---------------------------------------------------------------------------
#[test]
fn accept_05_exemplar_invariants() {
    // 500 seeded random schedules.
    let ds = synth_blobs(10, 40, 3, 4.0, 0.5, 55).unwrap();
    let all: Vec<usize> = (0..ds.num_samples()).collect();
    let pool = ClassIndex::from_dataset(&ds, &all);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cases = 0usize;
    while cases < 500 {
        let capacity = rng.random_range(10..=36usize);
        let mut store =
            ExemplarStore::new(capacity, SelectionStrategy::Random, rng.random::<u64>()).unwrap();
        let mut seen: Vec<usize> = Vec::new();
        let mut next = 0usize;
        let steps = rng.random_range(1..=4usize);
        let mut valid_case = false;
        for _ in 0..steps {
            let add = rng.random_range(1..=3usize);
            for _ in 0..add {
                if next < 10 {
                    seen.push(next);
                    next += 1;
                }
            }
            if capacity < seen.len() {
                continue;
            }
            store.rebalance(&seen, &ds, &pool, None).unwrap();
            valid_case = true;
            assert!(store.total() <= capacity, "total over budget");
            let counts: Vec<usize> = seen
                .iter()
                .map(|&c| store.class_indices(c).unwrap().len())
                .collect();
            let min = counts.iter().min().unwrap();
            let max = counts.iter().max().unwrap();
            assert!(max - min <= 1, "imbalanced counts {counts:?}");
            for &c in &seen {
                let idx = store.class_indices(c).unwrap();
                let mut dedup = idx.to_vec();
                dedup.sort_unstable();
                dedup.dedup();
                assert_eq!(dedup.len(), idx.len(), "duplicate index in class {c}");
            }
        }
        if valid_case {
            cases += 1;
        }
    }

    // K = 100 over six classes: quotas 17,17,17,17,16,16 by ascending label.
    let ds6 = synth_blobs(6, 30, 3, 4.0, 0.5, 56).unwrap();
    let all6: Vec<usize> = (0..ds6.num_samples()).collect();
    let pool6 = ClassIndex::from_dataset(&ds6, &all6);
    let mut store = ExemplarStore::new(100, SelectionStrategy::Random, 1).unwrap();
    store.rebalance(&[0, 1, 2, 3, 4, 5], &ds6, &pool6, None).unwrap();
    let quotas: Vec<usize> = (0..6).map(|c| store.class_indices(c).unwrap().len()).collect();
    assert_eq!(quotas, vec![17, 17, 17, 17, 16, 16]);

    // Herding equals the exhaustive greedy oracle on small classes.
    let mut oracle_checked = 0;
    for seed in [3u64, 17, 29, 31] {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = r.random_range(5..=8usize);
        let d = r.random_range(2..=4usize);
        let data: Vec<f32> = (0..n * d).map(|_| r.random::<f32>() * 4.0 - 2.0).collect();
        let emb = Tensor::from_vec(&[n, d], data).unwrap();
        let fast = herding_order(&emb, n);
        let slow = exhaustive_greedy(&emb);
        assert_eq!(fast, slow, "herding diverged from the oracle at seed {seed}");
        oracle_checked += 1;
    }
    println!("ACCEPT-05 exemplar invariants (500 schedules, {oracle_checked} herding oracles): PASS");
}

/// Reference greedy selector: recomputes the objective from scratch at
/// every step, independent of the running-sum implementation.
fn exhaustive_greedy(emb: &Tensor<f32>) -> Vec<usize> {
    let n = emb.rows();
    let d = emb.row_len();
    let mean: Vec<f64> =
        (0..d).map(|j| (0..n).map(|r| emb.row(r)[j] as f64).sum::<f64>() / n as f64).collect();
    let mut taken: Vec<usize> = Vec::new();
    while taken.len() < n {
        let mut best: Option<(f64, usize)> = None;
        for cand in 0..n {
            if taken.contains(&cand) {
                continue;
            }
            let mut trial = taken.clone();
            trial.push(cand);
            let mut dist2 = 0.0;
            for (j, m) in mean.iter().enumerate().take(d) {
                let sel: f64 =
                    trial.iter().map(|&r| emb.row(r)[j] as f64).sum::<f64>() / trial.len() as f64;
                dist2 += (m - sel) * (m - sel);
            }
            if best.is_none_or(|(b, _)| dist2 < b) {
                best = Some((dist2, cand));
            }
        }
        taken.push(best.unwrap().1);
    }
    taken
}

// ---------------------------------------------------------------------------
// Criterion 6: multitask training with the single full-set task is
// bit-identical to a dedicated single-task loop under the same seed.
// ---------------------------------------------------------------------------
#[test]
fn accept_06_single_task_equivalence() {
    let ds = synth_blobs(4, 30, 6, 5.0, 0.8, 61).unwrap();
    let split = stratified_split(&ds, &SplitSpec::default(), 7).unwrap();
    let base: Vec<usize> = vec![0, 1, 2, 3];
    let spec = BackboneSpec::mlp(&[6], &[10], 6);
    let cfg = BaseTrainConfig {
        epochs_max: 12,
        batch_size: 16,
        lr_schedule: LrSchedule::CosineAnnealing { lr0: 0.05, total_epochs: 12 },
        early_stop_patience: 4,
        momentum: 0.9,
        seed: 99,
    };
    let plan = make_explicit_plan(&base, std::slice::from_ref(&base)).unwrap();
    let (multitask, _) =
        train_base(&spec, &plan, &ds, &split.train, &split.val, &cfg).unwrap();

    // Dedicated single-task loop, written against the nn-core primitives
    // only (no plan/selection machinery), mirroring the documented rng
    // discipline: model rng from cfg.seed, data rng from cfg.seed.
    let mut model = ModelState::<f32>::new(&spec, std::slice::from_ref(&base), cfg.seed).unwrap();
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::<f32>::new(cfg.momentum, model.group_count()).unwrap();
    let mask = model.set_freeze(FreezeScope::None);
    let mut best: Option<(f64, usize, ModelState<f32>)> = None;
    for epoch in 0..cfg.epochs_max {
        let lr = cfg.lr_schedule.rate_at(epoch).unwrap();
        let mut order = split.train.clone();
        order.shuffle(&mut data_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (features, labels) = ds.gather(chunk);
            let head = model.head(0).unwrap();
            let locals: Vec<usize> =
                labels.iter().map(|&l| head.local_index(l).unwrap()).collect();
            let terms =
                vec![LossTerm::CrossEntropy { rows: None, labels: locals, weight: 1.0 }];
            let (_, grads) = model.backward(&features, 0, &terms, Mode::Train).unwrap();
            sgd_step(&mut model, &grads, lr as f32, &mask, &mut opt).unwrap();
        }
        let val_acc = evaluate_accuracy(&model, &ds, &split.val, 0, cfg.batch_size).unwrap();
        let improved = best.as_ref().is_none_or(|(a, _, _)| val_acc > *a);
        if improved {
            best = Some((val_acc, epoch, model.clone()));
        }
        let best_epoch = best.as_ref().unwrap().1;
        if epoch - best_epoch >= cfg.early_stop_patience {
            break;
        }
    }
    let oracle = best.unwrap().2;

    let identical = multitask.params_bits_eq(&oracle);
    println!(
        "ACCEPT-06 single-task equivalence: {}",
        if identical { "PASS" } else { "FAIL" }
    );
    assert!(identical, "multitask trainer with plan=[full set] diverged from the plain loop");
}

// ---------------------------------------------------------------------------
// Criteria 7 and 10 share this runner.
// ---------------------------------------------------------------------------
struct BlobBench {
    ds: Dataset,
    split: SplitIndices,
    schedule: cil_core::data::ClassSchedule,
    base_classes: Vec<usize>,
    spec: BackboneSpec,
}

fn blob_bench() -> BlobBench {
    let ds = synth_blobs(10, 60, 32, 6.0, 1.0, 424).unwrap();
    let split = stratified_split(&ds, &SplitSpec::default(), 1000).unwrap();
    let schedule = parse_schedule_ordered("4-2-2-2", 10).unwrap();
    let base_classes = schedule.base_classes().to_vec();
    let spec = BackboneSpec::mlp(&[32], &[32], 16);
    BlobBench { ds, split, schedule, base_classes, spec }
}

fn run_blob_experiment(
    bench: &BlobBench,
    plan: &TaskPlan,
    losses: LossSwitches,
    capacity: usize,
    seed: u64,
) -> ExperimentReport {
    let train = filter_by_classes(&bench.ds, &bench.split.train, &bench.base_classes);
    let val = filter_by_classes(&bench.ds, &bench.split.val, &bench.base_classes);
    let base_cfg = BaseTrainConfig {
        epochs_max: 30,
        batch_size: 32,
        lr_schedule: LrSchedule::CosineAnnealing { lr0: 0.05, total_epochs: 30 },
        early_stop_patience: 10,
        momentum: 0.9,
        seed,
    };
    let (model, _) = train_base(&bench.spec, plan, &bench.ds, &train, &val, &base_cfg).unwrap();
    let base = extract_for_incremental(&model, plan).unwrap();
    let step_cfg = StepConfig {
        losses,
        phase1: Phase1Config { lr: 0.01, epochs: 5 },
        phase2: Phase2Config { lr: 0.001, epochs_max: 15, patience: 5 },
        batch_size: 32,
        balanced_finetune: None,
        head_init_scale: 0.01,
        momentum: 0.9,
        dropout_in_finetune: true,
        seed,
    };
    let ex = ExemplarConfig { capacity, strategy: SelectionStrategy::Random, seed };
    run_experiment(base, &bench.schedule, &bench.ds, &bench.split, &ex, &step_cfg).unwrap()
}

fn assert_phase_discipline(report: &ExperimentReport) {
    for rec in &report.steps {
        assert_eq!(
            rec.report.backbone_checksum_before_phase1, rec.report.backbone_checksum_after_phase1,
            "backbone moved during phase 1 at step {}",
            rec.report.step_index
        );
        assert_eq!(
            rec.report.teacher_checksum_before, rec.report.teacher_checksum_after,
            "teacher changed during step {}",
            rec.report.step_index
        );
    }
}

// ---------------------------------------------------------------------------
// Criterion 7: synthetic end-to-end gap. CE_N+CE_O beats CE_N by >= 15
// points of average incremental accuracy over 3 seeds; the full-loss
// configuration is reported alongside (trend, not gated). < 5 min.
// ---------------------------------------------------------------------------
#[test]
fn accept_07_synthetic_end_to_end_gap() {
    let started = Instant::now();
    let bench = blob_bench();
    let plan = make_explicit_plan(&bench.base_classes, std::slice::from_ref(&bench.base_classes)).unwrap();
    let seeds = [101u64, 202, 303];

    let mut means = Vec::new();
    for losses in [
        LossSwitches { ce_new: true, ce_old: false, kd_new: false, kd_old: false, ..LossSwitches::default() },
        LossSwitches { ce_new: true, ce_old: true, kd_new: false, kd_old: false, ..LossSwitches::default() },
        LossSwitches::default(),
    ] {
        let label = losses.label();
        let mut accs = Vec::new();
        for &seed in &seeds {
            let report = run_blob_experiment(&bench, &plan, losses.clone(), 50, seed);
            assert_phase_discipline(&report);
            accs.push(report.avg_incremental_accuracy.unwrap() * 100.0);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!("  {label}: per-seed {accs:.2?}, mean {mean:.2}");
        means.push((label, mean));
    }
    let ce_n = means[0].1;
    let ce_n_ce_o = means[1].1;
    let full = means[2].1;
    let gap = ce_n_ce_o - ce_n;
    let elapsed = started.elapsed().as_secs_f64();
    let ok = gap >= 15.0 && elapsed < 300.0;
    println!(
        "  full-loss configuration (reported, not gated): {full:.2} vs CE_N+CE_O {ce_n_ce_o:.2}"
    );
    println!(
        "ACCEPT-07 synthetic end-to-end gap ({gap:.1} points, {elapsed:.1}s): {}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(gap >= 15.0, "exemplar gap {gap:.2} points below 15");
    assert!(elapsed < 300.0, "end-to-end benchmark took {elapsed:.1}s");
}

// ---------------------------------------------------------------------------
// Criterion 8: multitask trend report over >= 5 seeds for the single-task
// plan vs the decreasing-size plan. Gate: determinism and execution; the
// direction is reported. (The size-1 tail the shrinking pattern would
// produce on a 4-class base is below the 2-class task minimum, so the
// deepest valid plan [4,3,2] stands in.)
// ---------------------------------------------------------------------------
#[test]
fn accept_08_multitask_trend_report() {
    let bench = blob_bench();
    let seeds = [11u64, 22, 33, 44, 55];
    let single = make_explicit_plan(&bench.base_classes, std::slice::from_ref(&bench.base_classes)).unwrap();

    let mut results = Vec::new();
    for (label, plan_for_seed) in [
        ("[F]", None),
        ("[F,F-1,F-2]", Some(())),
    ] {
        let mut accs = Vec::new();
        for &seed in &seeds {
            let plan = match plan_for_seed {
                None => single.clone(),
                Some(()) => make_decreasing_plan(&bench.base_classes, &[4, 3, 2], seed, false)
                    .unwrap(),
            };
            let report =
                run_blob_experiment(&bench, &plan, LossSwitches::default(), 50, seed);
            assert_phase_discipline(&report);
            accs.push(report.avg_incremental_accuracy.unwrap() * 100.0);
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        println!("  plan {label}: per-seed {accs:.2?}, mean {mean:.2}");
        results.push((label, mean));
    }

    // Determinism gate: repeating the first cell reproduces it exactly.
    let again = run_blob_experiment(&bench, &single, LossSwitches::default(), 50, seeds[0]);
    let first = run_blob_experiment(&bench, &single, LossSwitches::default(), 50, seeds[0]);
    assert_eq!(
        serde_json::to_string(&first.without_timing()).unwrap(),
        serde_json::to_string(&again.without_timing()).unwrap(),
        "trend cells must be deterministic"
    );

    let direction = results[1].1 - results[0].1;
    println!(
        "  multitask-vs-single direction: {direction:+.2} points (reported, not gated)"
    );
    println!("ACCEPT-08 multitask trend report: PASS");
}

// ---------------------------------------------------------------------------
// Criterion 9: early stopping property over 100 cases: phase-2 never runs
// past best_epoch + patience, and the returned model's validation accuracy
// equals the logged maximum exactly.
// ---------------------------------------------------------------------------
#[test]
fn accept_09_early_stopping_property() {
    let ds = synth_blobs(4, 30, 8, 5.0, 0.9, 71).unwrap();
    let split = stratified_split(&ds, &SplitSpec::default(), 3).unwrap();
    let base: Vec<usize> = vec![0, 1];
    let spec = BackboneSpec::mlp(&[8], &[10], 6);
    let plan = make_explicit_plan(&base, std::slice::from_ref(&base)).unwrap();
    let train = filter_by_classes(&ds, &split.train, &base);
    let val = filter_by_classes(&ds, &split.val, &base);
    let base_cfg = BaseTrainConfig {
        epochs_max: 8,
        batch_size: 16,
        lr_schedule: LrSchedule::Constant { lr0: 0.05 },
        early_stop_patience: 8,
        momentum: 0.9,
        seed: 17,
    };
    let (trained, _) = train_base(&spec, &plan, &ds, &train, &val, &base_cfg).unwrap();
    let base_model = extract_for_incremental(&trained, &plan).unwrap();
    let pool = ClassIndex::from_dataset(&ds, &split.train);

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..100u64 {
        let patience = rng.random_range(1..=3usize);
        let epochs_max = rng.random_range(2..=9usize);
        let cfg = StepConfig {
            losses: LossSwitches::default(),
            phase1: Phase1Config { lr: 0.01, epochs: rng.random_range(0..=2usize) },
            phase2: Phase2Config { lr: 0.001, epochs_max, patience },
            batch_size: [8usize, 16, 32][rng.random_range(0..3usize)],
            balanced_finetune: None,
            head_init_scale: 0.01,
            momentum: 0.9,
            dropout_in_finetune: true,
            seed: case,
        };
        let store = ExemplarStore::new(8, SelectionStrategy::Random, case).unwrap();
        let mut state = IncrementalState::from_base(base_model.clone(), store).unwrap();
        let seen = state.seen_classes.clone();
        state.store.rebalance(&seen, &ds, &pool, None).unwrap();
        let val_all = filter_by_classes(&ds, &split.val, &[0, 1, 2, 3]);
        let report = run_step(&mut state, &[2, 3], &ds, &pool, &val_all, &cfg).unwrap();

        let phase2 = &report.phase2;
        assert!(phase2.epochs_run >= 1);
        let best = phase2.best_epoch.expect("phase 2 ran");
        let last = phase2.epochs_run - 1;
        assert!(
            last <= best + patience,
            "case {case}: last epoch {last} ran past best {best} + patience {patience}"
        );
        let logged_max = phase2
            .val_accuracies
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(phase2.val_accuracies[best], logged_max, "case {case}");
        let returned =
            evaluate_accuracy(&state.student, &ds, &val_all, 0, cfg.batch_size).unwrap();
        assert_eq!(
            returned.to_bits(),
            logged_max.to_bits(),
            "case {case}: returned model accuracy {returned} != logged max {logged_max}"
        );
    }
    println!("ACCEPT-09 early stopping property (100 cases): PASS");
}

// ---------------------------------------------------------------------------
// Criterion 10: phase discipline. Backbone checksum is unchanged across
// phase 1 and the teacher checksum across the whole step, on a full
// end-to-end run (also asserted inside criteria 7 and 8).
// ---------------------------------------------------------------------------
#[test]
fn accept_10_phase_discipline() {
    let bench = blob_bench();
    let plan = make_explicit_plan(&bench.base_classes, std::slice::from_ref(&bench.base_classes)).unwrap();
    let report = run_blob_experiment(&bench, &plan, LossSwitches::default(), 50, 777);
    assert_eq!(report.steps.len(), 3);
    assert_phase_discipline(&report);
    println!("ACCEPT-10 phase discipline (3 steps checked): PASS");
}

// ---------------------------------------------------------------------------
// Criterion 11: determinism and I/O. Identical config + seed produce
// byte-identical reports (timing excluded); dataset save -> load round
// trips byte-identically.
// ---------------------------------------------------------------------------
#[test]
fn accept_11_determinism_and_io() {
    let bench = blob_bench();
    let plan = make_explicit_plan(&bench.base_classes, std::slice::from_ref(&bench.base_classes)).unwrap();
    let a = run_blob_experiment(&bench, &plan, LossSwitches::default(), 50, 31415);
    let b = run_blob_experiment(&bench, &plan, LossSwitches::default(), 50, 31415);
    let ja = serde_json::to_string_pretty(&a.without_timing()).unwrap();
    let jb = serde_json::to_string_pretty(&b.without_timing()).unwrap();
    assert_eq!(ja, jb, "reports differ under identical config + seed");

    let dir = tempfile::tempdir().unwrap();
    let d1 = dir.path().join("ds1");
    let d2 = dir.path().join("ds2");
    save_dataset(&bench.ds, &d1).unwrap();
    let loaded = load_dataset(&d1).unwrap();
    save_dataset(&loaded, &d2).unwrap();
    for name in ["manifest.json", "features.bin", "labels.bin"] {
        let x = std::fs::read(d1.join(name)).unwrap();
        let y = std::fs::read(d2.join(name)).unwrap();
        assert_eq!(x, y, "{name} changed across a save/load round trip");
    }
    println!("ACCEPT-11 determinism and I/O: PASS");
}
