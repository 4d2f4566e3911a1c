//! Benchmarks for the hot paths: forward/backward passes, herding
//! selection, one multitask training epoch, and one incremental step.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use cil_bench::{batch, blob_dataset, conv_model, mlp_model};
use cil_core::data::filter_by_classes;
use cil_core::engine::{
    run_step, IncrementalState, LossSwitches, Phase1Config, Phase2Config, StepConfig,
};
use cil_core::exemplar::{herding_order, ClassIndex, ExemplarStore, SelectionStrategy};
use cil_core::model::{FreezeScope, HeadBatch, LossTerm};
use cil_core::optim::{sgd_step, OptimizerState};
use cil_core::Mode;

fn bench_forward(c: &mut Criterion) {
    let model = mlp_model(10);
    let x = batch(64, &[32], 1);
    c.bench_function("mlp_forward_eval_64x32", |b| {
        b.iter(|| model.forward_eval(black_box(&x), 0).unwrap())
    });

    let conv = conv_model(10);
    let xc = batch(16, &[8, 8], 2);
    c.bench_function("conv_forward_eval_16x8x8", |b| {
        b.iter(|| conv.forward_eval(black_box(&xc), 0).unwrap())
    });
}

fn bench_backward(c: &mut Criterion) {
    let mut model = mlp_model(10);
    let x = batch(64, &[32], 3);
    let labels: Vec<usize> = (0..64).map(|i| i % 10).collect();
    let terms = vec![LossTerm::CrossEntropy { rows: None, labels, weight: 1.0 }];
    c.bench_function("mlp_backward_ce_64x32", |b| {
        b.iter(|| model.backward(black_box(&x), 0, &terms, Mode::Train).unwrap())
    });

    let mut conv = conv_model(10);
    let xc = batch(16, &[8, 8], 4);
    let labels: Vec<usize> = (0..16).map(|i| i % 10).collect();
    let terms = vec![LossTerm::CrossEntropy { rows: None, labels, weight: 1.0 }];
    c.bench_function("conv_backward_ce_16x8x8", |b| {
        b.iter(|| conv.backward(black_box(&xc), 0, &terms, Mode::Train).unwrap())
    });
}

fn bench_train_epoch(c: &mut Criterion) {
    let (ds, split) = blob_dataset();
    let mut model = mlp_model(10);
    let mask = model.set_freeze(FreezeScope::None);
    let mut opt = OptimizerState::<f32>::new(0.9, model.group_count()).unwrap();
    c.bench_function("multitask_epoch_420_samples", |b| {
        b.iter(|| {
            for chunk in split.train.chunks(32) {
                let (features, labels) = ds.gather(chunk);
                let head = model.head(0).unwrap();
                let mut rows = Vec::new();
                let mut locals = Vec::new();
                for (r, &l) in labels.iter().enumerate() {
                    if let Some(local) = head.local_index(l) {
                        rows.push(r);
                        locals.push(local);
                    }
                }
                let sel = HeadBatch { head_id: 0, rows, local_labels: locals };
                let (_, _, grads) =
                    model.multi_head_ce_backward(&features, &[sel], Mode::Train).unwrap();
                sgd_step(&mut model, &grads, 0.01, &mask, &mut opt).unwrap();
            }
        })
    });
}

fn bench_herding(c: &mut Criterion) {
    let emb = batch(200, &[16], 5);
    c.bench_function("herding_order_200x16_pick_50", |b| {
        b.iter(|| herding_order(black_box(&emb), 50))
    });
}

fn bench_incremental_step(c: &mut Criterion) {
    let (ds, split) = blob_dataset();
    let pool = ClassIndex::from_dataset(&ds, &split.train);
    let base = {
        let spec = cil_core::model::BackboneSpec::mlp(&[32], &[32], 16);
        cil_core::model::ModelState::<f32>::new(&spec, &[vec![0, 1, 2, 3]], 7).unwrap()
    };
    let cfg = StepConfig {
        losses: LossSwitches::default(),
        phase1: Phase1Config { lr: 0.01, epochs: 2 },
        phase2: Phase2Config { lr: 0.001, epochs_max: 3, patience: 3 },
        batch_size: 32,
        balanced_finetune: None,
        head_init_scale: 0.01,
        momentum: 0.9,
        dropout_in_finetune: true,
        seed: 5,
    };
    let val = filter_by_classes(&ds, &split.val, &[0, 1, 2, 3, 4, 5]);
    c.bench_function("incremental_step_4_plus_2_classes", |b| {
        b.iter(|| {
            let store = ExemplarStore::new(50, SelectionStrategy::Random, 3).unwrap();
            let mut state = IncrementalState::from_base(base.clone(), store).unwrap();
            let seen = state.seen_classes.clone();
            state.store.rebalance(&seen, &ds, &pool, None).unwrap();
            run_step(&mut state, &[4, 5], &ds, &pool, &val, &cfg).unwrap()
        })
    });
}

criterion_group!(
    benches,
    bench_forward,
    bench_backward,
    bench_train_epoch,
    bench_herding,
    bench_incremental_step
);
criterion_main!(benches);
