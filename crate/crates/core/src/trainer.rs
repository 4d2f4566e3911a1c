//! Base-stage multitask training: one shared backbone, one head per task,
//! all optimized concurrently under a summed cross-entropy loss, with
//! validation-based early stopping on the full-set head.
//!
//! Determinism contract: the model rng (seeded with `cfg.seed`) covers
//! initialization and dropout; a separate data rng (also seeded with
//! `cfg.seed`) covers the per-epoch shuffles. Same seed, same config,
//! same data => bit-identical trained parameters.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::metrics::argmax;
use crate::model::{BackboneSpec, FreezeScope, HeadBatch, ModelState};
use crate::optim::{sgd_step, LrSchedule, OptimizerState};
use crate::tasks::TaskPlan;
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaseTrainConfig {
    pub epochs_max: usize,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    pub early_stop_patience: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        BaseTrainConfig {
            epochs_max: 60,
            batch_size: 32,
            lr_schedule: LrSchedule::CosineAnnealing { lr0: 0.01, total_epochs: 60 },
            early_stop_patience: 10,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl BaseTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_max == 0 || self.batch_size == 0 || self.early_stop_patience == 0 {
            return Err(Error::InvalidConfig(
                "epochs_max, batch_size and early_stop_patience must be positive".into(),
            ));
        }
        self.lr_schedule.validate()?;
        if let LrSchedule::CosineAnnealing { total_epochs, .. } = self.lr_schedule {
            if total_epochs < self.epochs_max {
                return Err(Error::InvalidConfig(format!(
                    "cosine schedule ends at epoch {total_epochs} but training may run {} epochs",
                    self.epochs_max
                )));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean loss per head over the batches where the head had samples.
    pub head_losses: Vec<Option<f64>>,
    pub val_accuracy: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

impl TrainLog {
    pub fn to_csv_string(&self) -> String {
        let heads = self.epochs.first().map_or(0, |e| e.head_losses.len());
        let mut out = String::from("epoch");
        for h in 0..heads {
            out.push_str(&format!(",loss_h{h}"));
        }
        out.push_str(",val_acc,seconds\n");
        for e in &self.epochs {
            out.push_str(&e.epoch.to_string());
            for l in &e.head_losses {
                match l {
                    Some(v) => out.push_str(&format!(",{v:.6}")),
                    None => out.push(','),
                }
            }
            out.push_str(&format!(",{:.6},{:.6}\n", e.val_accuracy, e.seconds));
        }
        out
    }

    /// Mean wall-clock seconds per epoch.
    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.epochs.is_empty() {
            return 0.0;
        }
        self.epochs.iter().map(|e| e.seconds).sum::<f64>() / self.epochs.len() as f64
    }
}

/// Predicted head-local class indices for the given samples, evaluated in
/// batches in eval mode.
pub fn predict_local(
    model: &ModelState<f32>,
    ds: &Dataset,
    indices: &[usize],
    head_id: usize,
    batch_size: usize,
) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let (features, _) = ds.gather(chunk);
        let logits = model.forward_eval(&features, head_id)?;
        for r in 0..logits.rows() {
            preds.push(argmax(logits.row(r)));
        }
    }
    Ok(preds)
}

/// Top-1 accuracy of a head over the given samples; labels are mapped to
/// head-local indices (samples of classes the head does not know are an
/// error).
pub fn evaluate_accuracy(
    model: &ModelState<f32>,
    ds: &Dataset,
    indices: &[usize],
    head_id: usize,
    batch_size: usize,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::InvalidConfig("accuracy over an empty index set".into()));
    }
    let head = model.head(head_id)?;
    let mut correct = 0usize;
    let preds = predict_local(model, ds, indices, head_id, batch_size)?;
    for (&i, &p) in indices.iter().zip(&preds) {
        let local = head.local_index(ds.labels[i]).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "sample of class {} evaluated against a head that does not know it",
                ds.labels[i]
            ))
        })?;
        if p == local {
            correct += 1;
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Train the shared backbone and all task heads concurrently.
///
/// Per epoch, over a single shuffled stream of the base train split: each
/// head picks the batch rows whose label it knows, labels are remapped to
/// head-local indices, the batch loss is the sum of per-head cross
/// entropies over nonempty selections, and one SGD step updates backbone
/// plus heads. Early stopping watches the full-set head's validation
/// accuracy and the best-epoch weights are restored at the end.
pub fn train_base(
    spec: &BackboneSpec,
    plan: &TaskPlan,
    ds: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &BaseTrainConfig,
) -> Result<(ModelState<f32>, TrainLog)> {
    cfg.validate()?;
    plan.validate()?;
    spec.validate()?;
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::InvalidConfig("train and validation splits must be nonempty".into()));
    }
    // Every plan label must actually occur in the train split.
    let mut present = std::collections::BTreeSet::new();
    for &i in train_idx {
        present.insert(ds.labels[i]);
    }
    for task in &plan.tasks {
        for l in &task.class_labels {
            if !present.contains(l) {
                return Err(Error::InvalidConfig(format!(
                    "plan task {} uses class {l} which has no train samples",
                    task.task_id
                )));
            }
        }
    }

    let mut model = ModelState::<f32>::new(spec, &plan.label_sets(), cfg.seed)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = OptimizerState::<f32>::new(cfg.momentum, model.group_count())?;
    let mask = model.set_freeze(FreezeScope::None);

    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, ModelState<f32>)> = None;
    for epoch in 0..cfg.epochs_max {
        let started = Instant::now();
        let lr = cfg.lr_schedule.rate_at(epoch)?;
        let mut order = train_idx.to_vec();
        order.shuffle(&mut data_rng);

        let n_heads = model.heads().len();
        let mut loss_sums = vec![0.0f64; n_heads];
        let mut loss_counts = vec![0usize; n_heads];
        for batch_idx in order.chunks(cfg.batch_size) {
            let (features, labels) = ds.gather(batch_idx);
            let selections = head_selections(&model, &labels)?;
            let (losses, _, grads) =
                model.multi_head_ce_backward(&features, &selections, Mode::Train)?;
            sgd_step(&mut model, &grads, f32::from_f64(lr), &mask, &mut opt)?;
            for (h, l) in losses.iter().enumerate() {
                if let Some(v) = l {
                    loss_sums[h] += v.to_f64();
                    loss_counts[h] += 1;
                }
            }
        }
        for (h, count) in loss_counts.iter().enumerate() {
            if *count == 0 {
                return Err(Error::InvalidConfig(format!(
                    "task {h} matched no sample in an entire epoch; plan and data disagree"
                )));
            }
        }

        let val_accuracy = evaluate_accuracy(&model, ds, val_idx, 0, cfg.batch_size)?;
        log.epochs.push(EpochLog {
            epoch,
            head_losses: loss_sums
                .iter()
                .zip(&loss_counts)
                .map(|(s, c)| if *c > 0 { Some(s / *c as f64) } else { None })
                .collect(),
            val_accuracy,
            seconds: started.elapsed().as_secs_f64(),
        });

        let improved = best.as_ref().is_none_or(|(acc, _, _)| val_accuracy > *acc);
        if improved {
            best = Some((val_accuracy, epoch, model.clone()));
        }
        let best_epoch = best.as_ref().map(|(_, e, _)| *e).unwrap_or(0);
        if epoch - best_epoch >= cfg.early_stop_patience {
            break;
        }
    }
    let (best_acc, best_epoch, best_model) = best.expect("at least one epoch ran");
    log.best_epoch = best_epoch;
    log.best_val_accuracy = best_acc;
    Ok((best_model, log))
}

/// Build per-head row selections for a batch: rows whose label the head
/// knows, with labels remapped to head-local indices.
fn head_selections(model: &ModelState<f32>, labels: &[usize]) -> Result<Vec<HeadBatch>> {
    let mut selections = Vec::with_capacity(model.heads().len());
    for (head_id, head) in model.heads().iter().enumerate() {
        let mut rows = Vec::new();
        let mut local = Vec::new();
        for (row, &label) in labels.iter().enumerate() {
            if let Some(l) = head.local_index(label) {
                rows.push(row);
                local.push(l);
            }
        }
        selections.push(HeadBatch { head_id, rows, local_labels: local });
    }
    Ok(selections)
}

/// Keep the backbone and the full-set head (task 0), dropping every other
/// head. Backbone parameters are bit-identical before and after.
pub fn extract_for_incremental(
    model: &ModelState<f32>,
    plan: &TaskPlan,
) -> Result<ModelState<f32>> {
    if model.heads().len() != plan.tasks.len() {
        return Err(Error::InvalidConfig(format!(
            "model has {} heads but the plan has {} tasks",
            model.heads().len(),
            plan.tasks.len()
        )));
    }
    for (head, task) in model.heads().iter().zip(&plan.tasks) {
        if head.class_labels != task.class_labels {
            return Err(Error::InvalidConfig(format!(
                "head {} labels do not match the plan",
                head.task_id
            )));
        }
    }
    let mut out = model.clone();
    out.retain_single_head(0)?;
    Ok(out)
}
