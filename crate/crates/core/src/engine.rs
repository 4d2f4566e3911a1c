//! Incremental steps: teacher snapshotting, head expansion, composable
//! CE/KD losses over new data and exemplars, two-phase freeze/unfreeze
//! fine-tuning with early stopping, and the experiment driver that chains
//! steps over a class schedule.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{filter_by_classes, ClassSchedule, Dataset, SplitIndices};
use crate::error::{Error, Result};
use crate::exemplar::{ClassIndex, ExemplarStore, SelectionStrategy};
use crate::layers::Mode;
use crate::metrics::{argmax, confusion, group_accuracy, ConfusionMatrix};
use crate::model::{FreezeScope, LossTerm, ModelState};
use crate::optim::{sgd_step, OptimizerState};
use crate::tensor::Tensor;
use crate::trainer::evaluate_accuracy;

/// Which loss terms run during a step, with their weights. Naming: "new"
/// terms run over the incoming classes' samples, "old" terms over stored
/// exemplars; KD terms pull the student's old-class columns toward the
/// frozen teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossSwitches {
    pub ce_new: bool,
    pub ce_old: bool,
    pub kd_new: bool,
    pub kd_old: bool,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_weight")]
    pub w_ce_new: f64,
    #[serde(default = "default_weight")]
    pub w_ce_old: f64,
    #[serde(default = "default_weight")]
    pub w_kd_new: f64,
    #[serde(default = "default_weight")]
    pub w_kd_old: f64,
}

fn default_temperature() -> f64 {
    2.0
}

fn default_weight() -> f64 {
    1.0
}

impl Default for LossSwitches {
    fn default() -> Self {
        LossSwitches {
            ce_new: true,
            ce_old: true,
            kd_new: true,
            kd_old: true,
            temperature: 2.0,
            w_ce_new: 1.0,
            w_ce_old: 1.0,
            w_kd_new: 1.0,
            w_kd_old: 1.0,
        }
    }
}

impl LossSwitches {
    pub fn ce_only_new() -> Self {
        LossSwitches { ce_new: true, ce_old: false, kd_new: false, kd_old: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.ce_new {
            return Err(Error::InvalidConfig(
                "ce_new must stay enabled; nothing would learn the new classes".into(),
            ));
        }
        if self.temperature <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "distillation temperature must be positive, got {}",
                self.temperature
            )));
        }
        for (name, w) in [
            ("w_ce_new", self.w_ce_new),
            ("w_ce_old", self.w_ce_old),
            ("w_kd_new", self.w_kd_new),
            ("w_kd_old", self.w_kd_old),
        ] {
            if w < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be nonnegative, got {w}")));
            }
        }
        Ok(())
    }

    pub fn uses_exemplars(&self) -> bool {
        self.ce_old || self.kd_old
    }

    pub fn uses_teacher(&self) -> bool {
        self.kd_new || self.kd_old
    }

    /// Display label, e.g. "CE_N+CE_O+KD_N+KD_O".
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.ce_new {
            parts.push("CE_N");
        }
        if self.ce_old {
            parts.push("CE_O");
        }
        if self.kd_new {
            parts.push("KD_N");
        }
        if self.kd_old {
            parts.push("KD_O");
        }
        parts.join("+")
    }

    fn with(ce_old: bool, kd_new: bool, kd_old: bool) -> Self {
        LossSwitches { ce_new: true, ce_old, kd_new, kd_old, ..Self::default() }
    }
}

/// The six switch combinations of the loss ablation, in reporting order.
pub fn ablation_grid() -> Vec<LossSwitches> {
    vec![
        LossSwitches::with(false, false, false), // CE_N
        LossSwitches::with(false, true, false),  // CE_N+KD_N
        LossSwitches::with(true, false, false),  // CE_N+CE_O
        LossSwitches::with(true, true, false),   // CE_N+CE_O+KD_N
        LossSwitches::with(true, false, true),   // CE_N+CE_O+KD_O
        LossSwitches::with(true, true, true),    // CE_N+CE_O+KD_N+KD_O
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase1Config {
    pub lr: f64,
    pub epochs: usize,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Phase1Config { lr: 0.01, epochs: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase2Config {
    pub lr: f64,
    pub epochs_max: usize,
    pub patience: usize,
}

impl Default for Phase2Config {
    fn default() -> Self {
        Phase2Config { lr: 0.001, epochs_max: 30, patience: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BalancedFinetune {
    pub per_class_m: usize,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StepConfig {
    pub losses: LossSwitches,
    pub phase1: Phase1Config,
    pub phase2: Phase2Config,
    pub batch_size: usize,
    pub balanced_finetune: Option<BalancedFinetune>,
    pub head_init_scale: f64,
    pub momentum: f64,
    /// Dropout stays active during fine-tuning by default.
    pub dropout_in_finetune: bool,
    pub seed: u64,
}

impl Default for StepConfig {
    fn default() -> Self {
        StepConfig {
            losses: LossSwitches::default(),
            phase1: Phase1Config::default(),
            phase2: Phase2Config::default(),
            batch_size: 32,
            balanced_finetune: None,
            head_init_scale: 0.01,
            momentum: 0.9,
            dropout_in_finetune: true,
            seed: 0,
        }
    }
}

impl StepConfig {
    pub fn validate(&self) -> Result<()> {
        self.losses.validate()?;
        if self.phase1.lr <= 0.0 || self.phase2.lr <= 0.0 {
            return Err(Error::InvalidConfig("phase learning rates must be positive".into()));
        }
        if self.phase1.lr <= self.phase2.lr {
            return Err(Error::InvalidConfig(format!(
                "phase 1 lr {} must exceed phase 2 lr {} (large-then-small)",
                self.phase1.lr, self.phase2.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.phase2.epochs_max > 0 && self.phase2.patience == 0 {
            return Err(Error::InvalidConfig("phase 2 patience must be positive".into()));
        }
        if self.head_init_scale < 0.0 {
            return Err(Error::InvalidConfig("head_init_scale must be nonnegative".into()));
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

/// Mutable state carried across incremental steps.
pub struct IncrementalState {
    pub student: ModelState<f32>,
    /// Frozen snapshot of the student from before the current step; None
    /// until the first step runs.
    pub teacher: Option<ModelState<f32>>,
    pub store: ExemplarStore,
    pub seen_classes: Vec<usize>,
    pub step_index: usize,
}

impl IncrementalState {
    /// Start from a base model whose single head covers the base classes.
    pub fn from_base(student: ModelState<f32>, store: ExemplarStore) -> Result<Self> {
        if student.heads().len() != 1 {
            return Err(Error::InvalidConfig(format!(
                "incremental learning expects a single-head model, got {} heads",
                student.heads().len()
            )));
        }
        let seen_classes = student.head(0)?.class_labels.clone();
        Ok(IncrementalState { student, teacher: None, store, seen_classes, step_index: 0 })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhaseLog {
    pub epoch_losses: Vec<f64>,
    pub val_accuracies: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepReport {
    pub step_index: usize,
    pub new_classes: Vec<usize>,
    pub n_seen_after: usize,
    pub phase1: PhaseLog,
    pub phase2: PhaseLog,
    pub balanced_finetune_epochs: usize,
    /// Backbone checksums before/after phase 1; equal by construction.
    pub backbone_checksum_before_phase1: u64,
    pub backbone_checksum_after_phase1: u64,
    /// Teacher checksums at snapshot time and after the step; equal.
    pub teacher_checksum_before: u64,
    pub teacher_checksum_after: u64,
    pub seconds: f64,
}

/// One incremental step: snapshot the teacher, expand the head, fine-tune
/// in two phases (frozen backbone at a large rate, then everything at a
/// small rate with early stopping), optionally run a balanced fine-tune,
/// and fold the new classes into the exemplar store.
pub fn run_step(
    state: &mut IncrementalState,
    new_classes: &[usize],
    ds: &Dataset,
    train_pool: &ClassIndex,
    val_all_seen: &[usize],
    cfg: &StepConfig,
) -> Result<StepReport> {
    let started = Instant::now();
    cfg.validate()?;
    if new_classes.is_empty() {
        return Err(Error::InvalidConfig("a step needs at least one new class".into()));
    }
    let mut new_sorted = new_classes.to_vec();
    new_sorted.sort_unstable();
    new_sorted.dedup();
    if new_sorted.len() != new_classes.len() {
        return Err(Error::InvalidConfig("duplicate new classes".into()));
    }
    for c in &new_sorted {
        if state.seen_classes.contains(c) {
            return Err(Error::InvalidConfig(format!("class {c} was already learned")));
        }
        match train_pool.of(*c) {
            Some(idx) if !idx.is_empty() => {}
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "new class {c} has no training samples"
                )))
            }
        }
    }
    if cfg.losses.uses_exemplars() && state.store.is_empty() {
        return Err(Error::InvalidConfig(
            "old-sample losses enabled but the exemplar store is empty".into(),
        ));
    }

    // 1. Teacher: deep snapshot of the student before any mutation.
    let teacher = state.student.clone();
    let teacher_checksum_before = teacher.checksum_all();
    let old_width = state.student.head(0)?.width();

    // 2. Head expansion.
    state.student.expand_head(0, &new_sorted, cfg.head_init_scale)?;
    state.student.set_dropout_enabled(cfg.dropout_in_finetune);

    // 3. Training corpus: new-class train samples, plus exemplars when an
    //    old-sample loss is enabled.
    let mut corpus: Vec<(usize, bool)> = Vec::new(); // (dataset index, is_exemplar)
    for &c in &new_sorted {
        for &i in train_pool.of(c).unwrap() {
            corpus.push((i, false));
        }
    }
    if cfg.losses.uses_exemplars() {
        for i in state.store.all_indices() {
            corpus.push((i, true));
        }
    }

    let mut engine_rng = ChaCha8Rng::seed_from_u64(
        cfg.seed ^ (state.step_index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );

    // 4. Phase 1: frozen backbone, large rate, fixed epoch budget.
    let backbone_checksum_before_phase1 = state.student.checksum_backbone();
    let mask1 = state.student.set_freeze(FreezeScope::BackboneOnly);
    let mut phase1 = PhaseLog {
        epoch_losses: Vec::new(),
        val_accuracies: Vec::new(),
        best_epoch: None,
        epochs_run: 0,
    };
    if cfg.phase1.epochs > 0 {
        let mut opt = OptimizerState::<f32>::new(cfg.momentum, state.student.group_count())?;
        for _ in 0..cfg.phase1.epochs {
            let loss = run_training_epoch(
                &mut state.student,
                &teacher,
                ds,
                &mut corpus.clone(),
                &mut engine_rng,
                cfg,
                cfg.phase1.lr,
                &mask1,
                &mut opt,
                old_width,
            )?;
            phase1.epoch_losses.push(loss);
            phase1.epochs_run += 1;
        }
    }
    let backbone_checksum_after_phase1 = state.student.checksum_backbone();

    // 5. Phase 2: everything unfrozen, small rate, early stopping on the
    //    validation accuracy over all seen classes.
    let mask2 = state.student.set_freeze(FreezeScope::None);
    let mut phase2 = PhaseLog {
        epoch_losses: Vec::new(),
        val_accuracies: Vec::new(),
        best_epoch: None,
        epochs_run: 0,
    };
    if cfg.phase2.epochs_max > 0 {
        if val_all_seen.is_empty() {
            return Err(Error::InvalidConfig(
                "phase 2 early stopping needs a validation split over all seen classes".into(),
            ));
        }
        let mut opt = OptimizerState::<f32>::new(cfg.momentum, state.student.group_count())?;
        let mut best: Option<(f64, usize, ModelState<f32>)> = None;
        for epoch in 0..cfg.phase2.epochs_max {
            let loss = run_training_epoch(
                &mut state.student,
                &teacher,
                ds,
                &mut corpus.clone(),
                &mut engine_rng,
                cfg,
                cfg.phase2.lr,
                &mask2,
                &mut opt,
                old_width,
            )?;
            let val_acc = evaluate_accuracy(&state.student, ds, val_all_seen, 0, cfg.batch_size)?;
            phase2.epoch_losses.push(loss);
            phase2.val_accuracies.push(val_acc);
            phase2.epochs_run += 1;
            let improved = best.as_ref().is_none_or(|(acc, _, _)| val_acc > *acc);
            if improved {
                best = Some((val_acc, epoch, state.student.clone()));
            }
            let best_epoch = best.as_ref().map(|(_, e, _)| *e).unwrap();
            if epoch - best_epoch >= cfg.phase2.patience {
                break;
            }
        }
        let (_, best_epoch, best_model) = best.expect("phase 2 ran at least one epoch");
        phase2.best_epoch = Some(best_epoch);
        state.student = best_model;
    }

    // 6. Optional balanced fine-tune over a small per-class-equal set.
    let mut balanced_epochs = 0;
    if let Some(bft) = &cfg.balanced_finetune {
        if bft.per_class_m > 0 && bft.epochs > 0 {
            let mut new_pool = ClassIndex::default();
            // Restrict the pool to this step's classes.
            let mut rows = Vec::new();
            for &c in &new_sorted {
                rows.extend_from_slice(train_pool.of(c).unwrap());
            }
            if !rows.is_empty() {
                new_pool = ClassIndex::from_dataset(ds, &rows);
            }
            let balanced_seed = cfg.seed ^ (state.step_index as u64 + 1).rotate_left(17);
            let mut bal_corpus =
                state.store.build_balanced_set(&new_pool, bft.per_class_m, balanced_seed)?;
            // Balanced fine-tune treats every sample uniformly: CE over all
            // rows, KD over all rows when any KD switch is on.
            let mut opt = OptimizerState::<f32>::new(cfg.momentum, state.student.group_count())?;
            for _ in 0..bft.epochs {
                bal_corpus.shuffle(&mut engine_rng);
                for idx in bal_corpus.chunks(cfg.batch_size) {
                    let (features, labels) = ds.gather(idx);
                    let head = state.student.head(0)?;
                    let locals = map_locals(head, &labels)?;
                    let mut terms: Vec<LossTerm<f32>> = vec![LossTerm::CrossEntropy {
                        rows: None,
                        labels: locals,
                        weight: 1.0,
                    }];
                    if cfg.losses.uses_teacher() {
                        let t_logits = teacher.forward_eval(&features, 0)?;
                        terms.push(LossTerm::Distillation {
                            rows: None,
                            teacher: t_logits,
                            temperature: cfg.losses.temperature as f32,
                            weight: 1.0,
                        });
                    }
                    let (_, grads) = state.student.backward(&features, 0, &terms, Mode::Train)?;
                    sgd_step(&mut state.student, &grads, cfg.phase2.lr as f32, &mask2, &mut opt)?;
                }
                balanced_epochs += 1;
            }
        }
    }

    // 7. Fold the new classes into the exemplar store.
    let mut seen_after = state.seen_classes.clone();
    seen_after.extend_from_slice(&new_sorted);
    if cfg.losses.uses_exemplars() {
        state.store.rebalance(&seen_after, ds, train_pool, Some(&state.student))?;
    }

    let teacher_checksum_after = teacher.checksum_all();
    state.seen_classes = seen_after;
    state.step_index += 1;
    state.teacher = Some(teacher);

    Ok(StepReport {
        step_index: state.step_index,
        new_classes: new_sorted.clone(),
        n_seen_after: state.seen_classes.len(),
        phase1,
        phase2,
        balanced_finetune_epochs: balanced_epochs,
        backbone_checksum_before_phase1,
        backbone_checksum_after_phase1,
        teacher_checksum_before,
        teacher_checksum_after,
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn map_locals(head: &crate::model::Head<f32>, labels: &[usize]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&l| {
            head.local_index(l).ok_or_else(|| {
                Error::InvalidConfig(format!("label {l} unknown to the student head"))
            })
        })
        .collect()
}

/// One epoch over the step corpus: shuffle, batch, assemble the enabled
/// loss terms, backprop, step. Returns the mean batch loss.
#[allow(clippy::too_many_arguments)]
fn run_training_epoch(
    student: &mut ModelState<f32>,
    teacher: &ModelState<f32>,
    ds: &Dataset,
    corpus: &mut [(usize, bool)],
    rng: &mut ChaCha8Rng,
    cfg: &StepConfig,
    lr: f64,
    mask: &crate::model::FreezeMask,
    opt: &mut OptimizerState<f32>,
    old_width: usize,
) -> Result<f64> {
    corpus.shuffle(rng);
    let mut loss_sum = 0.0f64;
    let mut batches = 0usize;
    for chunk in corpus.chunks(cfg.batch_size) {
        let idx: Vec<usize> = chunk.iter().map(|(i, _)| *i).collect();
        let (features, labels) = ds.gather(&idx);
        let head = student.head(0)?;
        let new_rows: Vec<usize> =
            (0..chunk.len()).filter(|&r| !chunk[r].1).collect();
        let old_rows: Vec<usize> = (0..chunk.len()).filter(|&r| chunk[r].1).collect();

        let mut terms: Vec<LossTerm<f32>> = Vec::new();
        if cfg.losses.ce_new && !new_rows.is_empty() {
            let locals = map_locals(
                head,
                &new_rows.iter().map(|&r| labels[r]).collect::<Vec<_>>(),
            )?;
            terms.push(LossTerm::CrossEntropy {
                rows: Some(new_rows.clone()),
                labels: locals,
                weight: cfg.losses.w_ce_new as f32,
            });
        }
        if cfg.losses.ce_old && !old_rows.is_empty() {
            let locals = map_locals(
                head,
                &old_rows.iter().map(|&r| labels[r]).collect::<Vec<_>>(),
            )?;
            terms.push(LossTerm::CrossEntropy {
                rows: Some(old_rows.clone()),
                labels: locals,
                weight: cfg.losses.w_ce_old as f32,
            });
        }
        if cfg.losses.kd_new && !new_rows.is_empty() {
            terms.push(distill_term(
                teacher,
                &features,
                &new_rows,
                cfg.losses.temperature,
                cfg.losses.w_kd_new,
                old_width,
            )?);
        }
        if cfg.losses.kd_old && !old_rows.is_empty() {
            terms.push(distill_term(
                teacher,
                &features,
                &old_rows,
                cfg.losses.temperature,
                cfg.losses.w_kd_old,
                old_width,
            )?);
        }
        let (loss, grads) = student.backward(&features, 0, &terms, Mode::Train)?;
        sgd_step(student, &grads, lr as f32, mask, opt)?;
        loss_sum += loss as f64;
        batches += 1;
    }
    Ok(if batches > 0 { loss_sum / batches as f64 } else { 0.0 })
}

/// KD term: teacher eval logits over the selected rows. The teacher's head
/// width is the old-class column count, so the student is compared only on
/// those leading columns.
fn distill_term(
    teacher: &ModelState<f32>,
    features: &Tensor<f32>,
    rows: &[usize],
    temperature: f64,
    weight: f64,
    old_width: usize,
) -> Result<LossTerm<f32>> {
    let sub = features.gather_rows(rows);
    let t_logits = teacher.forward_eval(&sub, 0)?;
    debug_assert_eq!(
        t_logits.row_len(),
        old_width,
        "teacher must expose exactly the old-class columns"
    );
    Ok(LossTerm::Distillation {
        rows: Some(rows.to_vec()),
        teacher: t_logits,
        temperature: temperature as f32,
        weight: weight as f32,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepEval {
    pub n_classes: usize,
    pub accuracy: f64,
    pub acc_old: Option<f64>,
    pub acc_new: Option<f64>,
    pub confusion: ConfusionMatrix,
    /// Head-local column order: global class labels by column.
    pub class_label_order: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IncrementalStepRecord {
    pub report: StepReport,
    pub eval: StepEval,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentTiming {
    pub total_seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    /// Fully resolved configuration echo, filled by the caller.
    pub config_echo: serde_json::Value,
    pub seed: u64,
    pub schedule: Vec<Vec<usize>>,
    pub base: StepEval,
    pub steps: Vec<IncrementalStepRecord>,
    pub avg_incremental_accuracy: Option<f64>,
    pub exemplar_store: ExemplarStore,
    /// Wall-clock info; excluded from determinism comparisons.
    pub timing: Option<ExperimentTiming>,
}

impl ExperimentReport {
    /// Per-step accuracy table as CSV: step, n_classes, acc, acc_old, acc_new.
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,n_classes,acc,acc_old,acc_new\n");
        out.push_str(&format!("0,{},{:.6},,\n", self.base.n_classes, self.base.accuracy));
        for rec in &self.steps {
            out.push_str(&format!(
                "{},{},{:.6},{},{}\n",
                rec.report.step_index,
                rec.eval.n_classes,
                rec.eval.accuracy,
                rec.eval
                    .acc_old
                    .map(|v| format!("{v:.6}"))
                    .unwrap_or_default(),
                rec.eval
                    .acc_new
                    .map(|v| format!("{v:.6}"))
                    .unwrap_or_default(),
            ));
        }
        out
    }

    /// The report without wall-clock fields, for byte-level determinism
    /// comparisons.
    pub fn without_timing(&self) -> ExperimentReport {
        let mut copy = self.clone();
        copy.timing = None;
        for rec in &mut copy.steps {
            rec.report.seconds = 0.0;
        }
        copy
    }

    pub fn step_accuracies(&self) -> Vec<f64> {
        let mut accs = vec![self.base.accuracy];
        accs.extend(self.steps.iter().map(|r| r.eval.accuracy));
        accs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExemplarConfig {
    pub capacity: usize,
    pub strategy: SelectionStrategy,
    pub seed: u64,
}

impl Default for ExemplarConfig {
    fn default() -> Self {
        ExemplarConfig { capacity: 100, strategy: SelectionStrategy::Random, seed: 0 }
    }
}

/// Drive a full experiment: evaluate the base model, then run one
/// incremental step per schedule entry, evaluating on the union test set of
/// all seen classes after each step.
pub fn run_experiment(
    base_model: ModelState<f32>,
    schedule: &ClassSchedule,
    ds: &Dataset,
    split: &SplitIndices,
    ex_cfg: &ExemplarConfig,
    step_cfg: &StepConfig,
) -> Result<ExperimentReport> {
    let started = Instant::now();
    schedule.validate(ds.num_classes())?;
    step_cfg.validate()?;
    let base_head = base_model.head(0)?;
    let mut base_sorted = schedule.base_classes().to_vec();
    base_sorted.sort_unstable();
    let mut head_sorted = base_head.class_labels.clone();
    head_sorted.sort_unstable();
    if base_sorted != head_sorted {
        return Err(Error::InvalidConfig(format!(
            "snapshot head covers classes {head_sorted:?} but the schedule starts with {base_sorted:?}"
        )));
    }

    let store = ExemplarStore::new(ex_cfg.capacity, ex_cfg.strategy, ex_cfg.seed)?;
    let mut state = IncrementalState::from_base(base_model, store)?;
    let train_pool = ClassIndex::from_dataset(ds, &split.train);

    // Base-class exemplars are folded in up front when old-sample losses
    // will need them.
    if step_cfg.losses.uses_exemplars() {
        let seen = state.seen_classes.clone();
        state.store.rebalance(&seen, ds, &train_pool, Some(&state.student))?;
    }

    let base_eval = evaluate_step(&state.student, ds, &split.test, &state.seen_classes, None)?;

    let mut steps = Vec::new();
    for step_classes in &schedule.class_assignment[1..] {
        let old_classes = state.seen_classes.clone();
        let val_all = filter_by_classes(
            ds,
            &split.val,
            &[old_classes.as_slice(), step_classes.as_slice()].concat(),
        );
        let report = run_step(&mut state, step_classes, ds, &train_pool, &val_all, step_cfg)?;
        let eval = evaluate_step(
            &state.student,
            ds,
            &split.test,
            &state.seen_classes,
            Some(old_classes.len()),
        )?;
        steps.push(IncrementalStepRecord { report, eval });
    }

    let avg = if steps.is_empty() {
        None
    } else {
        let mut accs = vec![base_eval.accuracy];
        accs.extend(steps.iter().map(|r| r.eval.accuracy));
        Some(crate::metrics::avg_incremental_accuracy(&accs, false)?)
    };
    Ok(ExperimentReport {
        config_echo: serde_json::Value::Null,
        seed: step_cfg.seed,
        schedule: schedule.class_assignment.clone(),
        base: base_eval,
        steps,
        avg_incremental_accuracy: avg,
        exemplar_store: state.store.clone(),
        timing: Some(ExperimentTiming { total_seconds: started.elapsed().as_secs_f64() }),
    })
}

/// Evaluate a single-head model on the test samples of its seen classes:
/// overall accuracy, confusion matrix over head-local indices, and old/new
/// group accuracies (old = the first `old_count` head columns).
fn evaluate_step(
    model: &ModelState<f32>,
    ds: &Dataset,
    test_idx: &[usize],
    seen_classes: &[usize],
    old_count: Option<usize>,
) -> Result<StepEval> {
    let head = model.head(0)?;
    let test = filter_by_classes(ds, test_idx, seen_classes);
    if test.is_empty() {
        return Err(Error::InvalidConfig("no test samples for the seen classes".into()));
    }
    let width = head.width();
    let mut preds = Vec::with_capacity(test.len());
    let mut truths = Vec::with_capacity(test.len());
    for chunk in test.chunks(256) {
        let (features, labels) = ds.gather(chunk);
        let logits = model.forward_eval(&features, 0)?;
        for r in 0..logits.rows() {
            preds.push(argmax(logits.row(r)));
            truths.push(head.local_index(labels[r]).ok_or_else(|| {
                Error::InvalidConfig(format!("test sample of unknown class {}", labels[r]))
            })?);
        }
    }
    let cm = confusion(&preds, &truths, width)?;
    let accuracy = cm.overall_accuracy()?;
    let (acc_old, acc_new) = match old_count {
        None => (None, None),
        Some(k) => {
            let old_group: Vec<usize> = (0..k).collect();
            let new_group: Vec<usize> = (k..width).collect();
            (
                Some(group_accuracy(&cm, &old_group)?),
                Some(group_accuracy(&cm, &new_group)?),
            )
        }
    };
    Ok(StepEval {
        n_classes: width,
        accuracy,
        acc_old,
        acc_new,
        confusion: cm,
        class_label_order: head.class_labels.clone(),
    })
}
