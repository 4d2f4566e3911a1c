//! SGD with momentum, parameter freezing, and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FreezeMask, Gradients, ModelState};
use crate::tensor::{Scalar, Tensor};

/// Momentum-SGD state: one velocity buffer per parameter group, allocated
/// on first use.
#[derive(Clone, Debug)]
pub struct OptimizerState<S: Scalar> {
    momentum: S,
    velocity: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(momentum: f64, n_groups: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        Ok(OptimizerState { momentum: S::from_f64(momentum), velocity: vec![None; n_groups] })
    }

    pub fn velocity(&self, group: usize) -> Option<&Tensor<S>> {
        self.velocity[group].as_ref()
    }
}

/// One SGD step: v <- momentum * v + g; p <- p - lr * v.
///
/// Frozen and non-trainable groups are left untouched (parameters and
/// velocities both). A missing gradient counts as zero: velocity still
/// decays, so a head that saw no samples in this batch keeps coasting on
/// its momentum rather than pausing.
pub fn sgd_step<S: Scalar>(
    model: &mut ModelState<S>,
    grads: &Gradients<S>,
    lr: S,
    mask: &FreezeMask,
    opt: &mut OptimizerState<S>,
) -> Result<()> {
    if lr <= S::ZERO {
        return Err(Error::InvalidConfig(format!("learning rate must be positive, got {lr}")));
    }
    let n = model.group_count();
    if grads.len() != n || mask.len() != n || opt.velocity.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "optimizer step over {n} groups got {} gradients, {} mask bits, {} velocities",
            grads.len(),
            mask.len(),
            opt.velocity.len()
        )));
    }
    for g in 0..n {
        if !model.group_is_trainable(g) || mask.is_frozen(g) {
            continue;
        }
        let grad = grads.get(g);
        if grad.is_none() && opt.velocity[g].is_none() {
            // Zero velocity and zero gradient: a provable no-op.
            continue;
        }
        let param = model.group_mut(g);
        if let Some(gt) = grad {
            if gt.shape() != param.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient shape {:?} vs parameter shape {:?} in group {g}",
                    gt.shape(),
                    param.shape()
                )));
            }
        }
        let v = opt.velocity[g].get_or_insert_with(|| Tensor::zeros(param.shape()));
        if v.shape() != param.shape() {
            return Err(Error::ShapeMismatch(format!(
                "velocity shape {:?} vs parameter shape {:?} in group {g}",
                v.shape(),
                param.shape()
            )));
        }
        let momentum = opt.momentum;
        match grad {
            Some(gt) => {
                for (vv, gv) in v.data_mut().iter_mut().zip(gt.data()) {
                    *vv = momentum * *vv + *gv;
                }
            }
            None => {
                for vv in v.data_mut() {
                    *vv = momentum * *vv;
                }
            }
        }
        for (p, vv) in param.data_mut().iter_mut().zip(v.data()) {
            *p -= lr * *vv;
        }
    }
    Ok(())
}

/// Half-cosine decay from `lr0` at epoch 0 to zero at `total_epochs`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr0: f64) -> Result<f64> {
    if total_epochs == 0 {
        return Err(Error::InvalidConfig("cosine schedule needs total_epochs >= 1".into()));
    }
    if epoch > total_epochs {
        return Err(Error::InvalidConfig(format!(
            "epoch {epoch} beyond schedule end {total_epochs}"
        )));
    }
    if lr0 <= 0.0 {
        return Err(Error::InvalidConfig(format!("lr0 must be positive, got {lr0}")));
    }
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total_epochs as f64).cos()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant { lr0: f64 },
    CosineAnnealing { lr0: f64, total_epochs: usize },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            LrSchedule::Constant { lr0 } => {
                if *lr0 <= 0.0 {
                    return Err(Error::InvalidConfig(format!("lr0 must be positive, got {lr0}")));
                }
            }
            LrSchedule::CosineAnnealing { lr0, total_epochs } => {
                if *lr0 <= 0.0 || *total_epochs == 0 {
                    return Err(Error::InvalidConfig(
                        "cosine schedule needs positive lr0 and total_epochs".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn rate_at(&self, epoch: usize) -> Result<f64> {
        match self {
            LrSchedule::Constant { lr0 } => Ok(*lr0),
            LrSchedule::CosineAnnealing { lr0, total_epochs } => {
                cosine_lr(epoch, *total_epochs, *lr0)
            }
        }
    }
}
