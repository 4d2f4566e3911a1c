//! Classification losses: softmax cross entropy and temperature-scaled
//! distillation. Both come in a value-only form and a value-plus-gradient
//! form; gradients are with respect to the (student) logits, mean-reduced
//! over the batch.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax_rows<S: Scalar>(logits: &Tensor<S>) -> Tensor<S> {
    let mut out = logits.clone();
    let w = logits.row_len();
    for r in 0..logits.rows() {
        let row = out.row_mut(r);
        let mut m = row[0];
        for &v in row.iter() {
            m = m.maximum(v);
        }
        let mut sum = S::ZERO;
        for v in row.iter() {
            sum += (*v - m).exp();
        }
        let lse = m + sum.ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
        let _ = w;
    }
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<S: Scalar>(logits: &Tensor<S>) -> Tensor<S> {
    let mut out = log_softmax_rows(logits);
    for v in out.data_mut() {
        *v = v.exp();
    }
    out
}

fn validate_labels<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<()> {
    if logits.rows() == 0 || labels.is_empty() {
        return Err(Error::InvalidConfig("cross entropy over an empty batch".into()));
    }
    if logits.rows() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "cross entropy: {} logit rows vs {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let width = logits.row_len();
    for &l in labels {
        if l >= width {
            return Err(Error::LabelOutOfRange { label: l, width });
        }
    }
    Ok(())
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<S> {
    validate_labels(logits, labels)?;
    let logp = log_softmax_rows(logits);
    let mut total = S::ZERO;
    for (r, &l) in labels.iter().enumerate() {
        total += -logp.row(r)[l];
    }
    Ok(total / S::from_usize(labels.len()))
}

/// Cross entropy plus its gradient wrt the logits: (softmax - onehot) / batch.
pub fn cross_entropy_with_grad<S: Scalar>(
    logits: &Tensor<S>,
    labels: &[usize],
) -> Result<(S, Tensor<S>)> {
    validate_labels(logits, labels)?;
    let logp = log_softmax_rows(logits);
    let batch = S::from_usize(labels.len());
    let mut grad = logp.map(|v| v.exp());
    let mut total = S::ZERO;
    for (r, &l) in labels.iter().enumerate() {
        total += -logp.row(r)[l];
        grad.row_mut(r)[l] -= S::ONE;
    }
    grad.scale(S::ONE / batch);
    Ok((total / batch, grad))
}

fn validate_kd<S: Scalar>(student: &Tensor<S>, teacher: &Tensor<S>, temperature: S) -> Result<()> {
    if temperature <= S::ZERO {
        return Err(Error::InvalidConfig(format!(
            "distillation temperature must be positive, got {temperature}"
        )));
    }
    if student.rows() != teacher.rows() {
        return Err(Error::ShapeMismatch(format!(
            "distillation: {} student rows vs {} teacher rows",
            student.rows(),
            teacher.rows()
        )));
    }
    if student.rows() == 0 {
        return Err(Error::InvalidConfig("distillation over an empty batch".into()));
    }
    if student.row_len() < teacher.row_len() {
        return Err(Error::ShapeMismatch(format!(
            "distillation: student width {} narrower than teacher width {}",
            student.row_len(),
            teacher.row_len()
        )));
    }
    Ok(())
}

/// Temperature-scaled distillation loss:
/// T^2 * KL(softmax(teacher/T) || softmax(student/T)), mean over the batch.
///
/// Only the first `teacher.width` student columns are compared; a student
/// that has grown extra class columns keeps the teacher-known classes in its
/// leading columns, and those are the ones being matched.
pub fn kd_loss<S: Scalar>(student: &Tensor<S>, teacher: &Tensor<S>, temperature: S) -> Result<S> {
    validate_kd(student, teacher, temperature)?;
    Ok(kd_on_columns(student, teacher, temperature).0)
}

/// Distillation loss plus its gradient wrt the compared student columns:
/// (T / batch) * (softmax(student/T) - softmax(teacher/T)), shape
/// [batch, teacher_width].
pub fn kd_loss_with_grad<S: Scalar>(
    student: &Tensor<S>,
    teacher: &Tensor<S>,
    temperature: S,
) -> Result<(S, Tensor<S>)> {
    validate_kd(student, teacher, temperature)?;
    Ok(kd_on_columns(student, teacher, temperature))
}

fn kd_on_columns<S: Scalar>(
    student: &Tensor<S>,
    teacher: &Tensor<S>,
    temperature: S,
) -> (S, Tensor<S>) {
    let batch = student.rows();
    let width = teacher.row_len();
    let inv_t = S::ONE / temperature;

    // Student logits restricted to the teacher-known columns, scaled by 1/T.
    let mut s_cols = Tensor::zeros(&[batch, width]);
    for r in 0..batch {
        let src = &student.row(r)[..width];
        for (d, &v) in s_cols.row_mut(r).iter_mut().zip(src) {
            *d = v * inv_t;
        }
    }
    let t_scaled = teacher.map(|v| v * inv_t);

    let s_logp = log_softmax_rows(&s_cols);
    let t_logp = log_softmax_rows(&t_scaled);

    let batch_s = S::from_usize(batch);
    let mut total = S::ZERO;
    let mut grad = Tensor::zeros(&[batch, width]);
    for r in 0..batch {
        let sl = s_logp.row(r);
        let tl = t_logp.row(r);
        let mut row_kl = S::ZERO;
        for (j, (&slv, &tlv)) in sl.iter().zip(tl.iter()).enumerate() {
            let p_t = tlv.exp();
            row_kl += p_t * (tlv - slv);
            grad.row_mut(r)[j] = (slv.exp() - p_t) * temperature / batch_s;
        }
        total += row_kl;
    }
    // KL is nonnegative; clamp away sub-epsilon rounding noise.
    let loss = (total / batch_s * temperature * temperature).maximum(S::ZERO);
    (loss, grad)
}
