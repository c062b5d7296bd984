//! Differentiable training objectives, each recorded on a [`Tape`].
//!
//! Probabilities go through `ln(max(p, 1e-8))` everywhere except the source
//! label-smoothing loss, which works on logits through a log-softmax.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{clamped_ln, Tensor};

/// Smoothed one-hot labels `(1 - alpha) 1_y + alpha / K`.
pub fn smoothed_labels(labels: &[usize], num_classes: usize, alpha: f64) -> Result<Tensor> {
    if labels.is_empty() {
        return Err(Error::contract("empty label batch"));
    }
    let mut t = Tensor::full(&[labels.len(), num_classes], alpha / num_classes as f64);
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::contract("label out of range"));
        }
        t.row_mut(i)[y] += 1.0 - alpha;
    }
    Ok(t)
}

/// Label-smoothing cross-entropy on logits, averaged over the batch.
pub fn label_smoothing_loss(tape: &mut Tape, logits: Var, labels: &[usize], alpha: f64) -> Result<Var> {
    let (n, k) = {
        let z = tape.value(logits);
        (z.rows(), z.cols())
    };
    if labels.len() != n {
        return Err(Error::dim("label_smoothing_loss", &[n], &[labels.len()]));
    }
    let q = smoothed_labels(labels, k, alpha)?;
    let lp = tape.log_softmax(logits);
    let weighted = tape.mul_const(lp, &q)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -1.0 / n as f64))
}

/// Mean soft-target cross-entropy `-(1/n) sum_i sum_k t_ik ln p_ik`.
pub fn soft_cross_entropy(tape: &mut Tape, targets: &Tensor, probs: Var) -> Result<Var> {
    let n = tape.value(probs).rows();
    let lp = tape.clamp_ln(probs);
    let weighted = tape.mul_const(lp, targets)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -1.0 / n as f64))
}

/// Mean `KL(teacher_i || student_i)`; the teacher rows are constants.
pub fn distill_loss(tape: &mut Tape, teacher: &Tensor, probs: Var) -> Result<Var> {
    let n = teacher.rows();
    if tape.value(probs).shape() != teacher.shape() {
        return Err(Error::dim("distill_loss", teacher.shape(), tape.value(probs).shape()));
    }
    // sum_k t ln t, with 0 ln 0 = 0
    let neg_entropy: f64 = teacher
        .data()
        .iter()
        .map(|&t| if t > 0.0 { t * clamped_ln(t) } else { 0.0 })
        .sum();
    let ce = soft_cross_entropy(tape, teacher, probs)?;
    let offset = tape.leaf(Tensor::scalar(neg_entropy / n as f64));
    tape.add(ce, offset)
}

/// Per-sample entropies averaged, as a scalar node.
fn mean_entropy(tape: &mut Tape, probs: Var) -> Result<Var> {
    let n = tape.value(probs).rows();
    let lp = tape.clamp_ln(probs);
    let plp = tape.mul(probs, lp)?;
    let total = tape.sum(plp);
    Ok(tape.scale(total, -1.0 / n as f64))
}

/// Mutual-information objective `h(mean_i p_i) - mean_i h(p_i)`; to be maximised.
pub fn mi_loss(tape: &mut Tape, probs: Var) -> Result<Var> {
    if tape.value(probs).shape().len() != 2 {
        return Err(Error::contract("mi_loss expects an n x K matrix"));
    }
    let marginal = tape.mean_rows(probs);
    let marginal_entropy = mean_entropy(tape, marginal)?;
    let conditional = mean_entropy(tape, probs)?;
    tape.sub(marginal_entropy, conditional)
}

/// One interpolation draw for a batch: a single `lambda` and a pairing permutation.
#[derive(Debug, Clone, PartialEq)]
pub struct MixPlan {
    pub lambda: f64,
    /// Sample `i` is mixed with sample `perm[i]`.
    pub perm: Vec<usize>,
}

impl MixPlan {
    pub fn identity(n: usize, lambda: f64) -> Self {
        MixPlan {
            lambda,
            perm: (0..n).collect(),
        }
    }

    /// `lambda * a_i + (1 - lambda) * a_perm[i]` row-wise.
    pub fn mix(&self, a: &Tensor) -> Result<Tensor> {
        if a.rows() != self.perm.len() {
            return Err(Error::dim("mix", &[self.perm.len()], a.shape()));
        }
        let mut out = a.clone();
        let lam = self.lambda;
        for (i, &j) in self.perm.iter().enumerate() {
            let other = a.row(j);
            for (o, &b) in out.row_mut(i).iter_mut().zip(other) {
                *o = lam * *o + (1.0 - lam) * b;
            }
        }
        Ok(out)
    }
}
