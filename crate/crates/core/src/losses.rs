//! Cross-entropy against soft targets and the clamped mixup loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// How per-sample losses are combined into the scalar objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "sum" => Ok(Self::Sum),
            other => Err(Error::Config(format!(
                "loss reduction must be mean or sum, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Sum => "sum",
        })
    }
}

#[derive(Clone, Debug)]
pub struct LossValue {
    /// Scalar objective, connected to the tape.
    pub total: Var,
    pub per_sample: Vec<f64>,
    pub reduction: Reduction,
}

impl LossValue {
    /// `per_sample` combined by `reduction`, in f64.
    pub fn reduced(&self) -> f64 {
        let sum: f64 = self.per_sample.iter().sum();
        match self.reduction {
            Reduction::Sum => sum,
            Reduction::Mean => sum / self.per_sample.len() as f64,
        }
    }
}

const ROW_SUM_TOL: f64 = 1e-5;

fn validate_targets<T: Scalar>(target: &Tensor<T>) -> Result<()> {
    let k = target.shape()[1];
    for (i, row) in target.data().chunks(k).enumerate() {
        if let Some(v) = row.iter().find(|v| !(v.as_f64() >= 0.0)) {
            return Err(Error::Validation(format!(
                "target row {i} has entry {v:?}; entries must be nonnegative"
            )));
        }
        let s: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Validation(format!("target row {i} sums to {s}, not 1")));
        }
    }
    Ok(())
}

/// `-sum_k target[i,k] * log_probs[i,k]` per row, reduced over the batch.
pub fn cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    target: &Tensor<T>,
    log_probs: Var,
    reduction: Reduction,
) -> Result<LossValue> {
    tape.check(log_probs)?;
    let lp = tape.value(log_probs);
    let &[n, k] = lp.shape() else {
        return Err(Error::Dimension(format!(
            "cross_entropy expects N x K log-probabilities, got {:?}",
            lp.shape()
        )));
    };
    if target.shape() != lp.shape() {
        return Err(Error::Dimension(format!(
            "target shape {:?} does not match log-probabilities {:?}",
            target.shape(),
            lp.shape()
        )));
    }
    validate_targets(target)?;
    let per_sample = target
        .data()
        .chunks(k)
        .zip(lp.data().chunks(k))
        .map(|(t, l)| -t.iter().zip(l).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>())
        .collect();

    let t = tape.constant(target.clone());
    let prod = tape.mul(t, log_probs)?;
    let sum = tape.sum_all(prod);
    let factor = match reduction {
        Reduction::Sum => -1.0,
        Reduction::Mean => -1.0 / n as f64,
    };
    let total = tape.scale(sum, T::of_f64(factor));
    Ok(LossValue {
        total,
        per_sample,
        reduction,
    })
}

/// Cross-entropy of mixed soft targets against the clamped log-softmax of `logits`.
pub fn mixup_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    mixed_targets: &Tensor<T>,
    reduction: Reduction,
) -> Result<LossValue> {
    tape.check(logits)?;
    if tape.value(logits).shape() != mixed_targets.shape() {
        return Err(Error::Dimension(format!(
            "logits {:?} and targets {:?} differ in shape",
            tape.value(logits).shape(),
            mixed_targets.shape()
        )));
    }
    let log_probs = tape.log_softmax_clamped(logits)?;
    cross_entropy(tape, mixed_targets, log_probs, reduction)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::one_hot;

    fn loss_of(logits: Vec<f64>, target: Vec<f64>, k: usize, r: Reduction) -> (f64, Vec<f64>) {
        let n = logits.len() / k;
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[n, k], logits).unwrap());
        let t = Tensor::new(&[n, k], target).unwrap();
        let l = mixup_loss(&mut tape, x, &t, r).unwrap();
        (tape.value(l.total).data()[0], l.per_sample)
    }

    #[test]
    fn closed_forms() {
        let mut target = vec![0.0; 10];
        target[4] = 1.0;
        let (total, _) = loss_of(vec![0.0; 10], target, 10, Reduction::Mean);
        assert!((total - 10f64.ln()).abs() < 1e-12);
        let (total, _) = loss_of(vec![0.0, 0.0], vec![0.5, 0.5], 2, Reduction::Mean);
        assert!((total - 2f64.ln()).abs() < 1e-12);
        let (total, _) = loss_of(vec![50.0, 0.0], vec![1.0, 0.0], 2, Reduction::Mean);
        assert!(total.abs() < 1e-12);
    }

    #[test]
    fn clamp_bound_contribution() {
        let (_, per) = loss_of(vec![0.0, 40.0, 0.0], vec![0.25, 0.75, 0.0], 3, Reduction::Sum);
        // class 0 sits at the clamp floor
        assert!((per[0] - 0.25 * 11.512925).abs() < 1e-4);
    }

    #[test]
    fn reductions_agree_with_per_sample() {
        let logits = vec![0.3, -1.0, 2.0, 0.5, 0.1, -0.2];
        let t = one_hot::<f64>(&[2, 0], 3).unwrap().into_data();
        let (mean, per) = loss_of(logits.clone(), t.clone(), 3, Reduction::Mean);
        let (sum, _) = loss_of(logits, t, 3, Reduction::Sum);
        assert!((sum - per.iter().sum::<f64>()).abs() < 1e-12);
        assert!((mean - sum / 2.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_targets_are_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        let neg = Tensor::new(&[1, 2], vec![1.5, -0.5]).unwrap();
        assert!(matches!(
            mixup_loss(&mut tape, x, &neg, Reduction::Mean),
            Err(Error::Validation(_))
        ));
        let short = Tensor::new(&[1, 2], vec![0.5, 0.4]).unwrap();
        assert!(mixup_loss(&mut tape, x, &short, Reduction::Mean).is_err());
        let wrong = Tensor::new(&[1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            mixup_loss(&mut tape, x, &wrong, Reduction::Mean),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn gradient_is_softmax_minus_target() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            &Tensor::new(&[1, 3], vec![0.2, -0.4, 1.0])
                .unwrap()
                .with_requires_grad(true),
        );
        let t = Tensor::new(&[1, 3], vec![0.3, 0.7, 0.0]).unwrap();
        let l = mixup_loss(&mut tape, x, &t, Reduction::Sum).unwrap();
        let g = tape.backward(l.total).unwrap();
        let p = crate::tensor::softmax_rows(&[0.2, -0.4, 1.0], 3);
        for ((gv, pv), tv) in g.get(x).unwrap().iter().zip(p).zip(t.data()) {
            assert!((gv - (pv - tv)).abs() < 1e-12);
        }
    }
}
