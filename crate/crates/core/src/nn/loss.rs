use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Cw,
}

/// Which loss to differentiate, plus the CW confidence margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub cw_confidence: f64,
}

impl LossSpec {
    pub fn cross_entropy() -> Self {
        Self {
            kind: LossKind::CrossEntropy,
            cw_confidence: 50.0,
        }
    }

    /// CW loss with confidence κ.
    pub fn cw(kappa: f64) -> Self {
        Self {
            kind: LossKind::Cw,
            cw_confidence: kappa,
        }
    }
}

/// Loss value and its gradient with respect to the logits.
///
/// * cross entropy: `−log softmax(z)[y]`
/// * CW: `−max(z_y − max_{j≠y} z_j, −κ)`. Maximising it pushes the true
///   class below the runner-up; once the runner-up leads by more than κ the
///   loss is flat and the gradient vanishes.
pub fn loss_and_logit_grad(logits: &[f64], label: usize, spec: &LossSpec) -> Result<(f64, Vec<f64>)> {
    let classes = logits.len();
    if label >= classes {
        return Err(Error::InvalidLabel { label, classes });
    }
    match spec.kind {
        LossKind::CrossEntropy => {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let loss = total.ln() + max - logits[label];
            let mut grad: Vec<f64> = exps.iter().map(|e| e / total).collect();
            grad[label] -= 1.0;
            Ok((loss, grad))
        }
        LossKind::Cw => {
            if !(spec.cw_confidence >= 0.0) {
                return Err(Error::Domain(format!(
                    "CW confidence must be >= 0, got {}",
                    spec.cw_confidence
                )));
            }
            if classes < 2 {
                return Err(Error::Domain("CW loss needs at least two classes".into()));
            }
            let runner_up = (0..classes)
                .filter(|&j| j != label)
                .fold(None::<usize>, |best, j| match best {
                    Some(b) if logits[b] >= logits[j] => Some(b),
                    _ => Some(j),
                })
                .unwrap();
            let margin = logits[label] - logits[runner_up];
            let mut grad = vec![0.0; classes];
            if margin < -spec.cw_confidence {
                return Ok((spec.cw_confidence, grad));
            }
            grad[label] = -1.0;
            grad[runner_up] = 1.0;
            Ok((-margin, grad))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cw_examples() {
        let (l, _) = loss_and_logit_grad(&[2.0, 5.0], 0, &LossSpec::cw(50.0)).unwrap();
        assert_eq!(l, 3.0);
        // margin +10 is not clamped: the clamp only binds on the adversary's side
        let (l, g) = loss_and_logit_grad(&[10.0, 0.0], 0, &LossSpec::cw(5.0)).unwrap();
        assert_eq!(l, -10.0);
        assert_eq!(g, vec![-1.0, 1.0]);
        // runner-up leads by 10 > κ = 5: saturated
        let (l, g) = loss_and_logit_grad(&[0.0, 10.0], 0, &LossSpec::cw(5.0)).unwrap();
        assert_eq!(l, 5.0);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn cw_shift_invariant() {
        let z = [0.3, -1.2, 2.5, 0.9];
        let shifted: Vec<f64> = z.iter().map(|v| v + 17.0).collect();
        for y in 0..4 {
            let a = loss_and_logit_grad(&z, y, &LossSpec::cw(1.0)).unwrap();
            let b = loss_and_logit_grad(&shifted, y, &LossSpec::cw(1.0)).unwrap();
            assert!((a.0 - b.0).abs() < 1e-12);
            assert_eq!(a.1, b.1);
        }
    }

    #[test]
    fn cw_runner_up_tie_takes_lowest_index() {
        let (_, g) = loss_and_logit_grad(&[0.0, 3.0, 3.0], 0, &LossSpec::cw(50.0)).unwrap();
        assert_eq!(g, vec![-1.0, 1.0, 0.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let (l, g) = loss_and_logit_grad(&[0.7; 10], 3, &LossSpec::cross_entropy()).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-14);
        assert!((g.iter().sum::<f64>()).abs() < 1e-15);
        assert!((g[3] - (0.1 - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_nonnegative_and_stable() {
        let (l, _) = loss_and_logit_grad(&[1000.0, -1000.0], 0, &LossSpec::cross_entropy()).unwrap();
        assert!(l >= 0.0 && l.is_finite());
        let (l, _) = loss_and_logit_grad(&[-1000.0, 1000.0], 0, &LossSpec::cross_entropy()).unwrap();
        assert!((l - 2000.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_label() {
        assert!(matches!(
            loss_and_logit_grad(&[0.0, 1.0], 2, &LossSpec::cross_entropy()),
            Err(Error::InvalidLabel { label: 2, classes: 2 })
        ));
    }
}
