//! Per-sample losses on logits and their analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    CrossEntropy,
    Mse,
    /// Rescaled square loss: target logit pulled toward `beta` with weight
    /// `alpha`, all other logits toward zero.
    Rsl {
        alpha: f64,
        beta: f64,
    },
}

impl LossSpec {
    pub fn rsl(alpha: f64, beta: f64) -> Result<Self> {
        let spec = LossSpec::Rsl { alpha, beta };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if let LossSpec::Rsl { alpha, beta } = *self {
            if !(alpha.is_finite() && alpha > 0.0) {
                return Err(Error::config(
                    "loss.alpha",
                    format!("must be positive, got {alpha}"),
                ));
            }
            if !(beta.is_finite() && beta > 0.0) {
                return Err(Error::config(
                    "loss.beta",
                    format!("must be positive, got {beta}"),
                ));
            }
        }
        Ok(())
    }

    pub fn value(&self, logits: &[f64], y: usize) -> Result<f64> {
        check_label(logits, y)?;
        Ok(self.value_unchecked(logits, y))
    }

    pub fn grad(&self, logits: &[f64], y: usize) -> Result<Vec<f64>> {
        check_label(logits, y)?;
        let mut g = vec![0.0; logits.len()];
        self.grad_into(logits, y, &mut g);
        Ok(g)
    }

    pub(crate) fn value_unchecked(&self, logits: &[f64], y: usize) -> f64 {
        let k = logits.len() as f64;
        match *self {
            LossSpec::CrossEntropy => log_sum_exp(logits) - logits[y],
            LossSpec::Mse => {
                let mut s = 0.0;
                for (i, &f) in logits.iter().enumerate() {
                    let target = if i == y { 1.0 } else { 0.0 };
                    s += (f - target) * (f - target);
                }
                s / k
            }
            LossSpec::Rsl { alpha, beta } => {
                let mut s = 0.0;
                for (i, &f) in logits.iter().enumerate() {
                    s += if i == y {
                        alpha * ((f - beta) * (f - beta))
                    } else {
                        f * f
                    };
                }
                s / k
            }
        }
    }

    pub(crate) fn grad_into(&self, logits: &[f64], y: usize, out: &mut [f64]) {
        let k = logits.len() as f64;
        match *self {
            LossSpec::CrossEntropy => {
                let p = softmax(logits);
                for (i, (o, pi)) in out.iter_mut().zip(p).enumerate() {
                    *o = if i == y { pi - 1.0 } else { pi };
                }
            }
            LossSpec::Mse => {
                for (i, (o, &f)) in out.iter_mut().zip(logits).enumerate() {
                    let target = if i == y { 1.0 } else { 0.0 };
                    *o = 2.0 * (f - target) / k;
                }
            }
            LossSpec::Rsl { alpha, beta } => {
                for (i, (o, &f)) in out.iter_mut().zip(logits).enumerate() {
                    *o = if i == y {
                        2.0 * alpha * (f - beta) / k
                    } else {
                        2.0 * f / k
                    };
                }
            }
        }
    }
}

fn check_label(logits: &[f64], y: usize) -> Result<()> {
    if y >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label: y,
            classes: logits.len(),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(())
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
