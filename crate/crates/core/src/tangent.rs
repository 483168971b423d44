//! Tangent models and their composition algebra.
//!
//! A tangent model is the first-order expansion of a frozen base network
//! around its weights `w`: `h(x) = f_w(x) + J_w(x) · delta`. Since `h` is
//! linear in `delta`, weighted sums of tangent models sharing an anchor are
//! themselves tangent models, and a component can be removed again by
//! subtracting its contribution.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::net::BaseModel;
use crate::param::ParamVector;

/// Mixing weights for one autoregressive merge step. The merged delta is
/// `(new * δ_new + running * δ_prev) / (new + running)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CompositionWeights {
    pub new: f64,
    pub running: f64,
}

impl CompositionWeights {
    /// Uniform schedule at merge step `t` (1-based): `1/t` on the new
    /// component, `(t-1)/t` on the running model.
    pub fn uniform(t: u32) -> Self {
        let t = f64::from(t.max(1));
        Self {
            new: 1.0 / t,
            running: (t - 1.0) / t,
        }
    }

    fn normalized(&self) -> Result<(f64, f64)> {
        let sum = self.new + self.running;
        if !(self.new.is_finite() && self.running.is_finite()) || sum == 0.0 || !sum.is_finite() {
            return Err(Error::InvalidWeights(format!(
                "cannot normalize merge weights ({}, {})",
                self.new, self.running
            )));
        }
        Ok((self.new / sum, self.running / sum))
    }
}

/// One entry of the component log: a task's own delta and the coefficient
/// it currently carries inside the composed delta.
#[derive(Clone, Debug)]
pub struct ComponentRecord {
    pub task_id: u32,
    pub coefficient: f64,
    pub delta: Arc<ParamVector>,
}

#[derive(Clone, Debug)]
pub struct TangentModel {
    base: Arc<BaseModel>,
    delta: ParamVector,
    task_count: u32,
    log: Option<Vec<ComponentRecord>>,
}

impl TangentModel {
    /// The anchor itself: zero delta, no tasks folded in.
    pub fn at_anchor(base: Arc<BaseModel>) -> Self {
        let dim = base.spec().param_count();
        Self {
            base,
            delta: ParamVector::zeros(dim),
            task_count: 0,
            log: None,
        }
    }

    /// Anchor model that keeps a component log so later tasks can be unlearned.
    pub fn at_anchor_tracked(base: Arc<BaseModel>) -> Self {
        Self {
            log: Some(Vec::new()),
            ..Self::at_anchor(base)
        }
    }

    /// A single trained component (task count 1, no log).
    pub fn component(base: Arc<BaseModel>, delta: ParamVector) -> Result<Self> {
        Self::from_parts(base, delta, 1, None)
    }

    pub fn from_parts(
        base: Arc<BaseModel>,
        delta: ParamVector,
        task_count: u32,
        log: Option<Vec<ComponentRecord>>,
    ) -> Result<Self> {
        crate::error::check_dim(base.spec().param_count(), delta.dim())?;
        if !delta.is_finite() {
            return Err(Error::NonFinite("tangent delta".into()));
        }
        if let Some(log) = &log {
            for rec in log {
                crate::error::check_dim(delta.dim(), rec.delta.dim())?;
            }
        }
        Ok(Self {
            base,
            delta,
            task_count,
            log,
        })
    }

    /// Attaches a one-entry component log naming this model as `task_id`.
    pub fn tracked(mut self, task_id: u32) -> Self {
        self.log = Some(vec![ComponentRecord {
            task_id,
            coefficient: 1.0,
            delta: Arc::new(self.delta.clone()),
        }]);
        self
    }

    pub fn base(&self) -> &Arc<BaseModel> {
        &self.base
    }

    pub fn delta(&self) -> &ParamVector {
        &self.delta
    }

    pub fn into_delta(self) -> ParamVector {
        self.delta
    }

    pub fn task_count(&self) -> u32 {
        self.task_count
    }

    pub fn component_log(&self) -> Option<&[ComponentRecord]> {
        self.log.as_deref()
    }

    pub fn task_ids(&self) -> Option<Vec<u32>> {
        self.log
            .as_ref()
            .map(|l| l.iter().map(|r| r.task_id).collect())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let (p, t) = self.base.jvp_forward(&self.delta, x)?;
        Ok(p.into_iter().zip(t).map(|(a, b)| a + b).collect())
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let dual = self.base.dual_pass_unchecked(self.delta.as_slice(), x);
        dual.primal_output()
            .iter()
            .zip(dual.tangent_output())
            .map(|(a, b)| a + b)
            .collect()
    }

    fn check_anchor(&self, other: &TangentModel) -> Result<()> {
        if self.base.fingerprint() != other.base.fingerprint() {
            return Err(Error::AnchorMismatch {
                left: self.base.fingerprint().to_hex(),
                right: other.base.fingerprint().to_hex(),
            });
        }
        Ok(())
    }

    /// Folds `component` into this running composition with explicit weights.
    ///
    /// The result keeps a component log only if both inputs keep one.
    pub fn compose_pair(
        &self,
        component: &TangentModel,
        weights: CompositionWeights,
    ) -> Result<TangentModel> {
        self.clone().absorb(component, weights)
    }

    /// Folds `component` in with the uniform schedule, so that after `T`
    /// single-task merges every component carries weight `1/T`.
    pub fn compose_next(&self, component: &TangentModel) -> Result<TangentModel> {
        self.clone().absorb_next(component)
    }

    /// [`TangentModel::compose_pair`] reusing this model's delta buffer.
    pub fn absorb(
        mut self,
        component: &TangentModel,
        weights: CompositionWeights,
    ) -> Result<TangentModel> {
        self.check_anchor(component)?;
        let (a_new, a_run) = weights.normalized()?;
        let log = match (&self.log, &component.log) {
            (Some(prev), Some(new)) => Some(merge_logs(&[(prev, a_run), (new, a_new)])?),
            _ => None,
        };
        let mut delta = std::mem::replace(&mut self.delta, ParamVector::zeros(0)).into_vec();
        for (d, c) in delta.iter_mut().zip(component.delta.as_slice()) {
            *d = a_new * c + a_run * *d;
        }
        Ok(TangentModel {
            base: self.base,
            delta: ParamVector::from_vec(delta),
            task_count: self.task_count + component.task_count,
            log,
        })
    }

    /// [`TangentModel::compose_next`] reusing this model's delta buffer.
    pub fn absorb_next(self, component: &TangentModel) -> Result<TangentModel> {
        let weights = if component.task_count > 1 {
            // a pre-composed component counts for all of its tasks
            CompositionWeights {
                new: f64::from(component.task_count),
                running: f64::from(self.task_count),
            }
        } else {
            CompositionWeights::uniform(self.task_count + component.task_count)
        };
        self.absorb(component, weights)
    }

    /// Subtracts task `task_id` from the composition without touching any data.
    ///
    /// Without `rescale` the recorded coefficient times the task's delta is
    /// removed, leaving the remaining coefficients as they were. With
    /// `rescale` the result is additionally divided by the sum of the
    /// remaining coefficients, so a uniform composition of `T` tasks becomes
    /// the uniform composition of the other `T - 1`.
    pub fn unlearn(&self, task_id: u32, rescale: bool) -> Result<TangentModel> {
        let log = self.log.as_ref().ok_or(Error::LogDisabled)?;
        let idx = log
            .iter()
            .position(|r| r.task_id == task_id)
            .ok_or(Error::UnknownTask(task_id))?;
        let removed = &log[idx];
        let mut delta = ParamVector::axpy(-removed.coefficient, &removed.delta, &self.delta)?;
        let mut remaining: Vec<ComponentRecord> = log
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != idx)
            .map(|(_, r)| r.clone())
            .collect();
        if rescale {
            let mass: f64 = remaining.iter().map(|r| r.coefficient).sum();
            if remaining.is_empty() || mass == 0.0 {
                delta = ParamVector::zeros(delta.dim());
            } else {
                delta = delta.scale(1.0 / mass)?;
                for r in &mut remaining {
                    r.coefficient /= mass;
                }
            }
        }
        Ok(TangentModel {
            base: Arc::clone(&self.base),
            delta,
            task_count: self.task_count.saturating_sub(1),
            log: Some(remaining),
        })
    }

    /// Zeroes every delta entry outside the classification head.
    pub fn restrict_to_head(&self) -> TangentModel {
        let mut out = self.clone();
        out.delta = restrict_to_head(&self.base, &self.delta);
        if let Some(log) = &mut out.log {
            for r in log {
                r.delta = Arc::new(restrict_to_head(&self.base, &r.delta));
            }
        }
        out
    }
}

pub(crate) fn restrict_to_head(base: &BaseModel, delta: &ParamVector) -> ParamVector {
    let head = base.spec().head_range();
    let mut v = delta.as_slice().to_vec();
    v[..head.start].iter_mut().for_each(|x| *x = 0.0);
    ParamVector::from_vec(v)
}

fn merge_logs(parts: &[(&Vec<ComponentRecord>, f64)]) -> Result<Vec<ComponentRecord>> {
    let mut out: Vec<ComponentRecord> = Vec::new();
    for (log, scale) in parts {
        for rec in log.iter() {
            if out.iter().any(|r| r.task_id == rec.task_id) {
                return Err(Error::DuplicateTask(rec.task_id));
            }
            out.push(ComponentRecord {
                task_id: rec.task_id,
                coefficient: rec.coefficient * scale,
                delta: Arc::clone(&rec.delta),
            });
        }
    }
    Ok(out)
}

/// `Σ weights[i] · δ_i` over components sharing one anchor.
///
/// The logits of the result equal `Σ weights[i] · h_i(x) − (Σ weights − 1) · f_w(x)`;
/// for convex weights that is exactly the logit ensemble of the components.
pub fn compose_many(components: &[&TangentModel], weights: &[f64]) -> Result<TangentModel> {
    let first = components.first().ok_or(Error::Empty("component list"))?;
    for c in &components[1..] {
        first.check_anchor(c)?;
    }
    let deltas: Vec<&ParamVector> = components.iter().map(|c| &c.delta).collect();
    let delta = ParamVector::linear_combination(&deltas, weights)?;
    let log = if components.iter().all(|c| c.log.is_some()) {
        let parts: Vec<(&Vec<ComponentRecord>, f64)> = components
            .iter()
            .zip(weights)
            .map(|(c, &w)| (c.log.as_ref().expect("checked"), w))
            .collect();
        Some(merge_logs(&parts)?)
    } else {
        None
    };
    Ok(TangentModel {
        base: Arc::clone(&first.base),
        delta,
        task_count: components.iter().map(|c| c.task_count).sum(),
        log,
    })
}
