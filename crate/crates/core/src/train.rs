//! Optimizers and the two training loops: convex fine-tuning of a tangent
//! delta at a frozen anchor, and ordinary fine-tuning of all weights.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::loss::LossSpec;
use crate::net::{BaseModel, NetworkSpec};
use crate::param::ParamVector;
use crate::tangent::TangentModel;

/// Loss magnitude treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// `(epoch, factor)`: from `epoch` (0-based) on, the rate is multiplied by `factor`.
    #[serde(default)]
    pub schedule: Vec<(usize, f64)>,
}

impl OptimizerSpec {
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam {
                beta1: default_beta1(),
                beta2: default_beta2(),
                epsilon: default_epsilon(),
            },
            learning_rate,
            schedule: vec![(25, 0.1), (40, 0.1)],
        }
    }

    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd { momentum },
            learning_rate,
            schedule: vec![(25, 0.1), (40, 0.1)],
        }
    }

    pub fn with_schedule(mut self, schedule: Vec<(usize, f64)>) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.schedule
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .fold(self.learning_rate, |lr, (_, f)| lr * f)
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config(
                format!("{field}.learning_rate"),
                "must be finite and nonnegative",
            ));
        }
        for pair in self.schedule.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::config(
                    format!("{field}.schedule"),
                    "epochs must be strictly increasing",
                ));
            }
        }
        if self
            .schedule
            .iter()
            .any(|(_, f)| !(f.is_finite() && *f > 0.0))
        {
            return Err(Error::config(
                format!("{field}.schedule"),
                "factors must be positive",
            ));
        }
        match self.kind {
            OptimizerKind::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => Err(
                Error::config(format!("{field}.momentum"), "must lie in [0, 1)"),
            ),
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && epsilon > 0.0) => {
                Err(Error::config(
                    format!("{field}.adam"),
                    "betas must lie in [0, 1) and epsilon be positive",
                ))
            }
            _ => Ok(()),
        }
    }
}

/// Optimizer state for one parameter vector.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    steps: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, dim: usize) -> Self {
        let second = match kind {
            OptimizerKind::Adam { .. } => vec![0.0; dim],
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Self {
            kind,
            steps: 0,
            first: vec![0.0; dim],
            second,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        check_dim(self.first.len(), params.len())?;
        check_dim(self.first.len(), grad.len())?;
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd { momentum } => {
                if momentum == 0.0 {
                    for (p, g) in params.iter_mut().zip(grad) {
                        *p -= lr * g;
                    }
                } else {
                    for ((p, g), b) in params.iter_mut().zip(grad).zip(&mut self.first) {
                        *b = momentum * *b + g;
                        *p -= lr * *b;
                    }
                }
            }
            OptimizerKind::Adam {
                beta1,
                beta2,
                epsilon,
            } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grad)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
                }
            }
        }
        Ok(())
    }
}

/// Where a tangent component's delta starts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Zero delta: training starts from the anchor function.
    #[default]
    AnchorZero,
    /// The running composed delta (sequential variant).
    PreviousComposed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossSpec,
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub init_mode: InitMode,
    #[serde(default)]
    pub head_only: bool,
}

impl TrainConfig {
    /// Tangent fine-tuning defaults: Adam at 1e-3 on the rescaled square loss.
    pub fn tangent_default(beta: f64) -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            seed: 0,
            loss: LossSpec::Rsl { alpha: 1.0, beta },
            optimizer: OptimizerSpec::adam(1e-3),
            init_mode: InitMode::AnchorZero,
            head_only: false,
        }
    }

    /// Non-linear fine-tuning defaults: SGD at 1e-2 on cross-entropy.
    pub fn nonlinear_default() -> Self {
        Self {
            epochs: 50,
            batch_size: 32,
            seed: 0,
            loss: LossSpec::CrossEntropy,
            optimizer: OptimizerSpec::sgd(1e-2, 0.9),
            init_mode: InitMode::AnchorZero,
            head_only: false,
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config(
                format!("{field}.epochs"),
                "must be at least 1",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config(
                format!("{field}.batch_size"),
                "must be at least 1",
            ));
        }
        self.loss.validate().map_err(|e| match e {
            Error::Config { field: f, message } => Error::config(format!("{field}.{f}"), message),
            other => other,
        })?;
        self.optimizer.validate(&format!("{field}.optimizer"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub learning_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Full-dataset loss before the first update.
    pub initial_loss: f64,
    /// Full-dataset loss after the last update.
    pub final_loss: f64,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub report: TrainReport,
}

fn check_task(spec: &NetworkSpec, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    check_dim(spec.input_dim(), data.dim())?;
    if data.num_classes() > spec.output_dim() {
        if let Some(&label) = data.labels().iter().find(|&&l| l >= spec.output_dim()) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: spec.output_dim(),
            });
        }
    }
    Ok(())
}

fn mask_outside_head(spec: &NetworkSpec, v: &mut [f64]) {
    let head = spec.head_range();
    v[..head.start].iter_mut().for_each(|x| *x = 0.0);
}

/// Mean loss and mean gradient with respect to the delta over `indices`.
pub fn tangent_batch_gradient(
    base: &BaseModel,
    delta: &ParamVector,
    data: &Dataset,
    indices: &[usize],
    loss: &LossSpec,
    head_only: bool,
) -> Result<(f64, ParamVector)> {
    check_dim(base.spec().param_count(), delta.dim())?;
    check_task(base.spec(), data)?;
    let mut grad = vec![0.0; delta.dim()];
    let l = tangent_batch_into(
        base,
        delta.as_slice(),
        data,
        indices,
        loss,
        head_only,
        &mut grad,
    );
    Ok((l, ParamVector::from_vec(grad)))
}

fn tangent_batch_into(
    base: &BaseModel,
    delta: &[f64],
    data: &Dataset,
    indices: &[usize],
    loss: &LossSpec,
    head_only: bool,
    grad: &mut [f64],
) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let scale = 1.0 / indices.len() as f64;
    let k = base.num_classes();
    let mut cot = vec![0.0; k];
    let mut total = 0.0;
    for &i in indices {
        let (x, y) = data.sample(i);
        let dual = base.dual_pass_unchecked(delta, x);
        let logits: Vec<f64> = dual
            .primal_output()
            .iter()
            .zip(dual.tangent_output())
            .map(|(p, t)| p + t)
            .collect();
        total += loss.value_unchecked(&logits, y);
        loss.grad_into(&logits, y, &mut cot);
        // the Jacobian of the tangent model in delta is J_w(x), independent of delta
        base.accumulate_vjp(&dual.primal, &cot, scale, grad);
    }
    if head_only {
        mask_outside_head(base.spec(), grad);
    }
    total * scale
}

/// Mean loss of the tangent model `base + delta` over the whole dataset.
pub fn tangent_dataset_loss(
    base: &BaseModel,
    delta: &ParamVector,
    data: &Dataset,
    loss: &LossSpec,
) -> Result<f64> {
    check_dim(base.spec().param_count(), delta.dim())?;
    check_task(base.spec(), data)?;
    let mut total = 0.0;
    for i in 0..data.len() {
        let (x, y) = data.sample(i);
        let dual = base.dual_pass_unchecked(delta.as_slice(), x);
        let logits: Vec<f64> = dual
            .primal_output()
            .iter()
            .zip(dual.tangent_output())
            .map(|(p, t)| p + t)
            .collect();
        total += loss.value_unchecked(&logits, y);
    }
    Ok(total / data.len() as f64)
}

/// Mean loss of the non-linear network over the whole dataset.
pub fn dataset_loss(model: &BaseModel, data: &Dataset, loss: &LossSpec) -> Result<f64> {
    check_task(model.spec(), data)?;
    let mut total = 0.0;
    for i in 0..data.len() {
        let (x, y) = data.sample(i);
        total += loss.value_unchecked(&model.forward_unchecked(x), y);
    }
    Ok(total / data.len() as f64)
}

fn guard(epoch: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
        return Err(Error::Divergence { epoch, loss });
    }
    Ok(())
}

/// Fits a tangent delta at the frozen `base` by mini-batch first-order
/// optimization of the mean per-sample loss. The objective is convex in the
/// delta for every supported loss.
pub fn train_tangent(
    base: &Arc<BaseModel>,
    data: &Dataset,
    cfg: &TrainConfig,
    init: Option<&ParamVector>,
) -> Result<TrainOutcome<TangentModel>> {
    cfg.validate("train")?;
    check_task(base.spec(), data)?;
    let dim = base.spec().param_count();
    let mut delta = match init {
        Some(v) => {
            check_dim(dim, v.dim())?;
            v.as_slice().to_vec()
        }
        None => vec![0.0; dim],
    };
    if cfg.head_only {
        mask_outside_head(base.spec(), &mut delta);
    }
    let initial_loss =
        tangent_dataset_loss(base, &ParamVector::from_vec(delta.clone()), data, &cfg.loss)?;
    guard(0, initial_loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer.kind, dim);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; dim];
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.optimizer.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let l = tangent_batch_into(
                base,
                &delta,
                data,
                batch,
                &cfg.loss,
                cfg.head_only,
                &mut grad,
            );
            guard(epoch, l)?;
            sum += l * batch.len() as f64;
            opt.step(&mut delta, &grad, lr)?;
        }
        let mean_loss = sum / data.len() as f64;
        guard(epoch, mean_loss)?;
        epochs.push(EpochRecord {
            epoch,
            mean_loss,
            learning_rate: lr,
        });
    }
    let delta = ParamVector::from_vec(delta);
    let final_loss = tangent_dataset_loss(base, &delta, data, &cfg.loss)?;
    guard(cfg.epochs, final_loss)?;
    Ok(TrainOutcome {
        model: TangentModel::component(Arc::clone(base), delta)?,
        report: TrainReport {
            initial_loss,
            final_loss,
            epochs,
        },
    })
}

/// Fine-tunes every weight of `base`, returning a new model. The input
/// model is not modified.
pub fn train_nonlinear(
    base: &BaseModel,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<BaseModel>> {
    cfg.validate("train")?;
    let spec = base.spec();
    check_task(spec, data)?;
    let initial_loss = dataset_loss(base, data, &cfg.loss)?;
    let dim = spec.param_count();
    let mut w = base.weights().as_slice().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer.kind, dim);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; dim];
    let mut cot = vec![0.0; spec.output_dim()];
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.optimizer.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let (x, y) = data.sample(i);
                let trace = spec.eval_trace(&w, x);
                let logits = trace.last().expect("output layer");
                batch_loss += cfg.loss.value_unchecked(logits, y);
                cfg.loss.grad_into(logits, y, &mut cot);
                spec.eval_vjp(&w, &trace, &cot, scale, &mut grad);
            }
            if cfg.head_only {
                mask_outside_head(spec, &mut grad);
            }
            guard(epoch, batch_loss * scale)?;
            sum += batch_loss;
            opt.step(&mut w, &grad, lr)?;
        }
        let mean_loss = sum / data.len() as f64;
        guard(epoch, mean_loss)?;
        epochs.push(EpochRecord {
            epoch,
            mean_loss,
            learning_rate: lr,
        });
    }
    let model = BaseModel::new(spec.clone(), ParamVector::from_vec(w))?;
    let final_loss = dataset_loss(&model, data, &cfg.loss)?;
    guard(cfg.epochs, final_loss)?;
    Ok(TrainOutcome {
        model,
        report: TrainReport {
            initial_loss,
            final_loss,
            epochs,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_plain_step() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, 2);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[0.5, 2.0], 0.1).unwrap();
        assert_eq!(p, vec![1.0 - 0.1 * 0.5, -1.0 - 0.1 * 2.0]);
        let before = p.clone();
        opt.step(&mut p, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.5 }, 1);
        let mut p = vec![0.0];
        opt.step(&mut p, &[1.0], 1.0).unwrap();
        opt.step(&mut p, &[1.0], 1.0).unwrap();
        // buffers: 1, then 1.5
        assert_eq!(p, vec![-2.5]);
    }

    #[test]
    fn adam_first_step_hand_trace() {
        // m1 = 0.1 g, v1 = 0.001 g^2; bias-corrected: m̂ = g, v̂ = g^2,
        // update = lr * g / (|g| + eps)
        let kind = OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        };
        let mut opt = Optimizer::new(kind, 2);
        let mut p = vec![0.0, 0.0];
        opt.step(&mut p, &[0.2, -3.0], 0.01).unwrap();
        let expected0 = -0.01 * 0.2 / (0.2 + 1e-8);
        let expected1 = 0.01 * 3.0 / (3.0 + 1e-8);
        assert!((p[0] - expected0).abs() < 1e-15);
        assert!((p[1] - expected1).abs() < 1e-15);
    }

    #[test]
    fn schedule_multiplies_cumulatively() {
        let spec = OptimizerSpec::adam(1.0);
        assert_eq!(spec.learning_rate_at(0), 1.0);
        assert_eq!(spec.learning_rate_at(24), 1.0);
        assert!((spec.learning_rate_at(25) - 0.1).abs() < 1e-15);
        assert!((spec.learning_rate_at(45) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::tangent_default(25.0);
        assert!(cfg.validate("t").is_ok());
        cfg.epochs = 0;
        assert!(matches!(cfg.validate("t"), Err(Error::Config { .. })));
        let mut cfg = TrainConfig::tangent_default(25.0);
        cfg.optimizer.schedule = vec![(10, 0.1), (5, 0.1)];
        assert!(cfg.validate("t").is_err());
        let mut cfg = TrainConfig::tangent_default(25.0);
        cfg.loss = LossSpec::Rsl {
            alpha: 1.0,
            beta: 0.0,
        };
        let err = cfg.validate("method").unwrap_err();
        assert!(err.to_string().contains("method.loss.beta"), "{err}");
    }
}
