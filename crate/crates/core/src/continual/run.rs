//! Continual-learning drivers: one function per method, all evaluated the
//! same way after every task.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::protocol::{Benchmark, Protocol};
use crate::data::{sample_reads, Dataset};
use crate::ensemble::{
    argmax, count_correct, soup, Ensemble, EnsembleMode, Members, ModelCollection, Predictor,
};
use crate::error::{Error, Result};
use crate::net::BaseModel;
use crate::tangent::{compose_many, TangentModel};
use crate::train::{train_nonlinear, train_tangent, EpochRecord, InitMode, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Tmc,
    TmcSeq,
    TmcFc,
    Tme,
    Soup,
    EnsLogit,
    EnsSoftmax,
    NaiveSeq,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Tmc,
        Method::TmcSeq,
        Method::TmcFc,
        Method::Tme,
        Method::Soup,
        Method::EnsLogit,
        Method::EnsSoftmax,
        Method::NaiveSeq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Tmc => "tmc",
            Method::TmcSeq => "tmc_seq",
            Method::TmcFc => "tmc_fc",
            Method::Tme => "tme",
            Method::Soup => "soup",
            Method::EnsLogit => "ens_logit",
            Method::EnsSoftmax => "ens_softmax",
            Method::NaiveSeq => "naive_seq",
        }
    }

    /// Whether components are tangent models (as opposed to fully fine-tuned networks).
    pub fn is_tangent(self) -> bool {
        matches!(
            self,
            Method::Tmc | Method::TmcSeq | Method::TmcFc | Method::Tme
        )
    }
}

/// Outcome of running one method over a benchmark.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodRun {
    pub method: Method,
    /// Each task's own component (or, for naive fine-tuning, the model right
    /// after that task) evaluated on that task's test set.
    pub component_accuracy: Vec<f64>,
    /// Accuracy of the combined model on all tasks seen so far.
    pub accuracy_after_task: Vec<f64>,
    pub train_seconds: Vec<f64>,
    pub inference_us_per_sample: f64,
    pub epoch_logs: Vec<Vec<EpochRecord>>,
    /// Largest number of model deltas held at once (tangent methods only).
    pub peak_live_deltas: usize,
}

impl MethodRun {
    pub fn final_accuracy(&self) -> f64 {
        self.accuracy_after_task.last().copied().unwrap_or(0.0)
    }

    pub fn total_train_seconds(&self) -> f64 {
        self.train_seconds.iter().sum()
    }
}

/// Counts model deltas alive in a driver; the guard releases on drop.
#[derive(Debug, Default)]
pub struct DeltaLedger {
    live: AtomicUsize,
    peak: AtomicUsize,
}

pub struct DeltaHold<'a>(&'a DeltaLedger);

impl DeltaLedger {
    pub fn hold(&self) -> DeltaHold<'_> {
        let now = self.live.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        DeltaHold(self)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

impl Drop for DeltaHold<'_> {
    fn drop(&mut self) {
        self.0.live.fetch_sub(1, Ordering::SeqCst);
    }
}

/// Per-task seed derived from the run seed.
pub fn task_seed(seed: u64, task: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (task as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn with_seed(cfg: &TrainConfig, task: usize) -> TrainConfig {
    TrainConfig {
        seed: task_seed(cfg.seed, task),
        ..cfg.clone()
    }
}

fn check_base(bench: &Benchmark, base: &BaseModel) -> Result<()> {
    if base.num_classes() != bench.num_classes() {
        return Err(Error::config(
            "network",
            format!(
                "base head has {} outputs but the benchmark has {} classes",
                base.num_classes(),
                bench.num_classes()
            ),
        ));
    }
    if base.spec().input_dim() != bench.train.tasks[0].data.dim() {
        return Err(Error::DimensionMismatch {
            expected: base.spec().input_dim(),
            found: bench.train.tasks[0].data.dim(),
        });
    }
    Ok(())
}

/// Accuracy on the test sets of tasks `0..=upto`, pooled over samples.
/// Task-incremental evaluation restricts each task's predictions to its classes.
pub fn seen_accuracy(bench: &Benchmark, predictor: &dyn Predictor, upto: usize) -> Result<f64> {
    let restrict = bench.protocol() == Protocol::TaskIncremental;
    let mut correct = 0;
    let mut total = 0;
    for task in &bench.test.tasks[..=upto] {
        let restriction = restrict.then_some(task.classes.as_slice());
        let (c, n) = count_correct(predictor, &task.data, restriction)?;
        correct += c;
        total += n;
    }
    Ok(correct as f64 / total as f64)
}

/// Accuracy of one component on its own task's test set.
pub fn task_accuracy(bench: &Benchmark, predictor: &dyn Predictor, task: usize) -> Result<f64> {
    let t = &bench.test.tasks[task];
    let restriction =
        (bench.protocol() == Protocol::TaskIncremental).then_some(t.classes.as_slice());
    let (c, n) = count_correct(predictor, &t.data, restriction)?;
    Ok(c as f64 / n as f64)
}

fn all_test(bench: &Benchmark) -> Result<Dataset> {
    Dataset::concat(&bench.test.tasks.iter().map(|t| &t.data).collect::<Vec<_>>())
}

/// Mean wall time per sample of computing scores over the full test set.
fn time_inference(predictor: &dyn Predictor, data: &Dataset) -> f64 {
    let start = Instant::now();
    let mut sink = 0usize;
    for i in 0..data.len() {
        sink = sink.wrapping_add(argmax(&predictor.scores(data.sample(i).0), None));
    }
    std::hint::black_box(sink);
    start.elapsed().as_secs_f64() * 1e6 / data.len().max(1) as f64
}

/// Options for the composition drivers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TmcOptions {
    /// Train all components concurrently before the ordered merge.
    pub parallel: bool,
    /// Keep a component log in the composed model so tasks can be unlearned.
    pub retain_log: bool,
}

/// A composition run together with the final composed model.
#[derive(Clone, Debug)]
pub struct TmcRun {
    pub result: MethodRun,
    pub composed: TangentModel,
}

struct Trained {
    model: TangentModel,
    seconds: f64,
    epochs: Vec<EpochRecord>,
}

fn train_component(
    base: &Arc<BaseModel>,
    bench: &Benchmark,
    cfg: &TrainConfig,
    t: usize,
    init: Option<&TangentModel>,
) -> Result<Trained> {
    let start = Instant::now();
    let out = train_tangent(
        base,
        &bench.train.tasks[t].data,
        &with_seed(cfg, t),
        init.map(|m| m.delta()),
    )?;
    Ok(Trained {
        model: out.model,
        seconds: start.elapsed().as_secs_f64(),
        epochs: out.report.epochs,
    })
}

fn tmc_driver(
    bench: &Benchmark,
    base: &Arc<BaseModel>,
    cfg: &TrainConfig,
    opts: TmcOptions,
    method: Method,
) -> Result<TmcRun> {
    check_base(bench, base)?;
    let cfg = &TrainConfig {
        head_only: cfg.head_only || method == Method::TmcFc,
        init_mode: if method == Method::TmcSeq {
            InitMode::PreviousComposed
        } else {
            cfg.init_mode
        },
        ..cfg.clone()
    };
    let sequential_init = cfg.init_mode == InitMode::PreviousComposed;
    let ledger = DeltaLedger::default();
    let n = bench.num_tasks();
    let mut result = MethodRun {
        method,
        component_accuracy: Vec::with_capacity(n),
        accuracy_after_task: Vec::with_capacity(n),
        train_seconds: Vec::with_capacity(n),
        inference_us_per_sample: 0.0,
        epoch_logs: Vec::with_capacity(n),
        peak_live_deltas: 0,
    };
    let mut running = if opts.retain_log {
        TangentModel::at_anchor_tracked(Arc::clone(base))
    } else {
        TangentModel::at_anchor(Arc::clone(base))
    };
    let _running_hold = ledger.hold();

    let fold = |running: TangentModel,
                trained: Trained,
                t: usize,
                result: &mut MethodRun|
     -> Result<TangentModel> {
        let component = if opts.retain_log {
            trained.model.tracked(t as u32 + 1)
        } else {
            trained.model
        };
        result
            .component_accuracy
            .push(task_accuracy(bench, &component, t)?);
        result.train_seconds.push(trained.seconds);
        result.epoch_logs.push(trained.epochs);
        let running = running.absorb_next(&component)?;
        drop(component);
        result
            .accuracy_after_task
            .push(seen_accuracy(bench, &running, t)?);
        Ok(running)
    };

    if opts.parallel && !sequential_init {
        let trained: Vec<(Trained, DeltaHold<'_>)> = (0..n)
            .into_par_iter()
            .map(|t| {
                let hold = ledger.hold();
                train_component(base, bench, cfg, t, None).map(|tr| (tr, hold))
            })
            .collect::<Result<_>>()?;
        for (t, (tr, hold)) in trained.into_iter().enumerate() {
            running = fold(running, tr, t, &mut result)?;
            drop(hold);
        }
    } else {
        for t in 0..n {
            let hold = ledger.hold();
            let init = sequential_init.then_some(&running);
            let tr = train_component(base, bench, cfg, t, init)?;
            running = fold(running, tr, t, &mut result)?;
            drop(hold);
        }
    }
    result.peak_live_deltas = ledger.peak();
    result.inference_us_per_sample = time_inference(&running, &all_test(bench)?);
    Ok(TmcRun {
        result,
        composed: running,
    })
}

/// Trains one tangent component per task from the anchor and folds them
/// into a running composition with the uniform schedule.
pub fn run_tmc(
    bench: &Benchmark,
    base: &Arc<BaseModel>,
    cfg: &TrainConfig,
    opts: TmcOptions,
) -> Result<TmcRun> {
    let cfg = TrainConfig {
        init_mode: InitMode::AnchorZero,
        ..cfg.clone()
    };
    tmc_driver(bench, base, &cfg, opts, Method::Tmc)
}

/// As [`run_tmc`] but each component starts from the running composed delta.
pub fn run_tmc_seq(
    bench: &Benchmark,
    base: &Arc<BaseModel>,
    cfg: &TrainConfig,
    retain_log: bool,
) -> Result<TmcRun> {
    tmc_driver(
        bench,
        base,
        cfg,
        TmcOptions {
            parallel: false,
            retain_log,
        },
        Method::TmcSeq,
    )
}

/// Head-only tangent components, composed like [`run_tmc`].
pub fn run_tmc_fc(
    bench: &Benchmark,
    base: &Arc<BaseModel>,
    cfg: &TrainConfig,
    opts: TmcOptions,
) -> Result<TmcRun> {
    let cfg = TrainConfig {
        init_mode: InitMode::AnchorZero,
        ..cfg.clone()
    };
    tmc_driver(bench, base, &cfg, opts, Method::TmcFc)
}

/// Softmax ensemble of independently trained tangent components.
pub fn run_tme(bench: &Benchmark, base: &Arc<BaseModel>, cfg: &TrainConfig) -> Result<MethodRun> {
    check_base(bench, base)?;
    let n = bench.num_tasks();
    let trained: Vec<Trained> = (0..n)
        .map(|t| train_component(base, bench, cfg, t, None))
        .collect::<Result<_>>()?;
    let mut components = Vec::with_capacity(n);
    let mut result = MethodRun {
        method: Method::Tme,
        component_accuracy: Vec::with_capacity(n),
        accuracy_after_task: Vec::with_capacity(n),
        train_seconds: Vec::with_capacity(n),
        inference_us_per_sample: 0.0,
        epoch_logs: Vec::with_capacity(n),
        peak_live_deltas: n,
    };
    let mut last = None;
    for (t, tr) in trained.into_iter().enumerate() {
        result
            .component_accuracy
            .push(task_accuracy(bench, &tr.model, t)?);
        result.train_seconds.push(tr.seconds);
        result.epoch_logs.push(tr.epochs);
        components.push(tr.model);
        let ens = Ensemble::new(
            ModelCollection::uniform(Members::Tangent(components.clone()))?,
            EnsembleMode::Softmax,
        )?;
        result
            .accuracy_after_task
            .push(seen_accuracy(bench, &ens, t)?);
        last = Some(ens);
    }
    let last = last.ok_or(Error::Empty("task sequence"))?;
    result.inference_us_per_sample = time_inference(&last, &all_test(bench)?);
    Ok(result)
}

/// Runs the weight-soup and output-ensemble baselines over one shared set of
/// non-linearly fine-tuned components. `methods` may contain any of
/// [`Method::Soup`], [`Method::EnsLogit`], [`Method::EnsSoftmax`].
pub fn run_nonlinear_family(
    bench: &Benchmark,
    base: &BaseModel,
    cfg: &TrainConfig,
    methods: &[Method],
) -> Result<Vec<MethodRun>> {
    check_base(bench, base)?;
    if let Some(m) = methods
        .iter()
        .find(|m| !matches!(m, Method::Soup | Method::EnsLogit | Method::EnsSoftmax))
    {
        return Err(Error::config(
            "methods",
            format!("{} is not a non-linear combination baseline", m.name()),
        ));
    }
    let n = bench.num_tasks();
    let mut members = Vec::with_capacity(n);
    let mut seconds = Vec::with_capacity(n);
    let mut logs = Vec::with_capacity(n);
    let mut component_accuracy = Vec::with_capacity(n);
    for t in 0..n {
        let start = Instant::now();
        let out = train_nonlinear(base, &bench.train.tasks[t].data, &with_seed(cfg, t))?;
        seconds.push(start.elapsed().as_secs_f64());
        logs.push(out.report.epochs);
        component_accuracy.push(task_accuracy(bench, &out.model, t)?);
        members.push(out.model);
    }
    let test = all_test(bench)?;
    let mut runs = Vec::with_capacity(methods.len());
    for &method in methods {
        let mut after = Vec::with_capacity(n);
        let mut predictor: Option<Box<dyn Predictor>> = None;
        for t in 0..n {
            let seen = &members[..=t];
            let p: Box<dyn Predictor> = match method {
                Method::Soup => {
                    let refs: Vec<&BaseModel> = seen.iter().collect();
                    Box::new(soup(&refs, &vec![1.0 / seen.len() as f64; seen.len()])?)
                }
                Method::EnsLogit | Method::EnsSoftmax => {
                    let mode = if method == Method::EnsLogit {
                        EnsembleMode::Logits
                    } else {
                        EnsembleMode::Softmax
                    };
                    Box::new(Ensemble::new(
                        ModelCollection::uniform(Members::Nonlinear(seen.to_vec()))?,
                        mode,
                    )?)
                }
                _ => unreachable!("filtered above"),
            };
            after.push(seen_accuracy(bench, p.as_ref(), t)?);
            predictor = Some(p);
        }
        let p = predictor.ok_or(Error::Empty("task sequence"))?;
        runs.push(MethodRun {
            method,
            component_accuracy: component_accuracy.clone(),
            accuracy_after_task: after,
            train_seconds: seconds.clone(),
            inference_us_per_sample: time_inference(p.as_ref(), &test),
            epoch_logs: logs.clone(),
            peak_live_deltas: 0,
        });
    }
    Ok(runs)
}

/// Plain sequential fine-tuning of one network across all tasks.
pub fn run_naive_seq(bench: &Benchmark, base: &BaseModel, cfg: &TrainConfig) -> Result<MethodRun> {
    check_base(bench, base)?;
    let n = bench.num_tasks();
    let mut model = base.clone();
    let mut result = MethodRun {
        method: Method::NaiveSeq,
        component_accuracy: Vec::with_capacity(n),
        accuracy_after_task: Vec::with_capacity(n),
        train_seconds: Vec::with_capacity(n),
        inference_us_per_sample: 0.0,
        epoch_logs: Vec::with_capacity(n),
        peak_live_deltas: 0,
    };
    for t in 0..n {
        let start = Instant::now();
        let out = train_nonlinear(&model, &bench.train.tasks[t].data, &with_seed(cfg, t))?;
        result.train_seconds.push(start.elapsed().as_secs_f64());
        result.epoch_logs.push(out.report.epochs);
        model = out.model;
        result
            .component_accuracy
            .push(task_accuracy(bench, &model, t)?);
        result
            .accuracy_after_task
            .push(seen_accuracy(bench, &model, t)?);
    }
    result.inference_us_per_sample = time_inference(&model, &all_test(bench)?);
    Ok(result)
}

/// Runs any single method. Tangent methods use `tangent_cfg`, the others `nonlinear_cfg`.
pub fn run_baseline(
    bench: &Benchmark,
    base: &Arc<BaseModel>,
    method: Method,
    tangent_cfg: &TrainConfig,
    nonlinear_cfg: &TrainConfig,
) -> Result<MethodRun> {
    match method {
        Method::Tmc => run_tmc(bench, base, tangent_cfg, TmcOptions::default()).map(|r| r.result),
        Method::TmcSeq => run_tmc_seq(bench, base, tangent_cfg, false).map(|r| r.result),
        Method::TmcFc => {
            run_tmc_fc(bench, base, tangent_cfg, TmcOptions::default()).map(|r| r.result)
        }
        Method::Tme => run_tme(bench, base, tangent_cfg),
        Method::NaiveSeq => run_naive_seq(bench, base, nonlinear_cfg),
        Method::Soup | Method::EnsLogit | Method::EnsSoftmax => {
            let mut runs = run_nonlinear_family(bench, base, nonlinear_cfg, &[method])?;
            Ok(runs.remove(0))
        }
    }
}

/// What happened when one task was removed from a composition.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlearnRecord {
    pub task_id: u32,
    /// Accuracy on the removed task before and after removal.
    pub forgotten_before: f64,
    pub forgotten_after: f64,
    /// Accuracy on the remaining tasks' test sets: after removal and for a
    /// composition built from scratch without the task.
    pub remaining_after: f64,
    pub remaining_fresh: f64,
    /// Largest logit difference to the fresh composition over all test samples.
    pub max_logit_diff: f64,
    /// Whether every test sample gets the same prediction as the fresh composition.
    pub predictions_identical: bool,
    /// Samples read while unlearning (expected zero).
    pub data_reads: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlearnReport {
    pub records: Vec<UnlearnRecord>,
    /// Whether removing every task one after another leaves a zero delta.
    pub all_removed_is_zero: bool,
}

/// Removes each task in turn (with rescaling) from `composed` and compares
/// against recomposing the remaining components from scratch.
pub fn demo_unlearn(bench: &Benchmark, composed: &TangentModel) -> Result<UnlearnReport> {
    let log = composed.component_log().ok_or(Error::LogDisabled)?;
    let test = all_test(bench)?;
    let restrict = bench.protocol() == Protocol::TaskIncremental;
    let mut records = Vec::with_capacity(log.len());
    for rec in log {
        let t = rec.task_id as usize - 1;
        let reads = sample_reads();
        let removed = composed.unlearn(rec.task_id, true)?;
        let data_reads = sample_reads() - reads;

        let rest: Vec<TangentModel> = log
            .iter()
            .filter(|r| r.task_id != rec.task_id)
            .map(|r| TangentModel::component(Arc::clone(composed.base()), (*r.delta).clone()))
            .collect::<Result<_>>()?;
        let fresh = if rest.is_empty() {
            TangentModel::at_anchor(Arc::clone(composed.base()))
        } else {
            let refs: Vec<&TangentModel> = rest.iter().collect();
            compose_many(&refs, &vec![1.0 / rest.len() as f64; rest.len()])?
        };

        let mut max_diff: f64 = 0.0;
        let mut identical = true;
        for i in 0..test.len() {
            let x = test.sample(i).0;
            let a = removed.scores(x);
            let b = fresh.scores(x);
            for (u, v) in a.iter().zip(&b) {
                max_diff = max_diff.max((u - v).abs());
            }
            identical &= argmax(&a, None) == argmax(&b, None);
        }

        let remaining: Vec<usize> = log
            .iter()
            .map(|r| r.task_id as usize - 1)
            .filter(|&i| i != t)
            .collect();
        let pooled = |p: &dyn Predictor| -> Result<f64> {
            let mut c = 0;
            let mut n = 0;
            for &i in &remaining {
                let task = &bench.test.tasks[i];
                let (ci, ni) =
                    count_correct(p, &task.data, restrict.then_some(task.classes.as_slice()))?;
                c += ci;
                n += ni;
            }
            Ok(if n == 0 { 0.0 } else { c as f64 / n as f64 })
        };
        records.push(UnlearnRecord {
            task_id: rec.task_id,
            forgotten_before: task_accuracy(bench, composed, t)?,
            forgotten_after: task_accuracy(bench, &removed, t)?,
            remaining_after: pooled(&removed)?,
            remaining_fresh: pooled(&fresh)?,
            max_logit_diff: max_diff,
            predictions_identical: identical,
            data_reads,
        });
    }
    let mut all = composed.clone();
    for rec in log {
        all = all.unlearn(rec.task_id, true)?;
    }
    Ok(UnlearnReport {
        records,
        all_removed_is_zero: all.delta().is_zero(),
    })
}
