//! End-to-end experiment runs: build the data, pre-train the anchor, run
//! every configured method for every protocol and seed, and collect the
//! result tables.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::continual::{
    run_naive_seq, run_nonlinear_family, run_tmc, run_tmc_fc, run_tmc_seq, run_tme, task_seed,
    Benchmark, Method, MethodRun, Protocol, TmcOptions,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::io::config::{DatasetSource, ExperimentConfig, NetworkConfig, PretrainSplit};
use crate::io::results::{
    write_epoch_rows, write_results, write_task_rows, EpochRow, ResultRow, TaskRow,
};
use crate::io::tabular::load_csv_split;
use crate::net::{BaseModel, NetworkSpec};
use crate::train::{train_nonlinear, TrainConfig};

// Independent random streams derived from one run seed.
const STREAM_TRAIN_SAMPLES: usize = 1001;
const STREAM_TEST_SAMPLES: usize = 1002;
const STREAM_PRETRAIN_SAMPLES: usize = 1003;
const STREAM_SPLIT: usize = 1004;
const STREAM_INIT: usize = 1005;
const STREAM_PRETRAIN: usize = 1006;
const STREAM_HEAD: usize = 1007;
const STREAM_TANGENT: usize = 1008;
const STREAM_NONLINEAR: usize = 1009;

pub fn stream_seed(seed: u64, stream: usize) -> u64 {
    task_seed(seed, stream)
}

/// Task data, held-out test data and the pre-training set for one seed.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub pretrain: Dataset,
}

fn keep_first_classes(d: &Dataset, k: usize) -> Result<Dataset> {
    let classes: Vec<usize> = (0..k).collect();
    let map: Vec<usize> = (0..d.num_classes()).map(|c| c.min(k - 1)).collect();
    d.filter_classes(&classes).relabel(&map, k)
}

fn keep_last_classes(d: &Dataset, from: usize) -> Result<Dataset> {
    let classes: Vec<usize> = (from..d.num_classes()).collect();
    let map: Vec<usize> = (0..d.num_classes())
        .map(|c| c.saturating_sub(from))
        .collect();
    d.filter_classes(&classes)
        .relabel(&map, d.num_classes() - from)
}

/// Builds the datasets for one run seed.
///
/// With `disjoint_classes`, a synthetic generator is run with the task
/// classes plus the extra pre-training classes; tasks see the first block,
/// the anchor is trained on the rest.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<PreparedData> {
    match &cfg.dataset {
        DatasetSource::Synthetic {
            generator,
            test_samples_per_class,
            seed: data_seed,
        } => {
            let ds = data_seed.unwrap_or(seed);
            let k = generator.classes();
            let spc = generator.samples_per_class();
            let pre_spc = cfg.pretrain.samples_per_class.unwrap_or(spc);
            let train_stream = stream_seed(ds, STREAM_TRAIN_SAMPLES);
            let test_stream = stream_seed(ds, STREAM_TEST_SAMPLES);
            let pre_stream = stream_seed(ds, STREAM_PRETRAIN_SAMPLES);
            match cfg.pretrain.split {
                PretrainSplit::DisjointSamples => Ok(PreparedData {
                    train: generator.generate_with(ds, train_stream, spc)?,
                    test: generator.generate_with(ds, test_stream, *test_samples_per_class)?,
                    pretrain: generator.generate_with(ds, pre_stream, pre_spc)?,
                }),
                PretrainSplit::DisjointClasses => {
                    let extra = cfg.pretrain.extra_classes.ok_or_else(|| {
                        Error::config("pretrain.extra_classes", "required for disjoint_classes")
                    })?;
                    let wide = generator.with_classes(k + extra);
                    Ok(PreparedData {
                        train: keep_first_classes(&wide.generate_with(ds, train_stream, spc)?, k)?,
                        test: keep_first_classes(
                            &wide.generate_with(ds, test_stream, *test_samples_per_class)?,
                            k,
                        )?,
                        pretrain: keep_last_classes(
                            &wide.generate_with(ds, pre_stream, pre_spc)?,
                            k,
                        )?,
                    })
                }
            }
        }
        DatasetSource::Csv {
            train,
            test,
            schema,
        } => {
            let (full, test) = load_csv_split(train, test, schema)?;
            if cfg.pretrain.split != PretrainSplit::DisjointSamples {
                return Err(Error::config(
                    "pretrain.split",
                    "disjoint_classes needs a synthetic dataset",
                ));
            }
            let fraction = cfg
                .pretrain
                .fraction
                .ok_or_else(|| Error::config("pretrain.fraction", "required for CSV data"))?;
            let mut order: Vec<usize> = (0..full.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(
                seed,
                STREAM_PRETRAIN_SAMPLES,
            )));
            let held = ((full.len() as f64) * fraction).round() as usize;
            if held == 0 || held >= full.len() {
                return Err(Error::config(
                    "pretrain.fraction",
                    format!("holds out {held} of {} rows", full.len()),
                ));
            }
            let mut pre_idx = order[..held].to_vec();
            let mut task_idx = order[held..].to_vec();
            pre_idx.sort_unstable();
            task_idx.sort_unstable();
            Ok(PreparedData {
                train: full.subset(&task_idx),
                test,
                pretrain: full.subset(&pre_idx),
            })
        }
    }
}

/// Trains a network on the pre-training set with every weight free, then
/// replaces its head by a freshly initialized one with `classes` outputs.
pub fn pretrain_anchor(
    pretrain: &Dataset,
    network: &NetworkConfig,
    train: &TrainConfig,
    classes: usize,
    seed: u64,
) -> Result<BaseModel> {
    let spec = NetworkSpec::mlp(
        pretrain.dim(),
        &network.hidden,
        pretrain.num_classes(),
        network.activation()?,
    )?;
    let init = BaseModel::init(spec, stream_seed(seed, STREAM_INIT));
    let cfg = TrainConfig {
        seed: stream_seed(seed, STREAM_PRETRAIN),
        ..train.clone()
    };
    let trained = train_nonlinear(&init, pretrain, &cfg)?.model;
    trained.with_reinitialized_head(classes, stream_seed(seed, STREAM_HEAD))
}

/// Resolved training configuration of `method`, seeded for run seed `seed`.
/// All tangent methods share one seed stream, all non-linear ones another.
pub fn method_config(
    cfg: &ExperimentConfig,
    method: Method,
    protocol: Protocol,
    seed: u64,
) -> Result<TrainConfig> {
    let stream = if method.is_tangent() {
        STREAM_TANGENT
    } else {
        STREAM_NONLINEAR
    };
    Ok(TrainConfig {
        seed: stream_seed(seed, stream),
        ..cfg.train.resolve(method, protocol)?
    })
}

/// Prepared data and anchor for one seed.
#[derive(Clone, Debug)]
pub struct SeedSetup {
    pub seed: u64,
    pub data: PreparedData,
    pub anchor: Arc<BaseModel>,
}

pub fn setup_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedSetup> {
    let data = prepare_data(cfg, seed)?;
    let pre_cfg = cfg
        .pretrain
        .train
        .apply(TrainConfig::nonlinear_default(), "pretrain.train")?;
    let anchor = pretrain_anchor(
        &data.pretrain,
        &cfg.network,
        &pre_cfg,
        data.train.num_classes(),
        seed,
    )?;
    Ok(SeedSetup {
        seed,
        data,
        anchor: Arc::new(anchor),
    })
}

pub fn benchmark(
    cfg: &ExperimentConfig,
    setup: &SeedSetup,
    protocol: Protocol,
) -> Result<Benchmark> {
    Benchmark::new(
        cfg.name.clone(),
        &setup.data.train,
        &setup.data.test,
        protocol,
        cfg.num_tasks,
        stream_seed(setup.seed, STREAM_SPLIT),
    )
}

/// Runs one method (or, for the shared non-linear baselines, several).
fn run_group(
    cfg: &ExperimentConfig,
    setup: &SeedSetup,
    bench: &Benchmark,
    methods: &[Method],
) -> Result<Vec<MethodRun>> {
    let protocol = bench.protocol();
    let tc = method_config(cfg, methods[0], protocol, setup.seed)?;
    let opts = TmcOptions {
        parallel: cfg.parallel_tasks,
        retain_log: false,
    };
    let base = &setup.anchor;
    Ok(match methods[0] {
        Method::Tmc => vec![run_tmc(bench, base, &tc, opts)?.result],
        Method::TmcSeq => vec![run_tmc_seq(bench, base, &tc, false)?.result],
        Method::TmcFc => vec![run_tmc_fc(bench, base, &tc, opts)?.result],
        Method::Tme => vec![run_tme(bench, base, &tc)?],
        Method::NaiveSeq => vec![run_naive_seq(bench, base, &tc)?],
        Method::Soup | Method::EnsLogit | Method::EnsSoftmax => {
            run_nonlinear_family(bench, base, &tc, methods)?
        }
    })
}

/// Groups methods that can share trained components: the non-linear
/// combination baselines share them when their configurations agree.
fn method_groups(cfg: &ExperimentConfig, protocol: Protocol) -> Result<Vec<Vec<Method>>> {
    let mut groups: Vec<Vec<Method>> = Vec::new();
    for &m in &cfg.methods {
        let shared = matches!(m, Method::Soup | Method::EnsLogit | Method::EnsSoftmax);
        let mut joined = false;
        if shared {
            let mine = cfg.train.resolve(m, protocol)?;
            for g in &mut groups {
                let lead = g[0];
                if matches!(lead, Method::Soup | Method::EnsLogit | Method::EnsSoftmax)
                    && cfg.train.resolve(lead, protocol)? == mine
                {
                    g.push(m);
                    joined = true;
                    break;
                }
            }
        }
        if !joined {
            groups.push(vec![m]);
        }
    }
    Ok(groups)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentOutput {
    pub results: Vec<ResultRow>,
    pub tasks: Vec<TaskRow>,
    pub epochs: Vec<EpochRow>,
}

pub type Progress<'a> = &'a (dyn Fn(&str) + Sync);

/// Runs the whole matrix on a pool of `cfg.jobs` threads. Rows come out
/// ordered by protocol, then seed, then method, as listed in the config.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    progress: Option<Progress<'_>>,
) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let say = |msg: &str| {
        if let Some(p) = progress {
            p(msg)
        }
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::config("jobs", e.to_string()))?;
    pool.install(|| {
        let setups: Vec<SeedSetup> = cfg
            .seeds
            .par_iter()
            .map(|&s| {
                let setup = setup_seed(cfg, s)?;
                say(&format!("seed {s}: anchor pre-trained"));
                Ok(setup)
            })
            .collect::<Result<_>>()?;

        let mut jobs = Vec::new();
        for &protocol in &cfg.protocols {
            let groups = method_groups(cfg, protocol)?;
            for setup in &setups {
                let bench = Arc::new(benchmark(cfg, setup, protocol)?);
                for g in &groups {
                    jobs.push((setup, Arc::clone(&bench), g.clone()));
                }
            }
        }
        let runs: Vec<(u64, Protocol, Vec<MethodRun>)> = jobs
            .par_iter()
            .map(|(setup, bench, group)| {
                let runs = run_group(cfg, setup, bench, group)?;
                for r in &runs {
                    say(&format!(
                        "seed {} {} {}: accuracy {:.4}",
                        setup.seed,
                        bench.protocol().name(),
                        r.method.name(),
                        r.final_accuracy()
                    ));
                }
                Ok((setup.seed, bench.protocol(), runs))
            })
            .collect::<Result<_>>()?;

        let mut out = ExperimentOutput::default();
        for &protocol in &cfg.protocols {
            for &seed in &cfg.seeds {
                for &method in &cfg.methods {
                    let run = runs
                        .iter()
                        .filter(|(s, p, _)| *s == seed && *p == protocol)
                        .flat_map(|(_, _, rs)| rs.iter())
                        .find(|r| r.method == method)
                        .expect("every method ran");
                    push_rows(&mut out, cfg, protocol, seed, run);
                }
            }
        }
        Ok(out)
    })
}

fn push_rows(
    out: &mut ExperimentOutput,
    cfg: &ExperimentConfig,
    protocol: Protocol,
    seed: u64,
    run: &MethodRun,
) {
    let timing = cfg.record_timing;
    out.results.push(ResultRow {
        dataset: cfg.name.clone(),
        protocol: protocol.name().into(),
        tasks: cfg.num_tasks,
        method: run.method.name().into(),
        accuracy: run.final_accuracy(),
        inference_us_per_sample: timing.then_some(run.inference_us_per_sample),
        train_seconds: timing.then(|| run.total_train_seconds()),
        seed,
    });
    for (t, (c, a)) in run
        .component_accuracy
        .iter()
        .zip(&run.accuracy_after_task)
        .enumerate()
    {
        out.tasks.push(TaskRow {
            dataset: cfg.name.clone(),
            protocol: protocol.name().into(),
            method: run.method.name().into(),
            seed,
            task: t + 1,
            component_accuracy: *c,
            accuracy_after_task: *a,
        });
    }
    for (t, log) in run.epoch_logs.iter().enumerate() {
        for e in log {
            out.epochs.push(EpochRow {
                dataset: cfg.name.clone(),
                protocol: protocol.name().into(),
                method: run.method.name().into(),
                seed,
                task: t + 1,
                epoch: e.epoch,
                mean_loss: e.mean_loss,
                learning_rate: e.learning_rate,
            });
        }
    }
}

pub const RESULTS_FILE: &str = "results.csv";
pub const TASKS_FILE: &str = "tasks.csv";
pub const EPOCHS_FILE: &str = "epochs.csv";

/// Writes `results.csv`, `tasks.csv` and `epochs.csv` into `dir`.
pub fn write_outputs(out: &ExperimentOutput, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_results(&out.results, dir.join(RESULTS_FILE))?;
    write_task_rows(&out.tasks, dir.join(TASKS_FILE))?;
    write_epoch_rows(&out.epochs, dir.join(EPOCHS_FILE))
}
