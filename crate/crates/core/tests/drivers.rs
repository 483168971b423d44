//! Training and continual-learning drivers against independent references.

use std::sync::Arc;

use tmc_core::continual::{
    run_baseline, run_naive_seq, run_nonlinear_family, run_tmc, run_tmc_fc, run_tmc_seq, run_tme,
    seen_accuracy, task_accuracy, task_seed, Benchmark, Method, Protocol, TmcOptions,
};
use tmc_core::data::SyntheticSpec;
use tmc_core::ensemble::{soup, Ensemble, EnsembleMode, Members, ModelCollection};
use tmc_core::train::{tangent_dataset_loss, train_nonlinear, train_tangent, OptimizerSpec};
use tmc_core::{
    Activation, BaseModel, Dataset, LossSpec, NetworkSpec, ParamVector, TangentModel, TrainConfig,
};

/// Draws `spc` samples per class; the class centres depend on `seed` only.
fn mixture(classes: usize, dim: usize, spc: usize, seed: u64, sample_seed: u64) -> Dataset {
    let spec = SyntheticSpec::GaussianMixture {
        classes,
        dim,
        samples_per_class: spc,
        noise: 0.6,
        separation: 4.0,
        modes_per_class: 1,
    };
    spec.generate_with(seed, sample_seed, spc).unwrap()
}

fn bench(protocol: Protocol, tasks: usize, seed: u64) -> (Arc<BaseModel>, Benchmark) {
    let train = mixture(6, 5, 25, seed, 1);
    let test = mixture(6, 5, 10, seed, 2);
    let b = Benchmark::new("drivers", &train, &test, protocol, tasks, seed).unwrap();
    let spec = NetworkSpec::mlp(5, &[12], 6, Activation::Relu).unwrap();
    (Arc::new(BaseModel::init(spec, seed)), b)
}

fn tangent_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 8,
        seed,
        optimizer: OptimizerSpec::adam(1e-2),
        ..TrainConfig::tangent_default(25.0)
    }
}

fn nonlinear_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 40,
        seed,
        optimizer: OptimizerSpec::sgd(0.05, 0.9).with_schedule(vec![]),
        ..TrainConfig::nonlinear_default()
    }
}

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
#[allow(clippy::needless_range_loop)]
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let p = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, p);
        b.swap(col, p);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x
}

#[test]
fn head_only_mse_training_reaches_the_least_squares_probe() {
    let data = mixture(3, 4, 40, 1, 1);
    let (input, hidden, k) = (4, 5, 3);
    let spec = NetworkSpec::mlp(input, &[hidden], k, Activation::Relu).unwrap();
    let base = Arc::new(BaseModel::init(spec, 1));
    let w = base.weights().as_slice();

    // Hidden features computed by hand from the first layer, plus a constant.
    let features = |x: &[f64]| -> Vec<f64> {
        let mut phi: Vec<f64> = (0..hidden)
            .map(|j| {
                let z: f64 = (0..input).map(|i| w[j * input + i] * x[i]).sum::<f64>()
                    + w[hidden * input + j];
                z.max(0.0)
            })
            .collect();
        phi.push(1.0);
        phi
    };
    // Per class, regress the residual target against the features.
    let m = hidden + 1;
    let mut oracle_loss = 0.0;
    for c in 0..k {
        let mut ata = vec![vec![0.0; m]; m];
        let mut atb = vec![0.0; m];
        let rows: Vec<(Vec<f64>, f64)> = (0..data.len())
            .map(|i| {
                let (x, y) = data.sample(i);
                let target = if y == c { 1.0 } else { 0.0 };
                (features(x), target - base.forward(x).unwrap()[c])
            })
            .collect();
        for (phi, r) in &rows {
            for a in 0..m {
                atb[a] += phi[a] * r;
                for b in 0..m {
                    ata[a][b] += phi[a] * phi[b];
                }
            }
        }
        let beta = solve(ata, atb);
        for (phi, r) in &rows {
            let fit: f64 = phi.iter().zip(&beta).map(|(p, b)| p * b).sum();
            oracle_loss += (fit - r) * (fit - r);
        }
    }
    oracle_loss /= (data.len() * k) as f64;

    let cfg = TrainConfig {
        epochs: 3000,
        batch_size: data.len(),
        seed: 1,
        loss: LossSpec::Mse,
        optimizer: OptimizerSpec::adam(0.05).with_schedule(vec![(2000, 0.1), (2600, 0.1)]),
        head_only: true,
        ..TrainConfig::tangent_default(1.0)
    };
    let out = train_tangent(&base, &data, &cfg, None).unwrap();
    let head = base.spec().head_range();
    assert!(out.model.delta().as_slice()[..head.start]
        .iter()
        .all(|&v| v == 0.0));
    let gap = out.report.final_loss - oracle_loss;
    assert!(
        gap > -1e-9 && gap < 1e-6,
        "trained {} vs least squares {oracle_loss}",
        out.report.final_loss
    );
}

#[test]
fn training_leaves_the_anchor_untouched() {
    let (base, b) = bench(Protocol::ClassIncremental, 2, 2);
    let before = base.weights().clone();
    let fp = base.fingerprint();
    let _ = run_tmc(&b, &base, &tangent_cfg(2), TmcOptions::default()).unwrap();
    let _ = train_nonlinear(&base, &b.train.tasks[0].data, &nonlinear_cfg(2)).unwrap();
    assert_eq!(base.weights(), &before);
    assert_eq!(base.fingerprint(), fp);
}

#[test]
fn single_task_composition_is_the_component() {
    let (base, b) = bench(Protocol::ClassIncremental, 1, 3);
    let cfg = tangent_cfg(3);
    let run = run_tmc(&b, &base, &cfg, TmcOptions::default()).unwrap();
    let direct = train_tangent(
        &base,
        &b.train.tasks[0].data,
        &TrainConfig {
            seed: task_seed(cfg.seed, 0),
            ..cfg
        },
        None,
    )
    .unwrap();
    assert_eq!(run.composed.delta(), direct.model.delta());
    assert_eq!(run.composed.task_count(), 1);
    assert_eq!(
        run.result.accuracy_after_task,
        run.result.component_accuracy
    );
}

#[test]
fn default_run_holds_at_most_two_deltas() {
    let (base, b) = bench(Protocol::ClassIncremental, 3, 4);
    let cfg = tangent_cfg(4);
    let plain = run_tmc(&b, &base, &cfg, TmcOptions::default()).unwrap();
    assert!(
        plain.result.peak_live_deltas <= 2,
        "peak {}",
        plain.result.peak_live_deltas
    );
    assert!(plain.composed.component_log().is_none());
    let seq = run_tmc_seq(&b, &base, &cfg, false).unwrap();
    assert!(seq.result.peak_live_deltas <= 2);
    let logged = run_tmc(
        &b,
        &base,
        &cfg,
        TmcOptions {
            parallel: false,
            retain_log: true,
        },
    )
    .unwrap();
    assert_eq!(logged.composed.task_ids().unwrap(), vec![1, 2, 3]);
    assert_eq!(logged.composed.delta(), plain.composed.delta());
}

#[test]
fn parallel_and_sequential_runs_agree_bitwise() {
    let (base, b) = bench(Protocol::DataIncremental, 3, 5);
    let cfg = tangent_cfg(5);
    let par = run_tmc(
        &b,
        &base,
        &cfg,
        TmcOptions {
            parallel: true,
            retain_log: true,
        },
    )
    .unwrap();
    let seq = run_tmc(
        &b,
        &base,
        &cfg,
        TmcOptions {
            parallel: false,
            retain_log: true,
        },
    )
    .unwrap();
    let bits = |m: &TangentModel| {
        m.delta()
            .as_slice()
            .iter()
            .map(|v| v.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(bits(&par.composed), bits(&seq.composed));
    assert_eq!(
        par.result.accuracy_after_task,
        seq.result.accuracy_after_task
    );
}

#[test]
fn head_only_composition_stays_in_the_head() {
    let (base, b) = bench(Protocol::ClassIncremental, 3, 6);
    let run = run_tmc_fc(&b, &base, &tangent_cfg(6), TmcOptions::default()).unwrap();
    let head = base.spec().head_range();
    assert!(run.composed.delta().as_slice()[..head.start]
        .iter()
        .all(|&v| v == 0.0));
    assert!(run.composed.delta().as_slice()[head]
        .iter()
        .any(|&v| v != 0.0));
    assert_eq!(run.result.method, Method::TmcFc);
}

#[test]
fn tme_is_the_softmax_ensemble_of_tangent_components() {
    let (base, b) = bench(Protocol::ClassIncremental, 3, 7);
    let cfg = tangent_cfg(7);
    let run = run_tme(&b, &base, &cfg).unwrap();
    let members: Vec<TangentModel> = (0..3)
        .map(|t| {
            let c = TrainConfig {
                seed: task_seed(cfg.seed, t),
                ..cfg.clone()
            };
            train_tangent(&base, &b.train.tasks[t].data, &c, None)
                .unwrap()
                .model
        })
        .collect();
    let ens = Ensemble::new(
        ModelCollection::uniform(Members::Tangent(members)).unwrap(),
        EnsembleMode::Softmax,
    )
    .unwrap();
    assert_eq!(run.final_accuracy(), seen_accuracy(&b, &ens, 2).unwrap());
}

#[test]
fn soup_of_identical_members_is_that_member() {
    let (base, b) = bench(Protocol::ClassIncremental, 2, 8);
    let m = train_nonlinear(&base, &b.train.tasks[0].data, &nonlinear_cfg(8))
        .unwrap()
        .model;
    let s = soup(&[&m, &m, &m], &[0.2, 0.3, 0.5]).unwrap();
    assert!(s.weights().max_abs_diff(m.weights()).unwrap() < 1e-12);
}

#[test]
fn nonlinear_family_shares_components() {
    let (base, b) = bench(Protocol::ClassIncremental, 2, 9);
    let cfg = nonlinear_cfg(9);
    let runs = run_nonlinear_family(
        &b,
        &base,
        &cfg,
        &[Method::Soup, Method::EnsLogit, Method::EnsSoftmax],
    )
    .unwrap();
    assert_eq!(runs.len(), 3);
    assert!(runs
        .windows(2)
        .all(|w| w[0].component_accuracy == w[1].component_accuracy));
    // One member: every combination is the member itself.
    assert_eq!(
        runs[0].accuracy_after_task[0],
        runs[1].accuracy_after_task[0]
    );
    assert_eq!(
        runs[1].accuracy_after_task[0],
        runs[2].accuracy_after_task[0]
    );
    assert!(run_nonlinear_family(&b, &base, &cfg, &[Method::Tmc]).is_err());
    let single = run_baseline(&b, &base, Method::EnsLogit, &tangent_cfg(9), &cfg).unwrap();
    assert_eq!(single.final_accuracy(), runs[1].final_accuracy());
}

#[test]
fn naive_sequential_fine_tuning_forgets_the_first_task() {
    let (base, b) = bench(Protocol::ClassIncremental, 2, 10);
    let cfg = nonlinear_cfg(10);
    let first = train_nonlinear(
        &base,
        &b.train.tasks[0].data,
        &TrainConfig {
            seed: task_seed(10, 0),
            ..cfg.clone()
        },
    )
    .unwrap()
    .model;
    let before = task_accuracy(&b, &first, 0).unwrap();
    let second = train_nonlinear(
        &first,
        &b.train.tasks[1].data,
        &TrainConfig {
            seed: task_seed(10, 1),
            ..cfg.clone()
        },
    )
    .unwrap()
    .model;
    let after = task_accuracy(&b, &second, 0).unwrap();
    assert!(before > 0.9, "first task only reached {before}");
    assert!(
        after < before - 0.5,
        "accuracy on the first task went {before} -> {after}"
    );

    let run = run_naive_seq(&b, &base, &cfg).unwrap();
    assert_eq!(run.component_accuracy[0], before);
    assert!(run.final_accuracy() < 0.75);
}

#[test]
fn task_incremental_evaluation_is_restricted() {
    let (base, b) = bench(Protocol::TaskIncremental, 3, 11);
    // A constant predictor favouring class 0 scores chance within each task.
    let zero = BaseModel::new(
        base.spec().clone(),
        ParamVector::zeros(base.spec().param_count()),
    )
    .unwrap();
    let acc = seen_accuracy(&b, &zero, 2).unwrap();
    let tasks = &b.test.tasks;
    let expected: f64 = tasks
        .iter()
        .map(|t| {
            t.data
                .labels()
                .iter()
                .filter(|&&l| l == t.classes[0])
                .count() as f64
        })
        .sum::<f64>()
        / tasks.iter().map(|t| t.data.len() as f64).sum::<f64>();
    assert!((acc - expected).abs() < 1e-12, "{acc} vs {expected}");
}

#[test]
fn composed_loss_on_real_components_obeys_jensen() {
    let (base, b) = bench(Protocol::ClassIncremental, 3, 12);
    let cfg = tangent_cfg(12);
    let run = run_tmc(
        &b,
        &base,
        &cfg,
        TmcOptions {
            parallel: false,
            retain_log: true,
        },
    )
    .unwrap();
    let log = run.composed.component_log().unwrap();
    let parts: Vec<&Dataset> = b.train.tasks.iter().map(|t| &t.data).collect();
    let all = Dataset::concat(&parts).unwrap();
    let lhs = tangent_dataset_loss(&base, run.composed.delta(), &all, &cfg.loss).unwrap();
    let rhs: f64 = log
        .iter()
        .map(|r| r.coefficient * tangent_dataset_loss(&base, &r.delta, &all, &cfg.loss).unwrap())
        .sum();
    assert!(lhs <= rhs + 1e-9);
}
