use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use serde::Serialize;

use tmc_core::continual::{task_accuracy, task_seed, Method, Protocol};
use tmc_core::ensemble::Predictor;
use tmc_core::experiment::{
    benchmark, method_config, prepare_data, run_experiment, setup_seed, write_outputs, SeedSetup,
};
use tmc_core::io::checkpoint::{
    config_digest, load_base, load_tangent, save_base, save_tangent, CheckpointMeta,
};
use tmc_core::io::{ExperimentConfig, Overrides};
use tmc_core::latency::inference_scaling;
use tmc_core::train::{train_tangent, InitMode, TrainConfig};
use tmc_core::{compose_many, BaseModel, Error, Result, TangentModel};

#[derive(Parser, Debug)]
#[command(
    name = "tmc",
    version,
    about = "Train, compose and unlearn tangent models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train an anchor network and write it as a base checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the tangent component of one task.
    TrainTask {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long, value_parser = parse_protocol)]
        protocol: Protocol,
        /// 1-based task index.
        #[arg(long)]
        task: usize,
        #[arg(long, default_value = "tmc", value_parser = parse_method)]
        method: Method,
        /// Start from this tangent checkpoint instead of the anchor.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fold components into one tangent model.
    Compose {
        #[arg(long)]
        base: PathBuf,
        /// Explicit mixing weights; without them components are merged in
        /// order with the uniform running average.
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        components: Vec<PathBuf>,
    },
    /// Remove one task from a composed model.
    Unlearn {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        task: u32,
        /// Keep the remaining coefficients as they are instead of renormalizing.
        #[arg(long)]
        no_rescale: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Accuracy of a model on the test tasks of a configured benchmark.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        base: PathBuf,
        /// Tangent checkpoint; the base network itself when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_parser = parse_protocol)]
        protocol: Protocol,
        /// Evaluate on tasks 1..=upto (all tasks when omitted).
        #[arg(long)]
        upto: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run every configured protocol, method and seed and write the result tables.
    RunExperiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-sample latency of compositions versus logit ensembles.
    BenchInference {
        #[arg(long)]
        base: PathBuf,
        #[arg(long, default_value_t = 100)]
        repetitions: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        /// Member counts to time; defaults to 1 and all components.
        #[arg(long, value_delimiter = ',')]
        members: Option<Vec<usize>>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(required = true)]
        components: Vec<PathBuf>,
    },
}

fn parse_protocol(s: &str) -> std::result::Result<Protocol, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
        .map_err(|_| "expected class_incremental, data_incremental or task_incremental".to_string())
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    Method::ALL
        .into_iter()
        .find(|m| m.name() == s.replace('-', "_"))
        .ok_or_else(|| format!("unknown method {s:?}"))
}

/// Logs the fully resolved inputs of a command before it runs.
fn announce<T: Serialize>(command: &str, resolved: &T) {
    eprintln!(
        "tmc {command}: {}",
        serde_json::to_string(resolved).expect("serializable")
    );
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<(ExperimentConfig, u64)> {
    let mut cfg = ExperimentConfig::load(path)?;
    let o = Overrides {
        seed,
        ..Overrides::default()
    }
    .with_env()?;
    cfg.apply(&o);
    let seed = cfg.seeds[0];
    Ok((cfg, seed))
}

fn meta(cfg: &ExperimentConfig, seed: u64) -> CheckpointMeta {
    CheckpointMeta {
        seed: Some(seed),
        config_digest: Some(config_digest(cfg)),
    }
}

fn setup_with_anchor(cfg: &ExperimentConfig, seed: u64, base: &Path) -> Result<SeedSetup> {
    Ok(SeedSetup {
        seed,
        data: prepare_data(cfg, seed)?,
        anchor: Arc::new(load_base(base)?.0),
    })
}

fn load_anchor(path: &Path) -> Result<Arc<BaseModel>> {
    Ok(Arc::new(load_base(path)?.0))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { config, seed, out } => {
            let (cfg, seed) = load_config(&config, seed)?;
            #[derive(Serialize)]
            struct R<'a> {
                config: &'a Path,
                seed: u64,
                out: &'a Path,
            }
            announce(
                "pretrain",
                &R {
                    config: &config,
                    seed,
                    out: &out,
                },
            );
            let setup = setup_seed(&cfg, seed)?;
            save_base(&out, &setup.anchor, &meta(&cfg, seed))?;
            eprintln!("wrote {} ({})", out.display(), setup.anchor.fingerprint());
        }
        Command::TrainTask {
            config,
            base,
            protocol,
            task,
            method,
            init,
            seed,
            out,
        } => {
            let (cfg, seed) = load_config(&config, seed)?;
            if !matches!(
                method,
                Method::Tmc | Method::TmcSeq | Method::TmcFc | Method::Tme
            ) {
                return Err(Error::config(
                    "method",
                    format!("{} does not train tangent components", method.name()),
                ));
            }
            if task == 0 || task > cfg.num_tasks {
                return Err(Error::config(
                    "task",
                    format!("must lie in 1..={}", cfg.num_tasks),
                ));
            }
            let tc = method_config(&cfg, method, protocol, seed)?;
            let tc = TrainConfig {
                seed: task_seed(tc.seed, task - 1),
                head_only: tc.head_only || method == Method::TmcFc,
                init_mode: if init.is_some() {
                    InitMode::PreviousComposed
                } else {
                    InitMode::AnchorZero
                },
                ..tc
            };
            #[derive(Serialize)]
            struct R<'a> {
                seed: u64,
                protocol: Protocol,
                task: usize,
                method: Method,
                init: Option<&'a Path>,
                train: &'a TrainConfig,
                out: &'a Path,
            }
            announce(
                "train-task",
                &R {
                    seed,
                    protocol,
                    task,
                    method,
                    init: init.as_deref(),
                    train: &tc,
                    out: &out,
                },
            );
            let setup = setup_with_anchor(&cfg, seed, &base)?;
            let bench = benchmark(&cfg, &setup, protocol)?;
            let start = match &init {
                Some(p) => Some(load_tangent(p, &setup.anchor)?.0),
                None => None,
            };
            let trained = train_tangent(
                &setup.anchor,
                &bench.train.tasks[task - 1].data,
                &tc,
                start.as_ref().map(|m| m.delta()),
            )?;
            let component = trained.model.tracked(task as u32);
            eprintln!(
                "task {task}: loss {:.6} -> {:.6}, accuracy {:.4}",
                trained.report.initial_loss,
                trained.report.final_loss,
                task_accuracy(&bench, &component, task - 1)?
            );
            save_tangent(
                &out,
                &component,
                &CheckpointMeta {
                    seed: Some(tc.seed),
                    config_digest: Some(config_digest(&tc)),
                },
            )?;
        }
        Command::Compose {
            base,
            weights,
            out,
            components,
        } => {
            #[derive(Serialize)]
            struct R<'a> {
                base: &'a Path,
                weights: &'a Option<Vec<f64>>,
                components: &'a [PathBuf],
                out: &'a Path,
            }
            announce(
                "compose",
                &R {
                    base: &base,
                    weights: &weights,
                    components: &components,
                    out: &out,
                },
            );
            let anchor = load_anchor(&base)?;
            let parts: Vec<TangentModel> = components
                .iter()
                .map(|p| load_tangent(p, &anchor).map(|(m, _)| m))
                .collect::<Result<_>>()?;
            let composed = match &weights {
                Some(w) => {
                    let refs: Vec<&TangentModel> = parts.iter().collect();
                    compose_many(&refs, w)?
                }
                None => {
                    let tracked = parts.iter().all(|p| p.component_log().is_some());
                    let mut running = if tracked {
                        TangentModel::at_anchor_tracked(Arc::clone(&anchor))
                    } else {
                        TangentModel::at_anchor(Arc::clone(&anchor))
                    };
                    for p in &parts {
                        running = running.absorb_next(p)?;
                    }
                    running
                }
            };
            save_tangent(&out, &composed, &CheckpointMeta::default())?;
            eprintln!(
                "composed {} components ({} tasks) into {}",
                parts.len(),
                composed.task_count(),
                out.display()
            );
        }
        Command::Unlearn {
            base,
            model,
            task,
            no_rescale,
            out,
        } => {
            #[derive(Serialize)]
            struct R<'a> {
                base: &'a Path,
                model: &'a Path,
                task: u32,
                rescale: bool,
                out: &'a Path,
            }
            announce(
                "unlearn",
                &R {
                    base: &base,
                    model: &model,
                    task,
                    rescale: !no_rescale,
                    out: &out,
                },
            );
            let anchor = load_anchor(&base)?;
            let (composed, m) = load_tangent(&model, &anchor)?;
            let removed = composed.unlearn(task, !no_rescale)?;
            save_tangent(&out, &removed, &m)?;
            eprintln!("removed task {task}; {} tasks remain", removed.task_count());
        }
        Command::Eval {
            config,
            base,
            model,
            protocol,
            upto,
            seed,
        } => {
            let (cfg, seed) = load_config(&config, seed)?;
            let upto = upto.unwrap_or(cfg.num_tasks);
            if upto == 0 || upto > cfg.num_tasks {
                return Err(Error::config(
                    "upto",
                    format!("must lie in 1..={}", cfg.num_tasks),
                ));
            }
            #[derive(Serialize)]
            struct R<'a> {
                seed: u64,
                protocol: Protocol,
                model: Option<&'a Path>,
                upto: usize,
            }
            announce(
                "eval",
                &R {
                    seed,
                    protocol,
                    model: model.as_deref(),
                    upto,
                },
            );
            let setup = setup_with_anchor(&cfg, seed, &base)?;
            let bench = benchmark(&cfg, &setup, protocol)?;
            let tangent = match &model {
                Some(p) => Some(load_tangent(p, &setup.anchor)?.0),
                None => None,
            };
            let predictor: &dyn Predictor = match &tangent {
                Some(t) => t,
                None => setup.anchor.as_ref(),
            };
            let accuracy = tmc_core::continual::seen_accuracy(&bench, predictor, upto - 1)?;
            let per_task = (0..upto)
                .map(|t| task_accuracy(&bench, predictor, t))
                .collect::<Result<Vec<_>>>()?;
            #[derive(Serialize)]
            struct Report {
                accuracy: f64,
                per_task: Vec<f64>,
            }
            println!(
                "{}",
                serde_json::to_string(&Report { accuracy, per_task }).expect("serializable")
            );
        }
        Command::RunExperiment {
            config,
            seed,
            jobs,
            out,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            let o = Overrides {
                seed,
                jobs,
                output_dir: out,
            }
            .with_env()?;
            cfg.apply(&o);
            cfg.validate()?;
            eprintln!("tmc run-experiment: resolved config\n{}", cfg.to_toml());
            let progress = |msg: &str| eprintln!("{msg}");
            let results = run_experiment(&cfg, Some(&progress))?;
            write_outputs(&results, &cfg.output_dir)?;
            eprintln!(
                "wrote {} result rows to {}",
                results.results.len(),
                cfg.output_dir.display()
            );
        }
        Command::BenchInference {
            base,
            repetitions,
            batch,
            members,
            seed,
            components,
        } => {
            let seed = Overrides {
                seed,
                ..Overrides::default()
            }
            .with_env()?
            .seed
            .unwrap_or(0);
            let members = members.unwrap_or_else(|| {
                let mut v = vec![1, components.len()];
                v.dedup();
                v
            });
            #[derive(Serialize)]
            struct R<'a> {
                repetitions: usize,
                batch: usize,
                members: &'a [usize],
                seed: u64,
                components: &'a [PathBuf],
            }
            announce(
                "bench-inference",
                &R {
                    repetitions,
                    batch,
                    members: &members,
                    seed,
                    components: &components,
                },
            );
            if repetitions == 0 {
                return Err(Error::config("repetitions", "must be at least 1"));
            }
            if batch == 0 {
                return Err(Error::config("batch", "must be at least 1"));
            }
            let anchor = load_anchor(&base)?;
            let parts: Vec<TangentModel> = components
                .iter()
                .map(|p| load_tangent(p, &anchor).map(|(m, _)| m))
                .collect::<Result<_>>()?;
            for row in inference_scaling(&parts, &members, batch, repetitions, seed)? {
                println!("{}", serde_json::to_string(&row).expect("serializable"));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
