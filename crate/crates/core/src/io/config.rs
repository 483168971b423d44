//! Experiment configuration files (TOML).
//!
//! Relative paths inside a config file resolve against the file's own
//! directory. The seed list, job count and output directory can be replaced
//! through `TMC_SEED`, `TMC_JOBS` and `TMC_OUT`; command-line flags win over
//! those.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tabular::CsvSchema;
use crate::continual::{Method, Protocol};
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::loss::LossSpec;
use crate::net::Activation;
use crate::train::{OptimizerKind, OptimizerSpec, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic {
        #[serde(flatten)]
        generator: SyntheticSpec,
        test_samples_per_class: usize,
        /// Seed for the class structure; defaults to the run seed.
        #[serde(default)]
        seed: Option<u64>,
    },
    Csv {
        train: PathBuf,
        test: PathBuf,
        #[serde(flatten)]
        schema: CsvSchema,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainSplit {
    /// Extra synthetic classes that never appear in any task.
    DisjointClasses,
    /// Fresh samples of the task classes (synthetic) or a held-out slice of
    /// the training table (CSV).
    #[default]
    DisjointSamples,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default)]
    pub split: PretrainSplit,
    /// Number of extra classes for `disjoint_classes`.
    #[serde(default)]
    pub extra_classes: Option<usize>,
    /// Per-class sample count of synthetic pre-training data (defaults to the task data's).
    #[serde(default)]
    pub samples_per_class: Option<usize>,
    /// Fraction of CSV training rows held out for pre-training.
    #[serde(default)]
    pub fraction: Option<f64>,
    #[serde(default)]
    pub train: TrainOverrides,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub hidden: Vec<usize>,
    #[serde(default = "relu")]
    pub activation: ActivationName,
    #[serde(default)]
    pub slope: Option<f64>,
}

fn relu() -> ActivationName {
    ActivationName::Relu
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationName {
    Relu,
    LeakyRelu,
}

impl NetworkConfig {
    pub fn activation(&self) -> Result<Activation> {
        match (self.activation, self.slope) {
            (ActivationName::Relu, None) => Ok(Activation::Relu),
            (ActivationName::Relu, Some(_)) => {
                Err(Error::config("network.slope", "only applies to leaky_relu"))
            }
            (ActivationName::LeakyRelu, s) => Ok(Activation::LeakyRelu {
                slope: s.unwrap_or(0.01),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    CrossEntropy,
    Mse,
    Rsl,
}

/// Partial training settings layered over a default [`TrainConfig`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub optimizer: Option<OptimizerName>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub schedule: Option<Vec<(usize, f64)>>,
    pub loss: Option<LossName>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub head_only: Option<bool>,
}

impl TrainOverrides {
    pub fn apply(&self, mut cfg: TrainConfig, field: &str) -> Result<TrainConfig> {
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(o) = self.optimizer {
            let same = matches!(
                (o, cfg.optimizer.kind),
                (OptimizerName::Adam, OptimizerKind::Adam { .. })
                    | (OptimizerName::Sgd, OptimizerKind::Sgd { .. })
            );
            if !same {
                let lr = cfg.optimizer.learning_rate;
                let schedule = cfg.optimizer.schedule.clone();
                cfg.optimizer = match o {
                    OptimizerName::Adam => OptimizerSpec::adam(lr),
                    OptimizerName::Sgd => OptimizerSpec::sgd(lr, 0.9),
                }
                .with_schedule(schedule);
            }
        }
        if let Some(lr) = self.learning_rate {
            cfg.optimizer.learning_rate = lr;
        }
        if let Some(m) = self.momentum {
            match &mut cfg.optimizer.kind {
                OptimizerKind::Sgd { momentum } => *momentum = m,
                OptimizerKind::Adam { .. } => {
                    return Err(Error::config(
                        format!("{field}.momentum"),
                        "only applies to sgd",
                    ));
                }
            }
        }
        if let Some(s) = &self.schedule {
            cfg.optimizer.schedule = s.clone();
        }
        if let Some(l) = self.loss {
            cfg.loss = match (l, cfg.loss) {
                (LossName::CrossEntropy, _) => LossSpec::CrossEntropy,
                (LossName::Mse, _) => LossSpec::Mse,
                (LossName::Rsl, keep @ LossSpec::Rsl { .. }) => keep,
                (LossName::Rsl, _) => LossSpec::Rsl {
                    alpha: 1.0,
                    beta: 1.0,
                },
            };
        }
        if self.alpha.is_some() || self.beta.is_some() {
            match &mut cfg.loss {
                LossSpec::Rsl { alpha, beta } => {
                    *alpha = self.alpha.unwrap_or(*alpha);
                    *beta = self.beta.unwrap_or(*beta);
                }
                _ => {
                    return Err(Error::config(
                        format!("{field}.beta"),
                        "alpha and beta only apply to the rsl loss",
                    ))
                }
            }
        }
        if let Some(h) = self.head_only {
            cfg.head_only = h;
        }
        cfg.validate(field)?;
        Ok(cfg)
    }
}

/// Per-family and per-method training settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSections {
    /// Shared by tmc, tmc_seq, tmc_fc and tme.
    #[serde(default)]
    pub tangent: TrainOverrides,
    /// Shared by soup, ens_logit, ens_softmax and naive_seq.
    #[serde(default)]
    pub nonlinear: TrainOverrides,
    #[serde(default)]
    pub tmc: TrainOverrides,
    #[serde(default)]
    pub tmc_seq: TrainOverrides,
    #[serde(default)]
    pub tmc_fc: TrainOverrides,
    #[serde(default)]
    pub tme: TrainOverrides,
    #[serde(default)]
    pub soup: TrainOverrides,
    #[serde(default)]
    pub ens_logit: TrainOverrides,
    #[serde(default)]
    pub ens_softmax: TrainOverrides,
    #[serde(default)]
    pub naive_seq: TrainOverrides,
}

impl TrainSections {
    fn method(&self, m: Method) -> &TrainOverrides {
        match m {
            Method::Tmc => &self.tmc,
            Method::TmcSeq => &self.tmc_seq,
            Method::TmcFc => &self.tmc_fc,
            Method::Tme => &self.tme,
            Method::Soup => &self.soup,
            Method::EnsLogit => &self.ens_logit,
            Method::EnsSoftmax => &self.ens_softmax,
            Method::NaiveSeq => &self.naive_seq,
        }
    }

    /// Built-in defaults, then the family section, then the method section.
    /// Tangent methods default to the rescaled square loss with the
    /// protocol's target value (5 for tme); the rest to cross-entropy.
    pub fn resolve(&self, method: Method, protocol: Protocol) -> Result<TrainConfig> {
        let field = format!("train.{}", method.name());
        let (default, family, family_name) = if method.is_tangent() {
            let beta = if method == Method::Tme {
                5.0
            } else {
                protocol.default_beta()
            };
            (
                TrainConfig::tangent_default(beta),
                &self.tangent,
                "train.tangent",
            )
        } else {
            (
                TrainConfig::nonlinear_default(),
                &self.nonlinear,
                "train.nonlinear",
            )
        };
        let cfg = family.apply(default, family_name)?;
        self.method(method).apply(cfg, &field)
    }
}

fn one_job() -> usize {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub protocols: Vec<Protocol>,
    pub num_tasks: usize,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    #[serde(default = "one_job")]
    pub jobs: usize,
    /// Train tmc / tmc_fc components concurrently inside each run.
    #[serde(default)]
    pub parallel_tasks: bool,
    /// Fill the timing columns of the results table. Timings vary between
    /// runs, so the table is then no longer reproducible byte for byte.
    #[serde(default)]
    pub record_timing: bool,
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    pub dataset: DatasetSource,
    pub network: NetworkConfig,
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub train: TrainSections,
}

/// Values supplied on the command line; each wins over its `TMC_*` variable.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

impl Overrides {
    /// Fills unset fields from `TMC_SEED`, `TMC_JOBS` and `TMC_OUT`.
    pub fn with_env(mut self) -> Result<Self> {
        self.with_vars(|k| std::env::var(k).ok())?;
        Ok(self)
    }

    pub fn with_vars(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<()> {
        if self.seed.is_none() {
            if let Some(v) = get("TMC_SEED") {
                self.seed = Some(
                    v.trim()
                        .parse()
                        .map_err(|_| Error::config("TMC_SEED", format!("{v:?} is not a seed")))?,
                );
            }
        }
        if self.jobs.is_none() {
            if let Some(v) = get("TMC_JOBS") {
                self.jobs = Some(
                    v.trim()
                        .parse()
                        .map_err(|_| Error::config("TMC_JOBS", format!("{v:?} is not a count")))?,
                );
            }
        }
        if self.output_dir.is_none() {
            if let Some(v) = get("TMC_OUT") {
                self.output_dir = Some(PathBuf::from(v));
            }
        }
        Ok(())
    }
}

fn toml_error(path: String, e: toml::de::Error) -> Error {
    let field = if path.is_empty() || path == "." {
        "<document>".into()
    } else {
        path
    };
    Error::config(field, e.message().trim().to_string())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| toml_error(String::new(), e))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            toml_error(path, e.into_inner())
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads, resolves relative paths against the file's directory, and validates.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let dir = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(dir);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        if let DatasetSource::Csv { train, test, .. } = &mut self.dataset {
            *train = dir.join(&*train);
            *test = dir.join(&*test);
        }
        self.output_dir = dir.join(&self.output_dir);
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seeds = vec![s];
        }
        if let Some(j) = o.jobs {
            self.jobs = j;
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
    }

    /// Checks everything that can be checked without training, including
    /// every resolved per-method training configuration.
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::config(f, m));
        if self.protocols.is_empty() {
            return bad("protocols", "at least one protocol is required");
        }
        if self.methods.is_empty() {
            return bad("methods", "at least one method is required");
        }
        if self.seeds.is_empty() {
            return bad("seeds", "at least one seed is required");
        }
        if self.num_tasks == 0 {
            return bad("num_tasks", "must be at least 1");
        }
        if self.jobs == 0 {
            return bad("jobs", "must be at least 1");
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return bad("methods", &format!("{} listed twice", m.name()));
            }
        }
        for (i, p) in self.protocols.iter().enumerate() {
            if self.protocols[..i].contains(p) {
                return bad("protocols", &format!("{} listed twice", p.name()));
            }
        }
        let classes = match &self.dataset {
            DatasetSource::Synthetic {
                generator,
                test_samples_per_class,
                ..
            } => {
                generator.validate()?;
                if *test_samples_per_class == 0 {
                    return bad("dataset.test_samples_per_class", "must be positive");
                }
                Some(generator.classes())
            }
            DatasetSource::Csv {
                train,
                test,
                schema,
            } => {
                for (f, p) in [("dataset.train", train), ("dataset.test", test)] {
                    if !p.is_file() {
                        return Err(Error::config(f, format!("{} does not exist", p.display())));
                    }
                }
                schema.num_classes
            }
        };
        if let Some(k) = classes {
            let class_split = self
                .protocols
                .iter()
                .any(|p| *p != Protocol::DataIncremental);
            if class_split && self.num_tasks > k {
                return bad(
                    "num_tasks",
                    &format!("{} tasks cannot split {k} classes", self.num_tasks),
                );
            }
        }
        if self.network.hidden.contains(&0) {
            return bad("network.hidden", "layer widths must be positive");
        }
        self.network.activation()?;
        if let Activation::LeakyRelu { slope } = self.network.activation()? {
            if !(slope > 0.0 && slope < 1.0) {
                return bad("network.slope", "must lie in (0, 1)");
            }
        }
        match (self.pretrain.split, &self.dataset) {
            (PretrainSplit::DisjointClasses, DatasetSource::Csv { .. }) => {
                return bad(
                    "pretrain.split",
                    "disjoint_classes needs a synthetic dataset",
                );
            }
            (PretrainSplit::DisjointClasses, _) => {
                if self.pretrain.extra_classes.unwrap_or(0) < 2 {
                    return bad(
                        "pretrain.extra_classes",
                        "disjoint_classes needs at least two extra classes",
                    );
                }
            }
            (PretrainSplit::DisjointSamples, DatasetSource::Csv { .. }) => {
                let f = self.pretrain.fraction.unwrap_or(0.0);
                if !(f > 0.0 && f < 1.0) {
                    return bad("pretrain.fraction", "must lie in (0, 1)");
                }
            }
            (PretrainSplit::DisjointSamples, _) => {}
        }
        if self.pretrain.samples_per_class == Some(0) {
            return bad("pretrain.samples_per_class", "must be positive");
        }
        self.pretrain
            .train
            .apply(TrainConfig::nonlinear_default(), "pretrain.train")?;
        for &p in &self.protocols {
            for &m in &self.methods {
                self.train.resolve(m, p)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "toy"
protocols = ["class_incremental"]
num_tasks = 2
methods = ["tmc", "naive_seq"]
seeds = [1, 2]

[dataset]
source = "synthetic"
kind = "gaussian_mixture"
classes = 4
dim = 3
samples_per_class = 10
noise = 0.5
separation = 3.0
test_samples_per_class = 5

[network]
hidden = [8]

[pretrain]
split = "disjoint_samples"

[train.tangent]
epochs = 3
beta = 10.0
"#;

    #[test]
    fn parses_and_resolves() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.jobs, 1);
        assert!(!cfg.record_timing);
        let t = cfg
            .train
            .resolve(Method::Tmc, Protocol::ClassIncremental)
            .unwrap();
        assert_eq!(t.epochs, 3);
        assert_eq!(
            t.loss,
            LossSpec::Rsl {
                alpha: 1.0,
                beta: 10.0
            }
        );
        let n = cfg
            .train
            .resolve(Method::NaiveSeq, Protocol::ClassIncremental)
            .unwrap();
        assert_eq!(n, TrainConfig::nonlinear_default());
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn protocol_and_method_defaults() {
        let s = TrainSections::default();
        let beta = |m, p| match s.resolve(m, p).unwrap().loss {
            LossSpec::Rsl { beta, .. } => beta,
            other => panic!("{other:?}"),
        };
        assert_eq!(beta(Method::Tmc, Protocol::ClassIncremental), 25.0);
        assert_eq!(beta(Method::Tmc, Protocol::TaskIncremental), 25.0);
        assert_eq!(beta(Method::TmcSeq, Protocol::DataIncremental), 5.0);
        assert_eq!(beta(Method::Tme, Protocol::ClassIncremental), 5.0);
    }

    #[test]
    fn nonpositive_beta_is_a_field_error() {
        let text = MINIMAL.replace("beta = 10.0", "beta = 0.0");
        let err = ExperimentConfig::from_toml(&text)
            .unwrap()
            .validate()
            .unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "train.tangent.loss.beta"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_and_bad_values() {
        assert!(matches!(
            ExperimentConfig::from_toml(
                &MINIMAL.replace("num_tasks = 2", "num_tasks = 2\nbogus = 1")
            ),
            Err(Error::Config { .. })
        ));
        let cases = [
            ("num_tasks = 2", "num_tasks = 5", "num_tasks"),
            ("seeds = [1, 2]", "seeds = []", "seeds"),
            ("hidden = [8]", "hidden = [0]", "network.hidden"),
            ("epochs = 3", "epochs = 0", "train.tangent.epochs"),
            (
                "methods = [\"tmc\", \"naive_seq\"]",
                "methods = [\"tmc\", \"tmc\"]",
                "methods",
            ),
        ];
        for (from, to, field) in cases {
            let err = ExperimentConfig::from_toml(&MINIMAL.replace(from, to))
                .and_then(|c| c.validate())
                .unwrap_err();
            match err {
                Error::Config { field: f, .. } => assert_eq!(f, field, "{to}"),
                other => panic!("{to}: {other:?}"),
            }
        }
        let err = ExperimentConfig::from_toml(
            &MINIMAL.replace("epochs = 3", "epochs = 3\nmomentum = 0.5"),
        )
        .unwrap()
        .validate()
        .unwrap_err();
        assert!(matches!(err, Error::Config { field, .. } if field == "train.tangent.momentum"));
    }

    #[test]
    fn overrides_precedence() {
        let env = |k: &str| match k {
            "TMC_SEED" => Some("9".to_string()),
            "TMC_JOBS" => Some("3".to_string()),
            "TMC_OUT" => Some("/tmp/env".to_string()),
            _ => None,
        };
        let mut o = Overrides {
            seed: Some(4),
            ..Overrides::default()
        };
        o.with_vars(env).unwrap();
        assert_eq!(o.seed, Some(4));
        assert_eq!(o.jobs, Some(3));
        assert_eq!(o.output_dir, Some(PathBuf::from("/tmp/env")));
        let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        cfg.apply(&o);
        assert_eq!(cfg.seeds, vec![4]);
        assert_eq!(cfg.jobs, 3);

        let mut bad = Overrides::default();
        assert!(bad
            .with_vars(|k| (k == "TMC_JOBS").then(|| "many".to_string()))
            .is_err());
    }

    #[test]
    fn missing_csv_paths_rejected() {
        let text = MINIMAL.replace(
            "source = \"synthetic\"\nkind = \"gaussian_mixture\"\nclasses = 4\ndim = 3\nsamples_per_class = 10\nnoise = 0.5\nseparation = 3.0\ntest_samples_per_class = 5",
            "source = \"csv\"\ntrain = \"/nonexistent/a.csv\"\ntest = \"/nonexistent/b.csv\"",
        );
        let text = text.replace(
            "split = \"disjoint_samples\"",
            "split = \"disjoint_samples\"\nfraction = 0.2",
        );
        let err = ExperimentConfig::from_toml(&text)
            .unwrap()
            .validate()
            .unwrap_err();
        assert!(matches!(err, Error::Config { field, .. } if field == "dataset.train"));
    }
}
