//! In-memory labelled datasets and seeded synthetic generators.

use std::cell::Cell;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

thread_local! {
    static SAMPLE_READS: Cell<u64> = const { Cell::new(0) };
}

/// Number of samples read through [`Dataset::sample`] on the current thread.
pub fn sample_reads() -> u64 {
    SAMPLE_READS.with(Cell::get)
}

/// Fixed-dimension feature vectors with class labels, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    dim: usize,
    num_classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    class_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(
        dim: usize,
        num_classes: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Data("feature dimension must be positive".into()));
        }
        if features.len() != dim * labels.len() {
            return Err(Error::Data(format!(
                "{} feature values for {} samples of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(Self {
            dim,
            num_classes,
            features,
            labels,
            class_names: None,
        })
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.num_classes {
            return Err(Error::Data(format!(
                "{} class names for {} classes",
                names.len(),
                self.num_classes
            )));
        }
        self.class_names = Some(names);
        Ok(self)
    }

    pub fn empty(dim: usize, num_classes: usize) -> Self {
        Self {
            dim,
            num_classes,
            features: Vec::new(),
            labels: Vec::new(),
            class_names: None,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    /// Features and label of sample `i`. Every call counts as one data read.
    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        SAMPLE_READS.with(|c| c.set(c.get() + 1));
        (
            &self.features[i * self.dim..(i + 1) * self.dim],
            self.labels[i],
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(&self.features[i * self.dim..(i + 1) * self.dim]);
            labels.push(self.labels[i]);
        }
        Dataset {
            features,
            labels,
            ..self.shell()
        }
    }

    /// Samples whose label is in `classes`, original order preserved.
    pub fn filter_classes(&self, classes: &[usize]) -> Dataset {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        self.subset(&idx)
    }

    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or(Error::Empty("dataset list"))?;
        let mut out = first.shell();
        for p in parts {
            if p.dim != out.dim || p.num_classes != out.num_classes {
                return Err(Error::Data(
                    "cannot concatenate datasets of different shapes".into(),
                ));
            }
            out.features.extend_from_slice(&p.features);
            out.labels.extend_from_slice(&p.labels);
        }
        Ok(out)
    }

    /// Same samples with labels remapped through `map` into `num_classes` classes.
    pub fn relabel(&self, map: &[usize], num_classes: usize) -> Result<Dataset> {
        let labels = self.labels.iter().map(|&l| map[l]).collect();
        Dataset::new(self.dim, num_classes, self.features.clone(), labels)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn raw_features(&self) -> &[f64] {
        &self.features
    }

    fn shell(&self) -> Dataset {
        Dataset {
            dim: self.dim,
            num_classes: self.num_classes,
            features: Vec::new(),
            labels: Vec::new(),
            class_names: self.class_names.clone(),
        }
    }
}

/// Per-column affine standardization fitted on one split and applied to others.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let n = data.len() as f64;
        let d = data.dim;
        let mut mean = vec![0.0; d];
        for row in data.features.chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in data.features.chunks(d) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        // constant columns are only centred
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        if data.dim != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                found: data.dim,
            });
        }
        let mut out = data.clone();
        for row in out.features.chunks_mut(data.dim) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

/// Parameters of the seeded synthetic benchmark families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SyntheticSpec {
    /// Isotropic Gaussian blobs. Each class owns `modes_per_class` centres
    /// drawn with per-coordinate scale `separation / sqrt(dim)`; samples add
    /// per-coordinate noise of standard deviation `noise`.
    GaussianMixture {
        classes: usize,
        dim: usize,
        samples_per_class: usize,
        noise: f64,
        separation: f64,
        #[serde(default = "one")]
        modes_per_class: usize,
    },
    /// Interleaved planar spirals, one arm per class, in the first two
    /// coordinates; remaining coordinates carry pure noise.
    TwoSpirals {
        classes: usize,
        dim: usize,
        samples_per_class: usize,
        noise: f64,
        #[serde(default = "one_f64")]
        turns: f64,
    },
}

fn one() -> usize {
    1
}

fn one_f64() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub fn classes(&self) -> usize {
        match *self {
            SyntheticSpec::GaussianMixture { classes, .. }
            | SyntheticSpec::TwoSpirals { classes, .. } => classes,
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            SyntheticSpec::GaussianMixture { dim, .. } | SyntheticSpec::TwoSpirals { dim, .. } => {
                dim
            }
        }
    }

    /// Same generator family with a different class count.
    pub fn with_classes(&self, k: usize) -> SyntheticSpec {
        let mut out = self.clone();
        match &mut out {
            SyntheticSpec::GaussianMixture { classes, .. }
            | SyntheticSpec::TwoSpirals { classes, .. } => *classes = k,
        }
        out
    }

    pub fn samples_per_class(&self) -> usize {
        match *self {
            SyntheticSpec::GaussianMixture {
                samples_per_class, ..
            }
            | SyntheticSpec::TwoSpirals {
                samples_per_class, ..
            } => samples_per_class,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(format!("dataset.{field}"), msg));
        if self.classes() < 2 {
            return bad("classes", "need at least two classes");
        }
        if self.samples_per_class() == 0 {
            return bad("samples_per_class", "must be positive");
        }
        match *self {
            SyntheticSpec::GaussianMixture {
                dim,
                noise,
                separation,
                modes_per_class,
                ..
            } => {
                if dim == 0 {
                    return bad("dim", "must be positive");
                }
                if !(noise.is_finite() && noise >= 0.0) {
                    return bad("noise", "must be finite and nonnegative");
                }
                if !(separation.is_finite() && separation > 0.0) {
                    return bad("separation", "must be positive");
                }
                if modes_per_class == 0 {
                    return bad("modes_per_class", "must be positive");
                }
            }
            SyntheticSpec::TwoSpirals {
                dim, noise, turns, ..
            } => {
                if dim < 2 {
                    return bad("dim", "spirals need at least two dimensions");
                }
                if !(noise.is_finite() && noise >= 0.0) {
                    return bad("noise", "must be finite and nonnegative");
                }
                if !(turns.is_finite() && turns > 0.0) {
                    return bad("turns", "must be positive");
                }
            }
        }
        Ok(())
    }

    /// Draws `samples_per_class` samples per class. The class structure
    /// (blob centres) depends on `seed` only; `sample_seed` drives the
    /// individual draws, so train and test sets can share structure.
    pub fn generate_with(
        &self,
        seed: u64,
        sample_seed: u64,
        samples_per_class: usize,
    ) -> Result<Dataset> {
        self.validate()?;
        let mut sampler = ChaCha8Rng::seed_from_u64(sample_seed);
        match *self {
            SyntheticSpec::GaussianMixture {
                classes,
                dim,
                noise,
                separation,
                modes_per_class,
                ..
            } => {
                let mut structure = ChaCha8Rng::seed_from_u64(seed);
                let centre_dist =
                    Normal::new(0.0, separation / (dim as f64).sqrt()).expect("valid");
                let centres: Vec<Vec<f64>> = (0..classes * modes_per_class)
                    .map(|_| {
                        (0..dim)
                            .map(|_| centre_dist.sample(&mut structure))
                            .collect()
                    })
                    .collect();
                let noise_dist = Normal::new(0.0, noise).expect("valid");
                let mut features = Vec::with_capacity(classes * samples_per_class * dim);
                let mut labels = Vec::with_capacity(classes * samples_per_class);
                for c in 0..classes {
                    for s in 0..samples_per_class {
                        let centre = &centres[c * modes_per_class + s % modes_per_class];
                        features.extend(centre.iter().map(|m| m + noise_dist.sample(&mut sampler)));
                        labels.push(c);
                    }
                }
                Dataset::new(dim, classes, features, labels)
            }
            SyntheticSpec::TwoSpirals {
                classes,
                dim,
                noise,
                turns,
                ..
            } => {
                let noise_dist = Normal::new(0.0, noise).expect("valid");
                let mut features = Vec::with_capacity(classes * samples_per_class * dim);
                let mut labels = Vec::with_capacity(classes * samples_per_class);
                for c in 0..classes {
                    let phase = 2.0 * PI * c as f64 / classes as f64;
                    for _ in 0..samples_per_class {
                        let t: f64 = sampler.random_range(0.1..1.0);
                        let angle = 2.0 * PI * turns * t + phase;
                        features.push(t * angle.cos() + noise_dist.sample(&mut sampler));
                        features.push(t * angle.sin() + noise_dist.sample(&mut sampler));
                        for _ in 2..dim {
                            features.push(noise_dist.sample(&mut sampler));
                        }
                        labels.push(c);
                    }
                }
                Dataset::new(dim, classes, features, labels)
            }
        }
    }
}

/// Balanced, seed-deterministic synthetic dataset.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    spec.generate_with(
        seed,
        seed.wrapping_add(0x9E37_79B9_7F4A_7C15),
        spec.samples_per_class(),
    )
}
