//! Inference latency of composed models versus output ensembles.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::ensemble::{Ensemble, EnsembleMode, Members, ModelCollection, Predictor};
use crate::error::{Error, Result};
use crate::tangent::{compose_many, TangentModel};

/// Seeded standard-normal inputs, `count` rows of width `dim`.
pub fn random_inputs(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median over `repetitions` timed passes through `batch` of the per-sample
/// latency in microseconds. One untimed pass warms caches first.
pub fn median_latency_us(
    predictor: &dyn Predictor,
    batch: &[Vec<f64>],
    repetitions: usize,
) -> Result<f64> {
    if repetitions == 0 {
        return Err(Error::config("repetitions", "must be at least 1"));
    }
    if batch.is_empty() {
        return Err(Error::Empty("latency batch"));
    }
    let mut sink = 0.0;
    let mut pass = || {
        let start = Instant::now();
        for x in batch {
            sink += predictor.scores(x)[0];
        }
        start.elapsed().as_secs_f64() * 1e6 / batch.len() as f64
    };
    pass();
    let times: Vec<f64> = (0..repetitions).map(|_| pass()).collect();
    std::hint::black_box(sink);
    Ok(median(times))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingRow {
    pub members: usize,
    /// One tangent model holding the uniform composition of the members.
    pub composed_us: f64,
    /// Uniform logit ensemble evaluating every member.
    pub ensemble_us: f64,
}

/// Latency of the composition and of the logit ensemble over the first `t`
/// components, for each `t` in `counts`.
pub fn inference_scaling(
    components: &[TangentModel],
    counts: &[usize],
    batch_size: usize,
    repetitions: usize,
    seed: u64,
) -> Result<Vec<ScalingRow>> {
    let first = components.first().ok_or(Error::Empty("component list"))?;
    if let Some(&t) = counts.iter().find(|&&t| t == 0 || t > components.len()) {
        return Err(Error::config(
            "members",
            format!("{t} members requested from {} components", components.len()),
        ));
    }
    let batch = random_inputs(first.base().spec().input_dim(), batch_size, seed);
    counts
        .iter()
        .map(|&t| {
            let members = &components[..t];
            let refs: Vec<&TangentModel> = members.iter().collect();
            let composed = compose_many(&refs, &vec![1.0 / t as f64; t])?;
            let ensemble = Ensemble::new(
                ModelCollection::uniform(Members::Tangent(members.to_vec()))?,
                EnsembleMode::Logits,
            )?;
            Ok(ScalingRow {
                members: t,
                composed_us: median_latency_us(&composed, &batch, repetitions)?,
                ensemble_us: median_latency_us(&ensemble, &batch, repetitions)?,
            })
        })
        .collect()
}
