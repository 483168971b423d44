//! Flat parameter vectors.
//!
//! Every network's weights, every tangent delta and every optimizer moment
//! lives in a [`ParamVector`]: a dense, ordered list of `f64` values laid out
//! in the network's canonical order (layer by layer, weights before biases,
//! weights row-major). Composition, unlearning and checkpointing are all
//! plain arithmetic in this space.

use crate::error::{check_dim, Error, Result};

/// Tolerance on the sum of convex weights.
pub const CONVEX_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
        }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        check_dim(self.dim(), other.dim())?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        check_dim(self.dim(), other.dim())?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn scale(&self, c: f64) -> Result<ParamVector> {
        finite_scalar(c)?;
        Ok(Self::from_vec(self.values.iter().map(|v| v * c).collect()))
    }

    /// `c * a + b` in one pass.
    pub fn axpy(c: f64, a: &ParamVector, b: &ParamVector) -> Result<ParamVector> {
        finite_scalar(c)?;
        check_dim(a.dim(), b.dim())?;
        Ok(a.zip_map(b, |x, y| c * x + y))
    }

    /// Weighted sum with arbitrary finite weights.
    pub fn linear_combination(vs: &[&ParamVector], weights: &[f64]) -> Result<ParamVector> {
        let first = vs.first().ok_or(Error::Empty("parameter vector list"))?;
        if vs.len() != weights.len() {
            return Err(Error::InvalidWeights(format!(
                "{} weights for {} vectors",
                weights.len(),
                vs.len()
            )));
        }
        for &w in weights {
            finite_scalar(w)?;
        }
        let dim = first.dim();
        let mut out = vec![0.0; dim];
        for (v, &w) in vs.iter().zip(weights) {
            check_dim(dim, v.dim())?;
            for (o, x) in out.iter_mut().zip(&v.values) {
                *o += w * x;
            }
        }
        Ok(Self::from_vec(out))
    }

    /// Weighted sum whose weights must be nonnegative and sum to one.
    pub fn convex_combine(vs: &[&ParamVector], weights: &[f64]) -> Result<ParamVector> {
        check_convex(weights)?;
        Self::linear_combination(vs, weights)
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        check_dim(self.dim(), other.dim())?;
        Ok(dot(&self.values, &other.values))
    }

    pub fn norm(&self) -> f64 {
        dot(&self.values, &self.values).sqrt()
    }

    /// Largest elementwise absolute difference.
    pub fn max_abs_diff(&self, other: &ParamVector) -> Result<f64> {
        check_dim(self.dim(), other.dim())?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    fn zip_map(&self, other: &ParamVector, f: impl Fn(f64, f64) -> f64) -> ParamVector {
        Self::from_vec(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        Self::from_vec(values)
    }
}

impl AsRef<[f64]> for ParamVector {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn finite_scalar(c: f64) -> Result<()> {
    if c.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("scalar coefficient {c}")))
    }
}

/// Validates convex mixing weights: nonempty, nonnegative, summing to one.
pub fn check_convex(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::Empty("weight list"));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
        return Err(Error::InvalidWeights(format!(
            "weight {w} is negative or non-finite"
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > CONVEX_SUM_TOLERANCE {
        return Err(Error::InvalidWeights(format!(
            "weights sum to {sum}, not 1"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_vec(v.to_vec())
    }

    fn random(rng: &mut ChaCha8Rng, dim: usize) -> ParamVector {
        ParamVector::from_vec((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn add_scale_axpy_basics() {
        assert_eq!(
            pv(&[1.0, 2.0]).add(&pv(&[3.0, 4.0])).unwrap(),
            pv(&[4.0, 6.0])
        );
        let v = pv(&[1.5, -2.0, 3.0]);
        assert_eq!(v.add(&ParamVector::zeros(3)).unwrap(), v);
        assert_eq!(pv(&[1.0, -2.0]).scale(0.5).unwrap(), pv(&[0.5, -1.0]));
        assert_eq!(v.scale(1.0).unwrap(), v);
        assert_eq!(v.scale(0.0).unwrap(), ParamVector::zeros(3));
        assert_eq!(
            ParamVector::axpy(2.0, &pv(&[1.0, 1.0]), &pv(&[0.0, 1.0])).unwrap(),
            pv(&[2.0, 3.0])
        );
        assert_eq!(
            ParamVector::axpy(0.0, &v, &pv(&[7.0, 8.0, 9.0])).unwrap(),
            pv(&[7.0, 8.0, 9.0])
        );
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let a = pv(&[1.0, 2.0]);
        let b = pv(&[1.0]);
        assert!(matches!(a.add(&b), Err(Error::DimensionMismatch { .. })));
        assert!(ParamVector::axpy(1.0, &a, &b).is_err());
        assert!(a.dot(&b).is_err());
        assert!(ParamVector::convex_combine(&[&a, &b], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn non_finite_scalars_are_rejected() {
        let a = pv(&[1.0]);
        assert!(a.scale(f64::NAN).is_err());
        assert!(a.scale(f64::INFINITY).is_err());
        assert!(ParamVector::axpy(f64::NAN, &a, &a).is_err());
    }

    #[test]
    fn add_commutes_exactly_dim_128() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 128);
        let b = random(&mut rng, 128);
        assert_eq!(a.add(&b).unwrap(), b.add(&a).unwrap());
    }

    #[test]
    fn axpy_matches_scale_then_add() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random(&mut rng, 64);
            let b = random(&mut rng, 64);
            let c = rng.random_range(-3.0..3.0);
            let fused = ParamVector::axpy(c, &a, &b).unwrap();
            let split = a.scale(c).unwrap().add(&b).unwrap();
            assert!(fused.max_abs_diff(&split).unwrap() < 1e-12);
        }
    }

    #[test]
    fn convex_combine_cases() {
        let v = pv(&[1.0, -4.0]);
        assert_eq!(ParamVector::convex_combine(&[&v], &[1.0]).unwrap(), v);
        let a = pv(&[0.0, 2.0]);
        let b = pv(&[2.0, 4.0]);
        assert_eq!(
            ParamVector::convex_combine(&[&a, &b], &[0.5, 0.5]).unwrap(),
            pv(&[1.0, 3.0])
        );
        let mixed = ParamVector::convex_combine(&[&v, &v, &v], &[0.2, 0.3, 0.5]).unwrap();
        assert!(mixed.max_abs_diff(&v).unwrap() < 1e-12);
    }

    #[test]
    fn convex_combine_rejects_bad_weights() {
        let v = pv(&[1.0]);
        assert!(matches!(
            ParamVector::convex_combine(&[&v, &v], &[0.5, 0.6]),
            Err(Error::InvalidWeights(_))
        ));
        assert!(ParamVector::convex_combine(&[&v, &v], &[1.5, -0.5]).is_err());
        assert!(matches!(
            ParamVector::convex_combine(&[], &[]),
            Err(Error::Empty(_))
        ));
    }

    fn vec_strategy(dim: usize) -> impl Strategy<Value = ParamVector> {
        proptest::collection::vec(-10.0f64..10.0, dim).prop_map(ParamVector::from_vec)
    }

    proptest! {
        #[test]
        fn vector_space_axioms(
            a in vec_strategy(16),
            b in vec_strategy(16),
            c in vec_strategy(16),
            s in -10.0f64..10.0,
            t in -10.0f64..10.0,
        ) {
            let tol = 1e-12;
            let ab_c = a.add(&b).unwrap().add(&c).unwrap();
            let a_bc = a.add(&b.add(&c).unwrap()).unwrap();
            prop_assert!(ab_c.max_abs_diff(&a_bc).unwrap() <= tol);
            prop_assert_eq!(a.add(&b).unwrap(), b.add(&a).unwrap());
            let lhs = a.add(&b).unwrap().scale(s).unwrap();
            let rhs = a.scale(s).unwrap().add(&b.scale(s).unwrap()).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= tol);
            let lhs = a.scale(s + t).unwrap();
            let rhs = a.scale(s).unwrap().add(&a.scale(t).unwrap()).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= tol);
        }

        #[test]
        fn uniform_combination_of_copies_is_identity(v in vec_strategy(32), copies in 1usize..20) {
            let refs: Vec<&ParamVector> = std::iter::repeat_n(&v, copies).collect();
            let w = vec![1.0 / copies as f64; copies];
            let out = ParamVector::convex_combine(&refs, &w).unwrap();
            prop_assert!(out.max_abs_diff(&v).unwrap() <= 1e-12);
        }
    }
}
