//! Baseline combinations of fine-tuned models and top-1 evaluation.

use crate::data::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::loss::softmax;
use crate::net::BaseModel;
use crate::param::{check_convex, ParamVector};
use crate::tangent::TangentModel;

/// Anything that maps a feature vector to per-class scores.
pub trait Predictor: Sync {
    fn input_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn scores(&self, x: &[f64]) -> Vec<f64>;
}

impl Predictor for BaseModel {
    fn input_dim(&self) -> usize {
        self.spec().input_dim()
    }
    fn num_classes(&self) -> usize {
        self.spec().output_dim()
    }
    fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.forward_unchecked(x)
    }
}

impl Predictor for TangentModel {
    fn input_dim(&self) -> usize {
        self.base().spec().input_dim()
    }
    fn num_classes(&self) -> usize {
        self.base().spec().output_dim()
    }
    fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.forward_unchecked(x)
    }
}

/// Weight soup: `Σ λ_i w_i` over models of identical architecture.
pub fn soup(members: &[&BaseModel], weights: &[f64]) -> Result<BaseModel> {
    let first = members.first().ok_or(Error::Empty("soup members"))?;
    if members.iter().any(|m| m.spec() != first.spec()) {
        return Err(Error::InvalidNetwork(
            "soup members have different architectures".into(),
        ));
    }
    let ws: Vec<&ParamVector> = members.iter().map(|m| m.weights()).collect();
    BaseModel::new(
        first.spec().clone(),
        ParamVector::linear_combination(&ws, weights)?,
    )
}

#[derive(Clone, Debug)]
pub enum Members {
    Nonlinear(Vec<BaseModel>),
    Tangent(Vec<TangentModel>),
}

/// Models evaluated side by side and mixed at the output.
#[derive(Clone, Debug)]
pub struct ModelCollection {
    members: Members,
    weights: Vec<f64>,
}

impl ModelCollection {
    pub fn new(members: Members, weights: Vec<f64>) -> Result<Self> {
        let n = match &members {
            Members::Nonlinear(m) => {
                if let Some(first) = m.first() {
                    if m.iter().any(|x| x.spec() != first.spec()) {
                        return Err(Error::InvalidNetwork(
                            "members have different architectures".into(),
                        ));
                    }
                }
                m.len()
            }
            Members::Tangent(m) => {
                if let Some(first) = m.first() {
                    if let Some(other) = m
                        .iter()
                        .find(|x| x.base().fingerprint() != first.base().fingerprint())
                    {
                        return Err(Error::AnchorMismatch {
                            left: first.base().fingerprint().to_hex(),
                            right: other.base().fingerprint().to_hex(),
                        });
                    }
                }
                m.len()
            }
        };
        if n == 0 {
            return Err(Error::Empty("model collection"));
        }
        if weights.len() != n {
            return Err(Error::InvalidWeights(format!(
                "{} weights for {n} members",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::InvalidWeights("non-finite weight".into()));
        }
        Ok(Self { members, weights })
    }

    pub fn uniform(members: Members) -> Result<Self> {
        let n = match &members {
            Members::Nonlinear(m) => m.len(),
            Members::Tangent(m) => m.len(),
        };
        Self::new(members, vec![1.0 / n.max(1) as f64; n])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn members(&self) -> &Members {
        &self.members
    }

    fn member(&self, i: usize) -> &dyn Predictor {
        match &self.members {
            Members::Nonlinear(m) => &m[i],
            Members::Tangent(m) => &m[i],
        }
    }

    /// `Σ λ_i f_i(x)`, one forward pass per member.
    pub fn ensemble_logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.member(0).input_dim(), x.len())?;
        Ok(self.logits_unchecked(x))
    }

    fn logits_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.member(0).num_classes()];
        for (i, &w) in self.weights.iter().enumerate() {
            for (o, s) in out.iter_mut().zip(self.member(i).scores(x)) {
                *o += w * s;
            }
        }
        out
    }

    /// `Σ λ_i softmax(f_i(x))`; requires convex weights.
    pub fn ensemble_softmax(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_convex(&self.weights)?;
        check_dim(self.member(0).input_dim(), x.len())?;
        Ok(self.softmax_unchecked(x))
    }

    fn softmax_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.member(0).num_classes()];
        for (i, &w) in self.weights.iter().enumerate() {
            for (o, p) in out.iter_mut().zip(softmax(&self.member(i).scores(x))) {
                *o += w * p;
            }
        }
        out
    }
}

/// How an ensemble mixes its members' outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnsembleMode {
    Logits,
    Softmax,
}

/// A collection bound to a mixing mode, usable as a [`Predictor`].
#[derive(Clone, Debug)]
pub struct Ensemble {
    collection: ModelCollection,
    mode: EnsembleMode,
}

impl Ensemble {
    pub fn new(collection: ModelCollection, mode: EnsembleMode) -> Result<Self> {
        if mode == EnsembleMode::Softmax {
            check_convex(collection.weights())?;
        }
        Ok(Self { collection, mode })
    }

    pub fn collection(&self) -> &ModelCollection {
        &self.collection
    }
}

impl Predictor for Ensemble {
    fn input_dim(&self) -> usize {
        self.collection.member(0).input_dim()
    }
    fn num_classes(&self) -> usize {
        self.collection.member(0).num_classes()
    }
    fn scores(&self, x: &[f64]) -> Vec<f64> {
        match self.mode {
            EnsembleMode::Logits => self.collection.logits_unchecked(x),
            EnsembleMode::Softmax => self.collection.softmax_unchecked(x),
        }
    }
}

/// Index of the largest score; ties go to the lowest index. If `allowed`
/// is given only those classes compete.
pub fn argmax(scores: &[f64], allowed: Option<&[usize]>) -> usize {
    let mut best: Option<(usize, f64)> = None;
    let mut consider = |i: usize| {
        let s = scores[i];
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    };
    match allowed {
        Some(classes) => {
            let mut sorted = classes.to_vec();
            sorted.sort_unstable();
            sorted.into_iter().for_each(&mut consider);
        }
        None => (0..scores.len()).for_each(&mut consider),
    }
    best.map(|(i, _)| i).unwrap_or(0)
}

/// Top-1 accuracy, optionally with predictions restricted to a class subset.
pub fn evaluate(
    predictor: &dyn Predictor,
    data: &Dataset,
    restriction: Option<&[usize]>,
) -> Result<f64> {
    let (correct, total) = count_correct(predictor, data, restriction)?;
    Ok(correct as f64 / total as f64)
}

/// `(correct, total)` for top-1 predictions.
pub fn count_correct(
    predictor: &dyn Predictor,
    data: &Dataset,
    restriction: Option<&[usize]>,
) -> Result<(usize, usize)> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    check_dim(predictor.input_dim(), data.dim())?;
    let k = predictor.num_classes();
    if let Some(&label) = data.labels().iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    if let Some(r) = restriction {
        if r.is_empty() {
            return Err(Error::Empty("class restriction"));
        }
        if let Some(&c) = r.iter().find(|&&c| c >= k) {
            return Err(Error::LabelOutOfRange {
                label: c,
                classes: k,
            });
        }
    }
    let mut correct = 0;
    for i in 0..data.len() {
        let (x, y) = data.sample(i);
        if argmax(&predictor.scores(x), restriction) == y {
            correct += 1;
        }
    }
    Ok((correct, data.len()))
}

/// Per-sample predicted classes.
pub fn predictions(
    predictor: &dyn Predictor,
    data: &Dataset,
    restriction: Option<&[usize]>,
) -> Result<Vec<usize>> {
    check_dim(predictor.input_dim(), data.dim())?;
    Ok((0..data.len())
        .map(|i| argmax(&predictor.scores(data.sample(i).0), restriction))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Layer, NetworkSpec};
    use std::sync::Arc;

    struct Fixed(Vec<f64>);
    impl Predictor for Fixed {
        fn input_dim(&self) -> usize {
            1
        }
        fn num_classes(&self) -> usize {
            self.0.len()
        }
        fn scores(&self, _: &[f64]) -> Vec<f64> {
            self.0.clone()
        }
    }

    struct Oracle(usize);
    impl Predictor for Oracle {
        fn input_dim(&self) -> usize {
            1
        }
        fn num_classes(&self) -> usize {
            self.0
        }
        fn scores(&self, x: &[f64]) -> Vec<f64> {
            let mut s = vec![0.0; self.0];
            s[x[0] as usize] = 1.0;
            s
        }
    }

    fn labelled(labels: &[usize], k: usize) -> Dataset {
        Dataset::new(
            1,
            k,
            labels.iter().map(|&l| l as f64).collect(),
            labels.to_vec(),
        )
        .unwrap()
    }

    fn linear(weights: Vec<f64>) -> BaseModel {
        let spec = NetworkSpec::new(
            1,
            vec![Layer::Dense {
                input: 1,
                output: 2,
            }],
        )
        .unwrap();
        BaseModel::new(spec, ParamVector::from_vec(weights)).unwrap()
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0], None), 1);
        assert_eq!(argmax(&[2.0, 2.0], None), 0);
        assert_eq!(argmax(&[5.0, 1.0, 1.0], Some(&[2, 1])), 1);
    }

    #[test]
    fn evaluate_cases() {
        let d = labelled(&[0, 1, 2, 1, 0], 3);
        assert_eq!(evaluate(&Oracle(3), &d, None).unwrap(), 1.0);
        let balanced = labelled(&[0, 1, 0, 1], 2);
        assert_eq!(
            evaluate(&Fixed(vec![0.0, 0.0]), &balanced, None).unwrap(),
            0.5
        );
        let single = labelled(&[2, 2], 3);
        assert_eq!(
            evaluate(&Fixed(vec![9.0, 5.0, -1.0]), &single, Some(&[2])).unwrap(),
            1.0
        );
        assert!(matches!(
            evaluate(&Oracle(3), &Dataset::empty(1, 3), None),
            Err(Error::Empty(_))
        ));
        assert!(evaluate(&Oracle(3), &d, Some(&[])).is_err());
    }

    #[test]
    fn soup_cases() {
        let a = linear(vec![1.0, 2.0, 3.0, 4.0]);
        let b = linear(vec![-1.0, 0.0, 1.0, 0.5]);
        assert_eq!(soup(&[&a, &a], &[0.5, 0.5]).unwrap().weights(), a.weights());
        assert_eq!(soup(&[&a, &b], &[1.0, 0.0]).unwrap().weights(), a.weights());
        let other = BaseModel::init(
            NetworkSpec::new(
                1,
                vec![Layer::Dense {
                    input: 1,
                    output: 3,
                }],
            )
            .unwrap(),
            0,
        );
        assert!(soup(&[&a, &other], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn ensemble_cases() {
        let a = linear(vec![1.0, -1.0, 0.0, 0.0]);
        let b = linear(vec![-1.0, 1.0, 0.0, 0.0]);
        let single = ModelCollection::uniform(Members::Nonlinear(vec![a.clone()])).unwrap();
        assert_eq!(
            single.ensemble_logits(&[2.0]).unwrap(),
            a.forward(&[2.0]).unwrap()
        );
        assert_eq!(
            single.ensemble_softmax(&[2.0]).unwrap(),
            softmax(&a.forward(&[2.0]).unwrap())
        );
        let opposite = ModelCollection::uniform(Members::Nonlinear(vec![a.clone(), b])).unwrap();
        assert_eq!(opposite.ensemble_logits(&[3.0]).unwrap(), vec![0.0, 0.0]);
        let p = opposite.ensemble_softmax(&[3.0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
        let twins =
            ModelCollection::uniform(Members::Nonlinear(vec![a.clone(), a.clone()])).unwrap();
        let p2 = twins.ensemble_softmax(&[2.0]).unwrap();
        let p1 = single.ensemble_softmax(&[2.0]).unwrap();
        for (x, y) in p1.iter().zip(&p2) {
            assert!((x - y).abs() < 1e-15);
        }
        let nonconvex =
            ModelCollection::new(Members::Nonlinear(vec![a.clone(), a]), vec![1.0, 1.0]).unwrap();
        assert!(nonconvex.ensemble_softmax(&[1.0]).is_err());
        assert!(Ensemble::new(nonconvex, EnsembleMode::Softmax).is_err());
    }

    #[test]
    fn tangent_members_must_share_anchor() {
        let spec = NetworkSpec::new(
            1,
            vec![Layer::Dense {
                input: 1,
                output: 2,
            }],
        )
        .unwrap();
        let a = TangentModel::at_anchor(Arc::new(BaseModel::init(spec.clone(), 1)));
        let b = TangentModel::at_anchor(Arc::new(BaseModel::init(spec, 2)));
        assert!(matches!(
            ModelCollection::uniform(Members::Tangent(vec![a, b])),
            Err(Error::AnchorMismatch { .. })
        ));
    }
}
