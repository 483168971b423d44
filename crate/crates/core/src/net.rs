//! Dense feed-forward networks with forward, forward-mode (JVP) and
//! reverse-mode (VJP) evaluation.
//!
//! Parameters of a dense layer `in -> out` occupy `out * in` weights
//! (row-major, one row per output unit) followed by `out` biases. Layers are
//! laid out in order, so the final dense layer (the classification head) is
//! always the trailing block of the flat vector.

use std::fmt;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, Error, Result};
use crate::param::ParamVector;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Dense { input: usize, output: usize },
    Relu,
    LeakyRelu { slope: f64 },
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match *self {
            Layer::Dense { input, output } => output * input + output,
            Layer::Relu | Layer::LeakyRelu { .. } => 0,
        }
    }

    /// Slope applied to the tangent/cotangent where the primal input is not positive.
    fn negative_slope(&self) -> Option<f64> {
        match *self {
            Layer::Relu => Some(0.0),
            Layer::LeakyRelu { slope } => Some(slope),
            Layer::Dense { .. } => None,
        }
    }
}

/// Hidden-layer nonlinearity used by [`NetworkSpec::mlp`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { slope: f64 },
}

impl Activation {
    fn layer(self) -> Layer {
        match self {
            Activation::Relu => Layer::Relu,
            Activation::LeakyRelu { slope } => Layer::LeakyRelu { slope },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RawSpec {
    input_dim: usize,
    layers: Vec<Layer>,
}

/// Architecture of a dense network. Always ends in a dense head whose width
/// is the number of classes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec", into = "RawSpec")]
pub struct NetworkSpec {
    input_dim: usize,
    layers: Vec<Layer>,
    offsets: Vec<usize>,
    param_count: usize,
}

impl TryFrom<RawSpec> for NetworkSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        NetworkSpec::new(raw.input_dim, raw.layers)
    }
}

impl From<NetworkSpec> for RawSpec {
    fn from(spec: NetworkSpec) -> Self {
        RawSpec {
            input_dim: spec.input_dim,
            layers: spec.layers,
        }
    }
}

impl NetworkSpec {
    pub fn new(input_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidNetwork(
                "input dimension must be positive".into(),
            ));
        }
        let mut width = input_dim;
        let mut offsets = Vec::with_capacity(layers.len());
        let mut offset = 0;
        for (i, layer) in layers.iter().enumerate() {
            offsets.push(offset);
            offset += layer.param_count();
            match *layer {
                Layer::Dense { input, output } => {
                    if input != width {
                        return Err(Error::InvalidNetwork(format!(
                            "layer {i} expects input width {input}, predecessor produces {width}"
                        )));
                    }
                    if output == 0 {
                        return Err(Error::InvalidNetwork(format!("layer {i} has zero outputs")));
                    }
                    width = output;
                }
                Layer::LeakyRelu { slope } if !(slope > 0.0 && slope < 1.0) => {
                    return Err(Error::InvalidNetwork(format!(
                        "leaky relu slope {slope} outside (0, 1)"
                    )));
                }
                Layer::Relu | Layer::LeakyRelu { .. } => {}
            }
        }
        if !matches!(layers.last(), Some(Layer::Dense { .. })) {
            return Err(Error::InvalidNetwork(
                "final layer must be a dense head".into(),
            ));
        }
        Ok(Self {
            input_dim,
            layers,
            offsets,
            param_count: offset,
        })
    }

    /// Dense layers of the given hidden widths joined by `activation`, then a dense head.
    pub fn mlp(
        input_dim: usize,
        hidden: &[usize],
        classes: usize,
        activation: Activation,
    ) -> Result<Self> {
        let mut layers = Vec::new();
        let mut width = input_dim;
        for &h in hidden {
            layers.push(Layer::Dense {
                input: width,
                output: h,
            });
            layers.push(activation.layer());
            width = h;
        }
        layers.push(Layer::Dense {
            input: width,
            output: classes,
        });
        Self::new(input_dim, layers)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Dense { output, .. }) => *output,
            _ => unreachable!("validated at construction"),
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    /// Range of the classification head inside the flat parameter vector.
    pub fn head_range(&self) -> Range<usize> {
        let last = self.layers.len() - 1;
        self.offsets[last]..self.param_count
    }

    /// Same architecture with the head widened or narrowed to `classes` outputs.
    pub fn with_classes(&self, classes: usize) -> Result<Self> {
        let mut layers = self.layers.clone();
        if let Some(Layer::Dense { output, .. }) = layers.last_mut() {
            *output = classes;
        }
        Self::new(self.input_dim, layers)
    }

    fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("network spec serializes")
    }
}

/// Content hash of an anchor: SHA-256 over the architecture encoding and the
/// little-endian weight bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Fingerprint([u8; 32]);

impl Fingerprint {
    pub fn of(spec: &NetworkSpec, weights: &ParamVector) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(spec.canonical_bytes());
        for v in weights.as_slice() {
            hasher.update(v.to_le_bytes());
        }
        Self(hasher.finalize().into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes =
            hex::decode(s).map_err(|e| Error::Checkpoint(format!("bad fingerprint: {e}")))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Checkpoint("fingerprint must be 32 bytes".into()))?;
        Ok(Self(arr))
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({})", &self.to_hex()[..12])
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Per-layer primal and tangent values from one fused forward pass.
/// `primal[0]` is the input; `primal[i + 1]` is the output of layer `i`.
#[derive(Clone, Debug)]
pub struct DualActivations {
    pub primal: Vec<Vec<f64>>,
    pub tangent: Vec<Vec<f64>>,
}

impl DualActivations {
    pub fn primal_output(&self) -> &[f64] {
        self.primal.last().expect("at least the input")
    }

    pub fn tangent_output(&self) -> &[f64] {
        self.tangent.last().expect("at least the input")
    }
}

/// A network architecture together with concrete weights.
///
/// When used as a tangent anchor the model is shared behind an `Arc` and
/// never mutated; training produces new models instead.
#[derive(Clone, Debug)]
pub struct BaseModel {
    spec: NetworkSpec,
    weights: ParamVector,
    fingerprint: Fingerprint,
}

impl PartialEq for BaseModel {
    fn eq(&self, other: &Self) -> bool {
        self.fingerprint == other.fingerprint
    }
}

impl BaseModel {
    pub fn new(spec: NetworkSpec, weights: ParamVector) -> Result<Self> {
        check_dim(spec.param_count(), weights.dim())?;
        if !weights.is_finite() {
            return Err(Error::NonFinite("base weights".into()));
        }
        let fingerprint = Fingerprint::of(&spec, &weights);
        Ok(Self {
            spec,
            weights,
            fingerprint,
        })
    }

    /// He (fan-in) initialization with zero biases.
    pub fn init(spec: NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = vec![0.0; spec.param_count()];
        for (layer, &offset) in spec.layers.iter().zip(&spec.offsets) {
            if let Layer::Dense { input, output } = *layer {
                he_fill(&mut rng, &mut w[offset..offset + output * input], input);
            }
        }
        Self::new(spec, ParamVector::from_vec(w)).expect("fresh init is finite")
    }

    /// Copy of this model whose head is replaced by a freshly initialized
    /// `classes`-way dense layer drawn from `seed`.
    pub fn with_reinitialized_head(&self, classes: usize, seed: u64) -> Result<Self> {
        let spec = self.spec.with_classes(classes)?;
        let head = spec.head_range();
        let mut w = self.weights.as_slice()[..head.start].to_vec();
        w.resize(spec.param_count(), 0.0);
        let Some(&Layer::Dense { input, output }) = spec.layers.last() else {
            unreachable!("validated at construction")
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        he_fill(
            &mut rng,
            &mut w[head.start..head.start + output * input],
            input,
        );
        Self::new(spec, ParamVector::from_vec(w))
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn weights(&self) -> &ParamVector {
        &self.weights
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    pub fn num_classes(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.spec.input_dim, x.len())?;
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> Vec<f64> {
        self.spec.eval_forward(self.weights.as_slice(), x)
    }

    /// Fused dual-number pass: primal activations plus their directional
    /// derivative along `delta`.
    pub fn dual_pass(&self, delta: &ParamVector, x: &[f64]) -> Result<DualActivations> {
        check_dim(self.spec.param_count, delta.dim())?;
        check_dim(self.spec.input_dim, x.len())?;
        Ok(self.dual_pass_unchecked(delta.as_slice(), x))
    }

    pub(crate) fn dual_pass_unchecked(&self, delta: &[f64], x: &[f64]) -> DualActivations {
        self.spec.eval_dual(self.weights.as_slice(), delta, x)
    }

    /// `(f_w(x), ∇_w f_w(x) · delta)` from a single fused pass.
    pub fn jvp_forward(&self, delta: &ParamVector, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut dual = self.dual_pass(delta, x)?;
        let t = dual.tangent.pop().expect("output layer");
        let p = dual.primal.pop().expect("output layer");
        Ok((p, t))
    }

    /// `J(x)ᵀ · cotangent` where `J` is the Jacobian of the logits with
    /// respect to the weights.
    pub fn vjp_backward(&self, x: &[f64], cotangent: &[f64]) -> Result<ParamVector> {
        check_dim(self.spec.input_dim, x.len())?;
        check_dim(self.spec.output_dim(), cotangent.len())?;
        let primal = self.primal_trace(x);
        let mut grad = vec![0.0; self.spec.param_count];
        self.accumulate_vjp(&primal, cotangent, 1.0, &mut grad);
        Ok(ParamVector::from_vec(grad))
    }

    /// Reverse-mode gradient of the non-linear network at its current
    /// weights. Same computation as [`BaseModel::vjp_backward`].
    pub fn backward_nonlinear(&self, x: &[f64], cotangent: &[f64]) -> Result<ParamVector> {
        self.vjp_backward(x, cotangent)
    }

    pub(crate) fn primal_trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        self.spec.eval_trace(self.weights.as_slice(), x)
    }

    /// Adds `scale * J(x)ᵀ cotangent` into `grad`, given the primal trace of `x`.
    pub(crate) fn accumulate_vjp(
        &self,
        primal: &[Vec<f64>],
        cotangent: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) {
        self.spec
            .eval_vjp(self.weights.as_slice(), primal, cotangent, scale, grad)
    }
}

/// Evaluation on raw weight slices, shared by anchors and by training loops.
impl NetworkSpec {
    pub(crate) fn eval_forward(&self, w: &[f64], x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for (layer, &offset) in self.layers.iter().zip(&self.offsets) {
            a = match *layer {
                Layer::Dense { input, output } => dense(&w[offset..], input, output, &a),
                _ => {
                    let slope = layer.negative_slope().unwrap_or(0.0);
                    a.iter()
                        .map(|&v| if v > 0.0 { v } else { slope * v })
                        .collect()
                }
            };
        }
        a
    }

    pub(crate) fn eval_dual(&self, w: &[f64], delta: &[f64], x: &[f64]) -> DualActivations {
        let n = self.layers.len() + 1;
        let mut primal = Vec::with_capacity(n);
        let mut tangent = Vec::with_capacity(n);
        primal.push(x.to_vec());
        tangent.push(vec![0.0; x.len()]);
        for (i, (layer, &offset)) in self.layers.iter().zip(&self.offsets).enumerate() {
            let a = &primal[i];
            let t = &tangent[i];
            let (p_out, t_out) = match *layer {
                Layer::Dense { input, output } => {
                    let wl = &w[offset..];
                    let dl = &delta[offset..];
                    let mut p_out = Vec::with_capacity(output);
                    let mut t_out = Vec::with_capacity(output);
                    for r in 0..output {
                        let row = &wl[r * input..(r + 1) * input];
                        let drow = &dl[r * input..(r + 1) * input];
                        let mut p = wl[output * input + r];
                        let mut tv = dl[output * input + r];
                        for c in 0..input {
                            p += row[c] * a[c];
                            tv += row[c] * t[c] + drow[c] * a[c];
                        }
                        p_out.push(p);
                        t_out.push(tv);
                    }
                    (p_out, t_out)
                }
                _ => {
                    let slope = layer.negative_slope().unwrap_or(0.0);
                    a.iter()
                        .zip(t)
                        .map(|(&p, &tv)| {
                            if p > 0.0 {
                                (p, tv)
                            } else {
                                (slope * p, slope * tv)
                            }
                        })
                        .unzip()
                }
            };
            primal.push(p_out);
            tangent.push(t_out);
        }
        DualActivations { primal, tangent }
    }

    pub(crate) fn eval_trace(&self, w: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for (layer, &offset) in self.layers.iter().zip(&self.offsets) {
            let a = acts.last().expect("nonempty");
            let next = match *layer {
                Layer::Dense { input, output } => dense(&w[offset..], input, output, a),
                _ => {
                    let slope = layer.negative_slope().unwrap_or(0.0);
                    a.iter()
                        .map(|&v| if v > 0.0 { v } else { slope * v })
                        .collect()
                }
            };
            acts.push(next);
        }
        acts
    }

    /// Adds `scale * J(x)ᵀ cotangent` into `grad`, given the primal trace of `x`.
    pub(crate) fn eval_vjp(
        &self,
        w: &[f64],
        primal: &[Vec<f64>],
        cotangent: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) {
        let mut g: Vec<f64> = cotangent.iter().map(|c| c * scale).collect();
        for (i, (layer, &offset)) in self.layers.iter().zip(&self.offsets).enumerate().rev() {
            let a = &primal[i];
            g = match *layer {
                Layer::Dense { input, output } => {
                    let wl = &w[offset..];
                    let gl = &mut grad[offset..];
                    let mut g_in = vec![0.0; input];
                    for r in 0..output {
                        let gr = g[r];
                        if gr == 0.0 {
                            continue;
                        }
                        let row = &wl[r * input..(r + 1) * input];
                        let grow = &mut gl[r * input..(r + 1) * input];
                        for c in 0..input {
                            grow[c] += gr * a[c];
                            g_in[c] += row[c] * gr;
                        }
                        gl[output * input + r] += gr;
                    }
                    g_in
                }
                _ => {
                    let slope = layer.negative_slope().unwrap_or(0.0);
                    a.iter()
                        .zip(&g)
                        .map(|(&p, &gv)| if p > 0.0 { gv } else { slope * gv })
                        .collect()
                }
            };
        }
    }
}

fn dense(w: &[f64], input: usize, output: usize, a: &[f64]) -> Vec<f64> {
    (0..output)
        .map(|r| {
            let row = &w[r * input..(r + 1) * input];
            // same accumulation order as the fused dual pass
            let mut s = w[output * input + r];
            for c in 0..input {
                s += row[c] * a[c];
            }
            s
        })
        .collect()
}

fn he_fill(rng: &mut ChaCha8Rng, out: &mut [f64], fan_in: usize) {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    for v in out {
        *v = normal.sample(rng);
    }
}
