//! Small differentiable predictors with hand-written backpropagation.
//!
//! Every architecture is a stack of dense layers. Weights are stored
//! row-major (`fan_out × fan_in`) followed by the bias, layer after layer, in
//! one flat vector.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Architecture {
    Linear,
    Logistic,
    Mlp3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum OutputKind {
    /// Logistic link, predictions in (0, 1).
    Probability,
    /// Identity link.
    Real,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input_dim: usize,
    /// Hidden widths, used by `Mlp3` only.
    pub hidden_dims: (usize, usize),
    pub activation: Activation,
    pub output: OutputKind,
}

impl ModelSpec {
    pub fn linear(input_dim: usize) -> Self {
        ModelSpec {
            architecture: Architecture::Linear,
            input_dim,
            hidden_dims: (32, 16),
            activation: Activation::Relu,
            output: OutputKind::Real,
        }
    }

    pub fn logistic(input_dim: usize) -> Self {
        ModelSpec {
            architecture: Architecture::Logistic,
            output: OutputKind::Probability,
            ..Self::linear(input_dim)
        }
    }

    pub fn mlp3(input_dim: usize, output: OutputKind) -> Self {
        ModelSpec {
            architecture: Architecture::Mlp3,
            output,
            ..Self::linear(input_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidSpec("input_dim must be at least 1".into()));
        }
        match (self.architecture, self.output) {
            (Architecture::Linear, OutputKind::Probability) => Err(Error::InvalidSpec(
                "linear architecture has a real-valued output".into(),
            )),
            (Architecture::Logistic, OutputKind::Real) => Err(Error::InvalidSpec(
                "logistic architecture has a probability output".into(),
            )),
            (Architecture::Mlp3, _) if self.hidden_dims.0 == 0 || self.hidden_dims.1 == 0 => {
                Err(Error::InvalidSpec("hidden dims must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// `(fan_in, fan_out)` of each dense layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        match self.architecture {
            Architecture::Linear | Architecture::Logistic => vec![(self.input_dim, 1)],
            Architecture::Mlp3 => {
                let (h1, h2) = self.hidden_dims;
                vec![(self.input_dim, h1), (h1, h2), (h2, 1)]
            }
        }
    }

    pub fn layout(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.layer_dims()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let l = LayerLayout {
                    weights: offset,
                    bias: offset + fan_in * fan_out,
                    fan_in,
                    fan_out,
                };
                offset = l.bias + fan_out;
                l
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(i, o)| i * o + o)
            .sum()
    }
}

/// Location of one layer inside a [`ParamVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub weights: usize,
    pub bias: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ParamVector {
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(spec: &ModelSpec) -> Self {
        ParamVector {
            values: vec![0.0; spec.n_params()],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: &ModelSpec, rng: &mut Rng) -> Self {
        use rand::Rng as _;
        let mut values = vec![0.0; spec.n_params()];
        for l in spec.layout() {
            let r = libm::sqrt(6.0 / (l.fan_in + l.fan_out) as f64);
            for w in &mut values[l.weights..l.bias] {
                *w = rng.random_range(-r..r);
            }
        }
        ParamVector { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Little-endian `f64` bytes, in layout order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(spec: &ModelSpec, bytes: &[u8]) -> Result<Self> {
        let n = spec.n_params();
        if bytes.len() != 8 * n {
            return Err(Error::DimensionMismatch {
                what: "parameter bytes",
                expected: 8 * n,
                got: bytes.len(),
            });
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| {
                let mut b = [0u8; 8];
                b.copy_from_slice(c);
                f64::from_le_bytes(b)
            })
            .collect();
        Ok(ParamVector { values })
    }

    fn check(&self, spec: &ModelSpec) -> Result<()> {
        if self.values.len() != spec.n_params() {
            return Err(Error::DimensionMismatch {
                what: "parameter count",
                expected: spec.n_params(),
                got: self.values.len(),
            });
        }
        if !self.is_finite() {
            return Err(Error::NonFiniteParams);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum LossKind {
    Mse,
    BinaryCrossEntropy,
}

pub const PROB_CLIP: f64 = 1e-7;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// Activations of every layer from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[l]` is the output of layer `l` (`n × fan_out`).
    pub activations: Vec<DMatrix<f64>>,
}

impl ForwardCache {
    pub fn predictions(&self) -> DVector<f64> {
        let last = self.activations.last().expect("at least one layer");
        DVector::from_column_slice(last.as_slice())
    }
}

/// `Wᵀ` (`fan_in × fan_out`); the row-major weights are its column-major storage.
fn weight_transpose(params: &ParamVector, l: &LayerLayout) -> DMatrix<f64> {
    DMatrix::from_column_slice(l.fan_in, l.fan_out, &params.values[l.weights..l.bias])
}

/// `a * b`, going through the matrix-vector kernel when `b` is a single column.
fn mul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    if b.ncols() == 1 {
        let v = a * b.column(0);
        DMatrix::from_column_slice(v.len(), 1, v.as_slice())
    } else {
        a * b
    }
}

/// `aᵀ * b`, likewise.
fn tr_mul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    if b.ncols() == 1 {
        let v = a.tr_mul(&b.column(0));
        DMatrix::from_column_slice(v.len(), 1, v.as_slice())
    } else {
        a.tr_mul(b)
    }
}

fn check_features(spec: &ModelSpec, features: &DMatrix<f64>) -> Result<()> {
    if features.ncols() != spec.input_dim {
        return Err(Error::DimensionMismatch {
            what: "feature width",
            expected: spec.input_dim,
            got: features.ncols(),
        });
    }
    Ok(())
}

pub fn forward_cached(
    spec: &ModelSpec,
    params: &ParamVector,
    features: &DMatrix<f64>,
) -> Result<ForwardCache> {
    check_features(spec, features)?;
    params.check(spec)?;
    let layout = spec.layout();
    let last = layout.len() - 1;
    let mut activations: Vec<DMatrix<f64>> = Vec::with_capacity(layout.len());
    for (i, l) in layout.iter().enumerate() {
        let input = if i == 0 { features } else { &activations[i - 1] };
        let mut z = mul(input, &weight_transpose(params, l));
        let bias = &params.values[l.bias..l.bias + l.fan_out];
        for (j, mut col) in z.column_iter_mut().enumerate() {
            col.add_scalar_mut(bias[j]);
        }
        if i == last {
            if spec.output == OutputKind::Probability {
                z.apply(|v| *v = sigmoid(*v));
            }
        } else {
            match spec.activation {
                Activation::Relu => z.apply(|v| *v = v.max(0.0)),
                Activation::Tanh => z.apply(|v| *v = libm::tanh(*v)),
            }
        }
        activations.push(z);
    }
    Ok(ForwardCache { activations })
}

pub fn forward(spec: &ModelSpec, params: &ParamVector, features: &DMatrix<f64>) -> Result<DVector<f64>> {
    Ok(forward_cached(spec, params, features)?.predictions())
}

/// Gradient of `Σ_i upstream_i · Ŷ_i` with respect to the parameters.
pub fn backward(
    spec: &ModelSpec,
    params: &ParamVector,
    features: &DMatrix<f64>,
    cache: &ForwardCache,
    upstream: &DVector<f64>,
) -> Vec<f64> {
    let layout = spec.layout();
    let last = layout.len() - 1;
    let mut grad = vec![0.0; params.len()];
    let out = &cache.activations[last];
    let mut delta = DMatrix::from_fn(out.nrows(), 1, |r, _| match spec.output {
        OutputKind::Probability => upstream[r] * out[(r, 0)] * (1.0 - out[(r, 0)]),
        OutputKind::Real => upstream[r],
    });
    for i in (0..layout.len()).rev() {
        let l = &layout[i];
        let input = if i == 0 { features } else { &cache.activations[i - 1] };
        // Column-major `input' delta` is the row-major weight gradient.
        let gwt = tr_mul(input, &delta);
        grad[l.weights..l.bias].copy_from_slice(gwt.as_slice());
        for r in 0..l.fan_out {
            grad[l.bias + r] = delta.column(r).sum();
        }
        if i > 0 {
            let wt = weight_transpose(params, l);
            let mut prev = &delta * wt.transpose();
            let a = &cache.activations[i - 1];
            match spec.activation {
                Activation::Relu => prev.zip_apply(a, |d, a| {
                    if a <= 0.0 {
                        *d = 0.0
                    }
                }),
                Activation::Tanh => prev.zip_apply(a, |d, a| *d *= 1.0 - a * a),
            }
            delta = prev;
        }
    }
    grad
}

fn check_labels(pred: &DVector<f64>, labels: &DVector<f64>) -> Result<()> {
    if labels.len() != pred.len() {
        return Err(Error::DimensionMismatch {
            what: "labels",
            expected: pred.len(),
            got: labels.len(),
        });
    }
    if labels.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidDesign("non-finite label"));
    }
    Ok(())
}

/// Mean loss and its derivative with respect to each prediction.
pub fn loss_from_predictions(
    kind: LossKind,
    pred: &DVector<f64>,
    labels: &DVector<f64>,
) -> Result<(f64, DVector<f64>)> {
    check_labels(pred, labels)?;
    let n = pred.len().max(1) as f64;
    match kind {
        LossKind::Mse => {
            let diff = pred - labels;
            let loss = diff.norm_squared() / n;
            Ok((loss, diff * (2.0 / n)))
        }
        LossKind::BinaryCrossEntropy => {
            if labels.iter().any(|&y| !(0.0..=1.0).contains(&y)) {
                return Err(Error::DomainError("cross-entropy labels must lie in [0, 1]"));
            }
            let mut loss = 0.0;
            let mut grad = DVector::zeros(pred.len());
            for i in 0..pred.len() {
                let (p, y) = (pred[i], labels[i]);
                let pc = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
                loss -= y * libm::log(pc) + (1.0 - y) * libm::log(1.0 - pc);
                if pc == p {
                    grad[i] = (-(y / pc) + (1.0 - y) / (1.0 - pc)) / n;
                }
            }
            Ok((loss / n, grad))
        }
    }
}

fn check_loss_spec(spec: &ModelSpec, loss: LossKind) -> Result<()> {
    if loss == LossKind::BinaryCrossEntropy && spec.output != OutputKind::Probability {
        return Err(Error::InvalidSpec(
            "cross-entropy requires a probability output".into(),
        ));
    }
    Ok(())
}

pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    features: &DMatrix<f64>,
    labels: &DVector<f64>,
    loss: LossKind,
) -> Result<(f64, Vec<f64>)> {
    check_loss_spec(spec, loss)?;
    let cache = forward_cached(spec, params, features)?;
    let (value, dpred) = loss_from_predictions(loss, &cache.predictions(), labels)?;
    Ok((value, backward(spec, params, features, &cache, &dpred)))
}

/// `ν = Ŷ - Y`.
pub fn predict_error(
    spec: &ModelSpec,
    params: &ParamVector,
    features: &DMatrix<f64>,
    labels: &DVector<f64>,
) -> Result<DVector<f64>> {
    let pred = forward(spec, params, features)?;
    check_labels(&pred, labels)?;
    Ok(pred - labels)
}

/// Per-column z-scoring fitted on a training fold.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Constant columns keep scale 1.
    pub fn fit(features: &DMatrix<f64>) -> Self {
        let n = features.nrows().max(1) as f64;
        let mut mean = Vec::with_capacity(features.ncols());
        let mut scale = Vec::with_capacity(features.ncols());
        for col in features.column_iter() {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let sd = libm::sqrt(var);
            mean.push(m);
            scale.push(if sd > 1e-12 { sd } else { 1.0 });
        }
        Standardizer { mean, scale }
    }

    pub fn apply(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = features.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.apply(|v| *v = (*v - self.mean[j]) / self.scale[j]);
        }
        out
    }
}

/// Parameters together with the preprocessing they were trained under.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub params: ParamVector,
    pub standardizer: Option<Standardizer>,
}

impl TrainedModel {
    pub fn prepare(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.standardizer {
            Some(s) => s.apply(features),
            None => features.clone(),
        }
    }

    pub fn predict(&self, features: &DMatrix<f64>) -> Result<DVector<f64>> {
        check_features(&self.spec, features)?;
        forward(&self.spec, &self.params, &self.prepare(features))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng as _;

    fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.5..1.5))
    }

    #[test]
    fn zero_weights_logistic_is_half() {
        let spec = ModelSpec::logistic(3);
        let x = random_matrix(5, 3, &mut rng_for(1, &[]));
        let p = forward(&spec, &ParamVector::zeros(&spec), &x).unwrap();
        assert!(p.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn unit_weight_linear_copies_feature() {
        let spec = ModelSpec::linear(3);
        let mut params = ParamVector::zeros(&spec);
        params.values[0] = 1.0;
        let x = random_matrix(6, 3, &mut rng_for(2, &[]));
        let p = forward(&spec, &params, &x).unwrap();
        for i in 0..6 {
            assert_eq!(p[i], x[(i, 0)]);
        }
    }

    #[test]
    fn fair_coin_entropy() {
        let spec = ModelSpec::logistic(2);
        let x = random_matrix(4, 2, &mut rng_for(3, &[]));
        let y = DVector::from_vec(vec![0.0, 1.0, 1.0, 0.0]);
        let (loss, _) =
            loss_and_grad(&spec, &ParamVector::zeros(&spec), &x, &y, LossKind::BinaryCrossEntropy)
                .unwrap();
        assert!((loss - core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn perfect_fit_has_zero_loss_and_gradient() {
        let spec = ModelSpec::linear(2);
        let params = ParamVector {
            values: vec![1.0, -2.0, 0.5],
        };
        let x = random_matrix(7, 2, &mut rng_for(4, &[]));
        let y = forward(&spec, &params, &x).unwrap();
        let (loss, grad) = loss_and_grad(&spec, &params, &x, &y, LossKind::Mse).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn prediction_error_sign() {
        let spec = ModelSpec::linear(1);
        let params = ParamVector {
            values: vec![1.0, 0.25],
        };
        let x = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let nu = predict_error(&spec, &params, &x, &y).unwrap();
        assert!(nu.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn rejects_bad_inputs() {
        let spec = ModelSpec::logistic(2);
        let x = DMatrix::zeros(3, 3);
        assert!(matches!(
            forward(&spec, &ParamVector::zeros(&spec), &x),
            Err(Error::DimensionMismatch { .. })
        ));
        let mut p = ParamVector::zeros(&spec);
        p.values[1] = f64::NAN;
        assert_eq!(
            forward(&spec, &p, &DMatrix::zeros(3, 2)).unwrap_err(),
            Error::NonFiniteParams
        );
        assert!(ModelSpec::linear(2)
            .validate()
            .and(loss_and_grad(
                &ModelSpec::linear(2),
                &ParamVector::zeros(&ModelSpec::linear(2)),
                &DMatrix::zeros(3, 2),
                &DVector::zeros(3),
                LossKind::BinaryCrossEntropy
            )
            .map(|_| ()))
            .is_err());
    }

    #[test]
    fn param_bytes_round_trip() {
        let spec = ModelSpec::mlp3(4, OutputKind::Real);
        let p = ParamVector::init(&spec, &mut rng_for(9, &[]));
        assert_eq!(p.len(), 4 * 32 + 32 + 32 * 16 + 16 + 16 + 1);
        let back = ParamVector::from_le_bytes(&spec, &p.to_le_bytes()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn standardizer_centers_and_scales() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0, 4.0, 5.0]);
        let s = Standardizer::fit(&x);
        let z = s.apply(&x);
        assert!(z.column(0).sum().abs() < 1e-12);
        assert!((z.column(0).norm_squared() / 4.0 - 1.0).abs() < 1e-12);
        assert!(z.column(1).iter().all(|&v| v == 0.0));
    }
}
