use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::params::{LayerParams, ParameterStore};
use super::spec::{Layer, ModelSpec};
use crate::error::{Error, Result};
use crate::math;
use crate::seed::{self, Rng};
use crate::tape::{softmax_rows, Tape, Var};
use crate::tensor::Tensor;

/// Initialisation recorded in checkpoint metadata.
pub const INIT_SCHEME: &str = "he_uniform_before_relu+glorot_uniform_otherwise;zero_bias";

/// Data domain that reconstructions are clamped into.
pub const DATA_DOMAIN: (f64, f64) = (0.0, 1.0);

/// Inference-time batch size for the non-differentiable helpers.
const EVAL_CHUNK: usize = 500;

/// Input preprocessing applied at the model boundary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preprocessing {
    /// Per-image standardisation `(x - mean) / max(std, 1e-6)`.
    pub standardize: bool,
}

/// A model specification together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    seed: u64,
    params: ParameterStore,
    preprocessing: Preprocessing,
}

/// Parameter variables of one model bound onto a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Option<(Var, Var)>>,
}

impl Bound {
    /// `(layer, weight var, bias var)` for each bound group.
    pub fn iter(&self) -> impl Iterator<Item = (usize, Var, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|(w, b)| (i, w, b)))
    }
}

/// Whether a forward pass is for training (dropout active) or inference.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

/// Deterministically initialises a model from `(spec, seed)`.
pub fn build_model(spec: ModelSpec, seed: u64) -> Result<Model> {
    let shapes = spec.param_shapes()?;
    let mut rng = seed::rng(seed);
    let mut groups = Vec::with_capacity(shapes.len());
    for (i, s) in shapes.into_iter().enumerate() {
        let Some((wshape, bshape)) = s else {
            groups.push(None);
            continue;
        };
        let (fan_in, fan_out) = match spec.layers[i] {
            Layer::Conv { kernel, .. } => (kernel * kernel * wshape[2], kernel * kernel * wshape[3]),
            _ => (wshape[0], wshape[1]),
        };
        let feeds_relu = spec.layers[i + 1..]
            .iter()
            .find(|l| !matches!(l, Layer::Dropout { .. }))
            .is_some_and(|l| *l == Layer::Relu);
        let limit = if feeds_relu {
            math::sqrt(6.0 / fan_in as f64)
        } else {
            math::sqrt(6.0 / (fan_in + fan_out) as f64)
        };
        let n: usize = wshape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
        groups.push(Some(LayerParams {
            weight: Tensor::new(wshape, data)?,
            bias: Tensor::zeros(&bshape),
        }));
    }
    Ok(Model {
        spec,
        seed,
        params: ParameterStore::new(groups),
        preprocessing: Preprocessing::default(),
    })
}

impl Model {
    /// Reassembles a model from stored parts, checking parameter shapes
    /// against the spec.
    pub fn from_parts(spec: ModelSpec, seed: u64, params: ParameterStore, preprocessing: Preprocessing) -> Result<Model> {
        let shapes = spec.param_shapes()?;
        if shapes.len() != params.len() {
            return Err(Error::Config(format!(
                "spec has {} layers but parameters cover {}",
                shapes.len(),
                params.len()
            )));
        }
        for (i, s) in shapes.iter().enumerate() {
            match (s, params.get(i)) {
                (None, None) => {}
                (Some((w, b)), Some(p)) if p.weight.shape() == &w[..] && p.bias.shape() == &b[..] => {}
                _ => {
                    return Err(Error::Spec {
                        layer: i,
                        reason: "parameter shapes do not match the spec".into(),
                    })
                }
            }
        }
        Ok(Model {
            spec,
            seed,
            params,
            preprocessing,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn preprocessing(&self) -> Preprocessing {
        self.preprocessing
    }

    pub fn set_preprocessing(&mut self, p: Preprocessing) {
        self.preprocessing = p;
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.spec.input_shape
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.spec.output_shape().expect("validated at build")
    }

    /// Index just past the last non-softmax layer.
    pub fn logits_end(&self) -> usize {
        match self.spec.layers.last() {
            Some(Layer::Softmax) => self.spec.layers.len() - 1,
            _ => self.spec.layers.len(),
        }
    }

    /// Puts the parameters on `tape`, as gradient-receiving leaves when
    /// `trainable` (frozen groups always become constants).
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = (0..self.params.len())
            .map(|i| {
                self.params.get(i).map(|p| {
                    let rg = trainable && !self.params.is_frozen(i);
                    (tape.leaf(p.weight.clone(), rg), tape.leaf(p.bias.clone(), rg))
                })
            })
            .collect();
        Bound { vars }
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != self.spec.input_shape.len() + 1 || x.item_shape() != &self.spec.input_shape[..] {
            return Err(Error::dim("model input", x.shape(), &self.spec.input_shape));
        }
        Ok(())
    }

    /// Runs layers `0..end` (preprocessing included).
    pub fn forward_to(&self, tape: &mut Tape, bound: &Bound, x: Var, end: usize, mode: &mut Mode<'_>) -> Result<Var> {
        self.forward_range(tape, bound, x, 0, end, mode)
    }

    /// Runs layers `start..end` on `h`, which must be the output of layer
    /// `start - 1` (or the raw input when `start == 0`, in which case
    /// preprocessing is applied first).
    pub fn forward_range(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        h: Var,
        start: usize,
        end: usize,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let mut h = h;
        if start == 0 {
            self.check_input(tape.value(h))?;
            if self.preprocessing.standardize {
                h = tape.standardize(h)?;
            }
        }
        for (i, layer) in self.spec.layers.iter().enumerate().take(end).skip(start) {
            h = match layer {
                Layer::Dense { .. } => {
                    let (w, b) = bound.vars[i].expect("dense params");
                    let z = tape.matmul(h, w)?;
                    tape.add_bias(z, b)?
                }
                Layer::Conv { stride, padding, .. } => {
                    let (w, b) = bound.vars[i].expect("conv params");
                    let z = tape.conv2d(h, w, *stride, *padding)?;
                    tape.add_bias(z, b)?
                }
                Layer::MaxPool { window, stride } => tape.maxpool2d(h, *window, *stride)?,
                Layer::Relu => tape.relu(h)?,
                Layer::Sigmoid => tape.sigmoid(h)?,
                Layer::Softmax => tape.softmax_last(h)?,
                Layer::Flatten => tape.flatten(h)?,
                Layer::Reshape { shape } => {
                    let mut full = vec![tape.value(h).batch()];
                    full.extend_from_slice(shape);
                    tape.reshape(h, &full)?
                }
                Layer::Dropout { rate } => match mode {
                    Mode::Eval => h,
                    Mode::Train(rng) => {
                        if *rate == 0.0 {
                            h
                        } else {
                            let keep = 1.0 - rate;
                            let v = tape.value(h);
                            let mask: Vec<f64> = (0..v.len())
                                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                                .collect();
                            let m = tape.constant(Tensor::new(v.shape().to_vec(), mask)?);
                            tape.mul(h, m)?
                        }
                    }
                },
            };
        }
        Ok(h)
    }

    /// Full forward pass.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        self.forward_to(tape, bound, x, self.spec.layers.len(), mode)
    }

    /// Forward pass up to (not including) a trailing softmax.
    pub fn forward_logits(&self, tape: &mut Tape, bound: &Bound, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        self.forward_to(tape, bound, x, self.logits_end(), mode)
    }

    /// Autoencoder forward pass clamped into the data domain.
    pub fn forward_reconstruction(&self, tape: &mut Tape, bound: &Bound, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let out = self.forward(tape, bound, x, mode)?;
        if tape.value(out).shape() != tape.value(x).shape() {
            return Err(Error::dim("reconstruct", tape.value(out).shape(), tape.value(x).shape()));
        }
        tape.clamp(out, DATA_DOMAIN.0, DATA_DOMAIN.1)
    }

    /// Evaluates `f` on chunks of `x` with frozen parameters and stacks the results.
    fn eval_chunked(&self, x: &Tensor, f: impl Fn(&Model, &mut Tape, &Bound, Var) -> Result<Var>) -> Result<Tensor> {
        self.check_input(x)?;
        let mut parts = Vec::new();
        let n = x.batch();
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false);
            let xv = tape.constant(x.slice_batch(start, end));
            let out = f(self, &mut tape, &bound, xv)?;
            parts.push(tape.value(out).clone());
            start = end;
        }
        Tensor::concat_batch(&parts)
    }

    /// Pre-softmax outputs of a classifier.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.eval_chunked(x, |m, t, b, v| m.forward_logits(t, b, v, &mut Mode::Eval))
    }

    /// Output of layer `layer` (inclusive), flattened per instance.
    pub fn features(&self, x: &Tensor, layer: usize) -> Result<Tensor> {
        if layer >= self.spec.layers.len() {
            return Err(Error::Config(format!(
                "layer {layer} does not exist (model has {})",
                self.spec.layers.len()
            )));
        }
        self.eval_chunked(x, |m, t, b, v| {
            let h = m.forward_to(t, b, v, layer + 1, &mut Mode::Eval)?;
            t.flatten(h)
        })
    }
}

/// Class distributions `M(x)`, one row per instance.
pub fn predict_proba(model: &Model, x: &Tensor) -> Result<Tensor> {
    let z = model.logits(x)?;
    Ok(softmax_rows(&z))
}

/// `C(x) = argmax M(x)`.
pub fn predict(model: &Model, x: &Tensor) -> Result<Vec<usize>> {
    Ok(model.logits(x)?.argmax_rows())
}

/// `x' = AE(x)`, clamped into the data domain.
pub fn reconstruct(ae: &Model, x: &Tensor) -> Result<Tensor> {
    ae.eval_chunked(x, |m, t, b, v| m.forward_reconstruction(t, b, v, &mut Mode::Eval))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::Layer;

    fn toy_classifier() -> Model {
        build_model(ModelSpec::mlp_classifier("toy", &[4, 4, 1], &[8], 3), 1).unwrap()
    }

    fn toy_input(n: usize) -> Tensor {
        let data = (0..n * 16).map(|i| ((i * 37) % 17) as f64 / 17.0).collect();
        Tensor::new(vec![n, 4, 4, 1], data).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let a = toy_classifier();
        let b = toy_classifier();
        assert_eq!(a.params().fingerprint(), b.params().fingerprint());
        let c = build_model(a.spec().clone(), 2).unwrap();
        assert_ne!(a.params().fingerprint(), c.params().fingerprint());
    }

    #[test]
    fn build_rejects_broken_chain() {
        let spec = ModelSpec::new("bad", &[4, 4, 1], vec![Layer::Dense { units: 2 }]);
        assert!(matches!(build_model(spec, 0), Err(Error::Spec { layer: 0, .. })));
    }

    #[test]
    fn predict_proba_rows_sum_to_one() {
        let m = toy_classifier();
        let p = predict_proba(&m, &toy_input(5)).unwrap();
        assert_eq!(p.shape(), &[5, 3]);
        for row in p.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_proba_rejects_wrong_shape() {
        let m = toy_classifier();
        let x = Tensor::zeros(&[2, 5, 4, 1]);
        assert!(matches!(predict_proba(&m, &x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn single_dense_softmax_by_hand() {
        let spec = ModelSpec::new("lin", &[2], vec![Layer::Dense { units: 2 }, Layer::Softmax]);
        let mut m = build_model(spec, 0).unwrap();
        let p = m.params_mut().get_mut(0).unwrap();
        p.weight = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        p.bias = Tensor::new(vec![2], vec![0.0, -1.0]).unwrap();
        let x = Tensor::new(vec![1, 2], vec![0.5, 1.0]).unwrap();
        // logits [0.5, 1.0]
        let e0 = math::exp(0.5);
        let e1 = math::exp(1.0);
        let out = predict_proba(&m, &x).unwrap();
        assert!((out.data()[0] - e0 / (e0 + e1)).abs() < 1e-15);
        assert!((out.data()[1] - e1 / (e0 + e1)).abs() < 1e-15);
    }

    #[test]
    fn reconstruction_keeps_shape_and_domain() {
        let ae = build_model(ModelSpec::dense_autoencoder("ae", &[4, 4, 1], 8, 3, false), 3).unwrap();
        let x = toy_input(4);
        let r = reconstruct(&ae, &x).unwrap();
        assert_eq!(r.shape(), x.shape());
        assert!(r.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn identity_initialised_linear_ae_is_finite() {
        let spec = ModelSpec::new("ae1d", &[1], vec![Layer::Dense { units: 1 }]);
        let mut ae = build_model(spec, 0).unwrap();
        ae.params_mut().get_mut(0).unwrap().weight = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let x = Tensor::new(vec![3, 1], vec![0.0, 0.4, 1.0]).unwrap();
        let r = reconstruct(&ae, &x).unwrap();
        assert!(r.is_finite());
        assert_eq!(r.data(), x.data());
    }

    #[test]
    fn standardized_input_is_scale_invariant() {
        let mut m = toy_classifier();
        m.set_preprocessing(Preprocessing { standardize: true });
        let x = toy_input(2);
        let x2 = x.map(|v| 0.5 * v + 0.1);
        let a = predict_proba(&m, &x).unwrap();
        let b = predict_proba(&m, &x2).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn features_reject_missing_layer() {
        let m = toy_classifier();
        assert!(matches!(m.features(&toy_input(1), 99), Err(Error::Config(_))));
        assert_eq!(m.features(&toy_input(2), 1).unwrap().shape(), &[2, 8]);
    }
}
