use alloc::format;
use alloc::vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::model::{Bound, Mode, Model};
use crate::error::{Error, Result};
use crate::math;
use crate::seed;
use crate::tape::{softmax_rows, Tape, Var};
use crate::tensor::Tensor;

/// Softmax projection `y(x) = softmax(W F(x) + b)` of the flattened output
/// `F(x)` of one classifier layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenProbe {
    /// Index of the classifier layer whose output is `F(x)` (inclusive).
    pub source_layer: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl HiddenProbe {
    /// Glorot-initialised probe of width `dim` on `model`'s layer `source_layer`.
    pub fn new(model: &Model, source_layer: usize, dim: usize, seed: u64) -> Result<HiddenProbe> {
        let feat = feature_len(model, source_layer)?;
        if dim < 2 {
            return Err(Error::Config(format!("probe dimension must be at least 2, got {dim}")));
        }
        let limit = math::sqrt(6.0 / (feat + dim) as f64);
        let mut rng = seed::rng(seed);
        let data = (0..feat * dim).map(|_| rng.random_range(-limit..limit)).collect();
        Ok(HiddenProbe {
            source_layer,
            weight: Tensor::new(vec![feat, dim], data)?,
            bias: Tensor::zeros(&[dim]),
        })
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    /// Checks that the probe fits `model`.
    pub fn check(&self, model: &Model) -> Result<()> {
        let feat = feature_len(model, self.source_layer)?;
        if self.weight.shape() != [feat, self.dim()] {
            return Err(Error::Config(format!(
                "probe weight {:?} does not fit feature length {feat}",
                self.weight.shape()
            )));
        }
        Ok(())
    }
}

fn feature_len(model: &Model, layer: usize) -> Result<usize> {
    let shapes = model.spec().shapes()?;
    shapes
        .get(layer)
        .map(|s| s.iter().product())
        .ok_or_else(|| Error::Config(format!("probe source layer {layer} does not exist (model has {})", shapes.len())))
}

/// Probe logits on a tape, given the classifier's bound parameters and the
/// probe's weight/bias vars.
pub fn probe_logits(
    tape: &mut Tape,
    model: &Model,
    bound: &Bound,
    source_layer: usize,
    w: Var,
    b: Var,
    x: Var,
) -> Result<Var> {
    let f = model.forward_to(tape, bound, x, source_layer + 1, &mut Mode::Eval)?;
    let f = tape.flatten(f)?;
    let z = tape.matmul(f, w)?;
    tape.add_bias(z, b)
}

/// `y(x)` for a batch, one distribution per row.
pub fn hidden_probe_forward(model: &Model, probe: &HiddenProbe, x: &Tensor) -> Result<Tensor> {
    probe.check(model)?;
    let f = model.features(x, probe.source_layer)?;
    let mut tape = Tape::new();
    let fv = tape.constant(f);
    let w = tape.constant(probe.weight.clone());
    let b = tape.constant(probe.bias.clone());
    let z = tape.matmul(fv, w)?;
    let z = tape.add_bias(z, b)?;
    Ok(softmax_rows(tape.value(z)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::build_model;
    use crate::nn::spec::{Layer, ModelSpec};

    fn toy() -> Model {
        build_model(ModelSpec::mlp_classifier("toy", &[3], &[4], 2), 0).unwrap()
    }

    #[test]
    fn zero_probe_is_uniform() {
        let m = toy();
        let mut p = HiddenProbe::new(&m, 2, 5, 1).unwrap();
        p.weight = Tensor::zeros(p.weight.shape());
        let x = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 0.9, 0.8, 0.7]).unwrap();
        let y = hidden_probe_forward(&m, &p, &x).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn probe_width_follows_config() {
        let m = toy();
        let p = HiddenProbe::new(&m, 1, 20, 1).unwrap();
        let x = Tensor::zeros(&[3, 3]);
        let y = hidden_probe_forward(&m, &p, &x).unwrap();
        assert_eq!(y.shape(), &[3, 20]);
        for row in y.data().chunks(20) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_sized_probe() {
        // F(x) = x itself (flatten of a 2-vector input).
        let spec = ModelSpec::new("id", &[2], vec![Layer::Flatten, Layer::Dense { units: 2 }, Layer::Softmax]);
        let m = build_model(spec, 0).unwrap();
        let p = HiddenProbe {
            source_layer: 0,
            weight: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: Tensor::new(vec![2], vec![0.0, 1.0]).unwrap(),
        };
        let x = Tensor::new(vec![1, 2], vec![2.0, 0.5]).unwrap();
        let y = hidden_probe_forward(&m, &p, &x).unwrap();
        // logits [2, 1.5]
        let a = math::exp(2.0);
        let b = math::exp(1.5);
        assert!((y.data()[0] - a / (a + b)).abs() < 1e-15);
        assert!((y.data()[1] - b / (a + b)).abs() < 1e-15);
    }

    #[test]
    fn invalid_source_layer_is_config_error() {
        let m = toy();
        assert!(matches!(HiddenProbe::new(&m, 17, 4, 0), Err(Error::Config(_))));
    }
}
