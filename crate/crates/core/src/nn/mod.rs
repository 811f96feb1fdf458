//! Sequential model specs, parameters, hidden-layer probes and the
//! defended composition `M(AE(x))`.

mod model;
mod params;
mod probe;
mod spec;

use alloc::format;
use alloc::vec::Vec;

pub use model::{build_model, predict, predict_proba, reconstruct, Bound, Mode, Model, Preprocessing, DATA_DOMAIN, INIT_SCHEME};
pub use params::{LayerParams, ParameterStore};
pub use probe::{hidden_probe_forward, probe_logits, HiddenProbe};
pub use spec::{Layer, ModelSpec};

use crate::error::{Error, Result};
use crate::tape::{softmax_rows, Tape, Var};
use crate::tensor::Tensor;

const EVAL_CHUNK: usize = 500;

/// A differentiable classifier an attack can be run against.
pub trait Target: Sync {
    fn input_shape(&self) -> &[usize];

    fn num_classes(&self) -> usize;

    /// Records pre-softmax logits for `x` on `tape` with all parameters held
    /// constant, so only inputs receive gradients.
    fn logits_on(&self, tape: &mut Tape, x: Var) -> Result<Var>;

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        if x.item_shape() != self.input_shape() {
            return Err(Error::dim("target input", x.shape(), self.input_shape()));
        }
        let mut parts = Vec::new();
        let mut start = 0;
        while start < x.batch() {
            let end = (start + EVAL_CHUNK).min(x.batch());
            let mut tape = Tape::new();
            let v = tape.constant(x.slice_batch(start, end));
            let z = self.logits_on(&mut tape, v)?;
            parts.push(tape.value(z).clone());
            start = end;
        }
        Tensor::concat_batch(&parts)
    }

    fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        Ok(softmax_rows(&self.logits(x)?))
    }

    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }
}

impl Target for Model {
    fn input_shape(&self) -> &[usize] {
        Model::input_shape(self)
    }

    fn num_classes(&self) -> usize {
        self.output_shape().last().copied().unwrap_or(0)
    }

    fn logits_on(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let bound = self.bind(tape, false);
        self.forward_logits(tape, &bound, x, &mut Mode::Eval)
    }
}

/// `M(AE(x))`: gradients flow through both models.
#[derive(Clone, Copy, Debug)]
pub struct Defended<'a> {
    pub classifier: &'a Model,
    pub ae: &'a Model,
}

/// Composes an autoencoder in front of a classifier.
pub fn compose_defended<'a>(classifier: &'a Model, ae: &'a Model) -> Result<Defended<'a>> {
    let out = ae.output_shape();
    if out != ae.input_shape() || out != classifier.input_shape() {
        return Err(Error::Composition(format!(
            "autoencoder maps {:?} -> {:?} but the classifier expects {:?}",
            ae.input_shape(),
            out,
            classifier.input_shape()
        )));
    }
    classifier.spec().validate_classifier()?;
    Ok(Defended { classifier, ae })
}

impl Target for Defended<'_> {
    fn input_shape(&self) -> &[usize] {
        self.ae.input_shape()
    }

    fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    fn logits_on(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let ab = self.ae.bind(tape, false);
        let r = self.ae.forward_reconstruction(tape, &ab, x, &mut Mode::Eval)?;
        self.classifier.logits_on(tape, r)
    }
}
