//! Optimizers and the two training loops: supervised classifier training
//! and unsupervised prediction-matching training of the defence autoencoder.

mod optim;

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use optim::{OptimizerConfig, OptimizerKind};
use optim::Optimizer;

use crate::error::{Error, Result};
use crate::math;
use crate::nn::{predict_proba, probe_logits, Bound, HiddenProbe, Mode, Model};
use crate::seed::{self, Rng};
use crate::tape::{validate_distribution, Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Default weight of the hidden-layer term.
pub const DEFAULT_HIDDEN_WEIGHT: f64 = 1.0;

fn default_hidden_weight() -> f64 {
    DEFAULT_HIDDEN_WEIGHT
}

/// Objective for the defence autoencoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenceLoss {
    /// `KL(M(x) || M(AE(x)))`.
    Kl,
    /// `||x - AE(x)||^2`, batch mean.
    Mse,
    /// `KL(M(x)_T || M(AE(x)))`; only the target is tempered.
    KlTemperature { temperature: f64 },
    /// `KL(M(x) || M(AE(x))) + weight * KL(y(x) || y(AE(x)))` with a jointly
    /// trained softmax probe `y` on classifier layer `source_layer`.
    KlHidden {
        source_layer: usize,
        dim: usize,
        #[serde(default = "default_hidden_weight")]
        weight: f64,
    },
}

impl DefenceLoss {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DefenceLoss::KlTemperature { temperature } if !(temperature > 0.0 && temperature.is_finite()) => {
                Err(Error::Parameter(format!("temperature must be positive, got {temperature}")))
            }
            DefenceLoss::KlHidden { weight, .. } if !(weight >= 0.0 && weight.is_finite()) => {
                Err(Error::Parameter(format!("hidden-layer weight must be non-negative, got {weight}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean per-instance training loss over the epoch.
    pub loss: f64,
    /// Learning rate in effect during the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    /// Mean loss over the training set before the first update.
    pub initial_loss: f64,
    pub epochs: Vec<EpochRecord>,
    pub final_loss: f64,
    /// Filled in by callers that can read a clock.
    pub wall_time_secs: Option<f64>,
    pub loss: Option<DefenceLoss>,
}

/// `M(x)_T = M(x)^(1/T) / sum_j M(x)_j^(1/T)`, row-wise.
pub fn temperature_scale(p: &Tensor, t: f64) -> Result<Tensor> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Parameter(format!("temperature must be positive, got {t}")));
    }
    validate_distribution(p)?;
    let k = *p.shape().last().expect("validated");
    let mut out = p.clone();
    for row in out.data_mut().chunks_mut(k) {
        let top = row
            .iter()
            .filter(|v| **v > 0.0)
            .map(|v| math::ln(*v))
            .fold(f64::NEG_INFINITY, f64::max);
        for v in row.iter_mut() {
            *v = if *v > 0.0 { math::exp((math::ln(*v) - top) / t) } else { 0.0 };
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(out)
}

/// Trainable parameter tensors of one model, in slot order.
fn slot_sizes(model: &Model) -> Vec<usize> {
    let store = model.params();
    store
        .iter()
        .filter(|(i, _)| !store.is_frozen(*i))
        .flat_map(|(_, p)| [p.weight.len(), p.bias.len()])
        .collect()
}

/// Applies one optimizer step to `model` from the gradients of its bound
/// parameters; returns the next free slot.
fn apply(model: &mut Model, bound: &Bound, grads: &Gradients, opt: &mut Optimizer, lr: f64, mut slot: usize) -> usize {
    for (layer, w, b) in bound.iter() {
        if model.params().is_frozen(layer) {
            continue;
        }
        let p = model.params_mut().get_mut(layer).expect("bound layer has params");
        let zw = alloc::vec![0.0; p.weight.len()];
        opt.update(slot, p.weight.data_mut(), grads.get(w).unwrap_or(&zw), lr);
        let zb = alloc::vec![0.0; p.bias.len()];
        opt.update(slot + 1, p.bias.data_mut(), grads.get(b).unwrap_or(&zb), lr);
        slot += 2;
    }
    slot
}

fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Evaluation(_) => Error::Divergence { epoch, loss: f64::NAN },
        other => other,
    }
}

/// Mean of a per-batch loss over the whole set, evaluated without updates.
fn eval_mean(n: usize, batch: usize, mut f: impl FnMut(&[usize]) -> Result<f64>) -> Result<f64> {
    let idx: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch.max(1)) {
        total += f(chunk)? * chunk.len() as f64;
    }
    Ok(total / n as f64)
}

/// Supervised training with cross-entropy; mutates `model` in place.
pub fn train_classifier(model: &mut Model, x: &Tensor, y: &[usize], opt: &OptimizerConfig) -> Result<TrainReport> {
    opt.validate()?;
    let k = model.spec().validate_classifier()?;
    model.check_input(x)?;
    if x.batch() != y.len() {
        return Err(Error::Data(format!("{} images but {} labels", x.batch(), y.len())));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
    }
    if model.params().all_frozen() {
        return Err(Error::Contract("cannot train a model whose parameters are all frozen".into()));
    }
    let n = x.batch();
    let loss_on = |model: &Model, tape: &mut Tape, idx: &[usize], mode: &mut Mode<'_>, trainable: bool| -> Result<(Var, Bound)> {
        let bound = model.bind(tape, trainable);
        let xv = tape.constant(x.select_batch(idx));
        let z = model.forward_logits(tape, &bound, xv, mode)?;
        let labels: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
        Ok((tape.cross_entropy(z, &labels)?, bound))
    };
    let initial_loss = eval_mean(n, opt.batch_size, |idx| {
        let mut tape = Tape::new();
        let (l, _) = loss_on(model, &mut tape, idx, &mut Mode::Eval, false).map_err(diverged(0))?;
        Ok(tape.value(l).data()[0])
    })?;

    let mut shuffle_rng = seed::rng(seed::derive_seed(opt.seed, "train/shuffle"));
    let mut dropout_rng = seed::rng(seed::derive_seed(opt.seed, "train/dropout"));
    let mut optimizer = Optimizer::new(opt.optimizer, &slot_sizes(model));
    let mut order: Vec<usize> = (0..n).collect();
    let mut epochs = Vec::with_capacity(opt.epochs);
    for epoch in 1..=opt.epochs {
        let lr = opt.lr_at(epoch - 1);
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for idx in order.chunks(opt.batch_size) {
            let mut tape = Tape::new();
            let (l, bound) = loss_on(model, &mut tape, idx, &mut Mode::Train(&mut dropout_rng), true)
                .map_err(diverged(epoch))?;
            let grads = tape.backward(l)?;
            total += tape.value(l).data()[0] * idx.len() as f64;
            optimizer.begin_step();
            apply(model, &bound, &grads, &mut optimizer, lr, 0);
        }
        let loss = total / n as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch, loss });
        }
        epochs.push(EpochRecord { epoch, loss, lr });
    }
    Ok(TrainReport {
        seed: opt.seed,
        initial_loss,
        final_loss: epochs.last().map_or(initial_loss, |e| e.loss),
        epochs,
        wall_time_secs: None,
        loss: None,
    })
}

/// Result of [`train_defence`]: the report and, for the hidden-layer loss,
/// the jointly trained probe.
#[derive(Clone, Debug)]
pub struct DefenceOutcome {
    pub report: TrainReport,
    pub probe: Option<HiddenProbe>,
}

/// Called after each epoch with the 1-based epoch number and the current AE.
pub type EpochHook<'a> = &'a mut dyn FnMut(usize, &Model) -> Result<()>;

struct DefenceCtx<'a> {
    classifier: &'a Model,
    x: &'a Tensor,
    loss: &'a DefenceLoss,
    /// Cached (possibly tempered) `M(x)`.
    targets: Option<Tensor>,
    /// Cached flattened `F(x)` for the hidden-layer probe.
    features: Option<Tensor>,
}

impl DefenceCtx<'_> {
    /// Records the batch loss; returns the loss var plus bound AE and probe vars.
    fn record(
        &self,
        tape: &mut Tape,
        ae: &Model,
        probe: Option<&HiddenProbe>,
        idx: &[usize],
        mode: &mut Mode<'_>,
        trainable: bool,
    ) -> Result<(Var, Bound, Option<(Var, Var)>)> {
        let ab = ae.bind(tape, trainable);
        let xv = tape.constant(self.x.select_batch(idx));
        let r = ae.forward_reconstruction(tape, &ab, xv, mode)?;
        if let DefenceLoss::Mse = self.loss {
            let d = tape.sub(r, xv)?;
            let sq = tape.mul(d, d)?;
            let s = tape.sum(sq)?;
            let l = tape.scale(s, 1.0 / idx.len() as f64)?;
            return Ok((l, ab, None));
        }
        let clf = self.classifier;
        let cb = clf.bind(tape, false);
        let p = tape.constant(self.targets.as_ref().expect("kl targets").select_batch(idx));
        match (self.loss, probe) {
            (DefenceLoss::KlHidden { source_layer, weight, .. }, Some(probe)) => {
                let cut = source_layer + 1;
                let h = clf.forward_range(tape, &cb, r, 0, cut, &mut Mode::Eval)?;
                let z = clf.forward_range(tape, &cb, h, cut, clf.logits_end(), &mut Mode::Eval)?;
                let q = tape.softmax_last(z)?;
                let main = tape.kl_divergence(p, q)?;
                let w = tape.leaf(probe.weight.clone(), trainable);
                let b = tape.leaf(probe.bias.clone(), trainable);
                let fx = tape.constant(self.features.as_ref().expect("probe features").select_batch(idx));
                let zx = tape.matmul(fx, w)?;
                let zx = tape.add_bias(zx, b)?;
                let yx = tape.softmax_last(zx)?;
                let fr = tape.flatten(h)?;
                let zr = tape.matmul(fr, w)?;
                let zr = tape.add_bias(zr, b)?;
                let yr = tape.softmax_last(zr)?;
                let hidden = tape.kl_divergence(yx, yr)?;
                let hidden = tape.scale(hidden, *weight)?;
                let l = tape.add(main, hidden)?;
                Ok((l, ab, Some((w, b))))
            }
            _ => {
                let z = clf.forward_logits(tape, &cb, r, &mut Mode::Eval)?;
                let q = tape.softmax_last(z)?;
                Ok((tape.kl_divergence(p, q)?, ab, None))
            }
        }
    }
}

/// Trains `ae` against a frozen `classifier` on unlabelled inputs `x`.
pub fn train_defence(
    ae: &mut Model,
    classifier: &Model,
    x: &Tensor,
    loss: &DefenceLoss,
    opt: &OptimizerConfig,
) -> Result<DefenceOutcome> {
    train_defence_with(ae, classifier, x, loss, opt, &mut |_, _| Ok(()))
}

/// [`train_defence`] with a per-epoch hook (used for checkpointing).
pub fn train_defence_with(
    ae: &mut Model,
    classifier: &Model,
    x: &Tensor,
    loss: &DefenceLoss,
    opt: &OptimizerConfig,
    on_epoch: EpochHook<'_>,
) -> Result<DefenceOutcome> {
    opt.validate()?;
    loss.validate()?;
    if !classifier.params().all_frozen() {
        return Err(Error::Contract("the classifier must be frozen before training the defence".into()));
    }
    classifier.spec().validate_classifier()?;
    if ae.output_shape() != classifier.input_shape() || ae.input_shape() != classifier.input_shape() {
        return Err(Error::Composition(format!(
            "autoencoder maps {:?} -> {:?} but the classifier expects {:?}",
            ae.input_shape(),
            ae.output_shape(),
            classifier.input_shape()
        )));
    }
    ae.check_input(x)?;
    if ae.params().all_frozen() {
        return Err(Error::Contract("cannot train an autoencoder whose parameters are all frozen".into()));
    }

    let targets = match loss {
        DefenceLoss::Mse => None,
        DefenceLoss::KlTemperature { temperature } => Some(temperature_scale(&predict_proba(classifier, x)?, *temperature)?),
        _ => Some(predict_proba(classifier, x)?),
    };
    let (mut probe, features) = match loss {
        DefenceLoss::KlHidden { source_layer, dim, .. } => {
            if *source_layer >= classifier.logits_end() {
                return Err(Error::Config(format!(
                    "probe source layer {source_layer} must precede the classifier output"
                )));
            }
            let p = HiddenProbe::new(classifier, *source_layer, *dim, seed::derive_seed(opt.seed, "train/probe"))?;
            (Some(p), Some(classifier.features(x, *source_layer)?))
        }
        _ => (None, None),
    };
    let ctx = DefenceCtx {
        classifier,
        x,
        loss,
        targets,
        features,
    };

    let n = x.batch();
    let initial_loss = eval_mean(n, opt.batch_size, |idx| {
        let mut tape = Tape::new();
        let (l, _, _) = ctx
            .record(&mut tape, ae, probe.as_ref(), idx, &mut Mode::Eval, false)
            .map_err(diverged(0))?;
        Ok(tape.value(l).data()[0])
    })?;

    let mut sizes = slot_sizes(ae);
    if let Some(p) = &probe {
        sizes.extend([p.weight.len(), p.bias.len()]);
    }
    let mut optimizer = Optimizer::new(opt.optimizer, &sizes);
    let mut shuffle_rng = seed::rng(seed::derive_seed(opt.seed, "train/shuffle"));
    let mut dropout_rng: Rng = seed::rng(seed::derive_seed(opt.seed, "train/dropout"));
    let mut order: Vec<usize> = (0..n).collect();
    let mut epochs = Vec::with_capacity(opt.epochs);
    for epoch in 1..=opt.epochs {
        let lr = opt.lr_at(epoch - 1);
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for idx in order.chunks(opt.batch_size) {
            let mut tape = Tape::new();
            let (l, bound, probe_vars) = ctx
                .record(&mut tape, ae, probe.as_ref(), idx, &mut Mode::Train(&mut dropout_rng), true)
                .map_err(diverged(epoch))?;
            let value = tape.value(l).data()[0];
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, loss: value });
            }
            let grads = tape.backward(l)?;
            total += value * idx.len() as f64;
            optimizer.begin_step();
            let slot = apply(ae, &bound, &grads, &mut optimizer, lr, 0);
            if let (Some(p), Some((w, b))) = (probe.as_mut(), probe_vars) {
                let zw = alloc::vec![0.0; p.weight.len()];
                optimizer.update(slot, p.weight.data_mut(), grads.get(w).unwrap_or(&zw), lr);
                let zb = alloc::vec![0.0; p.bias.len()];
                optimizer.update(slot + 1, p.bias.data_mut(), grads.get(b).unwrap_or(&zb), lr);
            }
        }
        let loss_value = total / n as f64;
        if !loss_value.is_finite() {
            return Err(Error::Divergence { epoch, loss: loss_value });
        }
        epochs.push(EpochRecord {
            epoch,
            loss: loss_value,
            lr,
        });
        on_epoch(epoch, ae)?;
    }
    Ok(DefenceOutcome {
        report: TrainReport {
            seed: opt.seed,
            initial_loss,
            final_loss: epochs.last().map_or(initial_loss, |e| e.loss),
            epochs,
            wall_time_secs: None,
            loss: Some(loss.clone()),
        },
        probe,
    })
}

/// Mean defence loss of `ae` over `x` without training (hidden-layer losses
/// need the trained probe).
pub fn defence_loss(ae: &Model, classifier: &Model, x: &Tensor, loss: &DefenceLoss, probe: Option<&HiddenProbe>) -> Result<f64> {
    loss.validate()?;
    let targets = match loss {
        DefenceLoss::Mse => None,
        DefenceLoss::KlTemperature { temperature } => Some(temperature_scale(&predict_proba(classifier, x)?, *temperature)?),
        _ => Some(predict_proba(classifier, x)?),
    };
    let features = match (loss, probe) {
        (DefenceLoss::KlHidden { .. }, Some(p)) => Some(classifier.features(x, p.source_layer)?),
        (DefenceLoss::KlHidden { .. }, None) => {
            return Err(Error::Config("hidden-layer loss needs a probe".into()));
        }
        _ => None,
    };
    let ctx = DefenceCtx {
        classifier,
        x,
        loss,
        targets,
        features,
    };
    eval_mean(x.batch(), 256, |idx| {
        let mut tape = Tape::new();
        let (l, _, _) = ctx.record(&mut tape, ae, probe, idx, &mut Mode::Eval, false)?;
        Ok(tape.value(l).data()[0])
    })
}

/// Hidden-probe logits for a batch, recorded on `tape` (parameters constant).
pub fn probe_logits_on(tape: &mut Tape, classifier: &Model, probe: &HiddenProbe, x: Var) -> Result<Var> {
    let cb = classifier.bind(tape, false);
    let w = tape.constant(probe.weight.clone());
    let b = tape.constant(probe.bias.clone());
    probe_logits(tape, classifier, &cb, probe.source_layer, w, b, x)
}
