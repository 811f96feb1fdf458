//! Untargeted gradient attacks against any [`Target`]: a bare classifier
//! (grey-box) or the defended composition (white-box).

mod cw;
mod slide;

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use cw::cw_l2;
pub use slide::{project_l1_ball, slide, slide_direction};

use crate::error::{Error, Result};
use crate::math;
use crate::nn::Target;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Instances per tape when computing input gradients.
const GRAD_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm {
        epsilon: f64,
    },
    Slide {
        q: f64,
        gamma: f64,
        k: usize,
        epsilon_l1: f64,
    },
    CwL2 {
        c_init: f64,
        binary_steps: usize,
        max_iter: usize,
        lr: f64,
        #[serde(default)]
        kappa: f64,
    },
}

impl AttackKind {
    /// SLIDE with percentile 80, step 0.05, 10 steps and l1 radius 0.1.
    pub fn slide_default() -> Self {
        AttackKind::Slide {
            q: 80.0,
            gamma: 0.05,
            k: 10,
            epsilon_l1: 0.1,
        }
    }

    /// C&W-L2 with c = 100, 7 binary-search steps, 200 Adam steps at lr 0.1.
    pub fn cw_default() -> Self {
        AttackKind::CwL2 {
            c_init: 100.0,
            binary_steps: 7,
            max_iter: 200,
            lr: 0.1,
            kappa: 0.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Fgsm { .. } => "fgsm",
            AttackKind::Slide { .. } => "slide",
            AttackKind::CwL2 { .. } => "cw_l2",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Parameter(m));
        match *self {
            AttackKind::Fgsm { epsilon } if !(epsilon > 0.0 && epsilon.is_finite()) => {
                bad(format!("FGSM epsilon must be positive, got {epsilon}"))
            }
            AttackKind::Slide { q, .. } if !(q > 0.0 && q < 100.0) => bad(format!("SLIDE percentile must be in (0, 100), got {q}")),
            AttackKind::Slide { gamma, .. } if !(gamma > 0.0 && gamma.is_finite()) => {
                bad(format!("SLIDE step size must be positive, got {gamma}"))
            }
            AttackKind::Slide { epsilon_l1, .. } if !(epsilon_l1 > 0.0 && epsilon_l1.is_finite()) => {
                bad(format!("SLIDE l1 radius must be positive, got {epsilon_l1}"))
            }
            AttackKind::CwL2 { c_init, .. } if !(c_init > 0.0 && c_init.is_finite()) => {
                bad(format!("C&W initial constant must be positive, got {c_init}"))
            }
            AttackKind::CwL2 { binary_steps: 0, .. } => bad("C&W needs at least one binary-search step".into()),
            AttackKind::CwL2 { lr, .. } if !(lr > 0.0 && lr.is_finite()) => bad(format!("C&W learning rate must be positive, got {lr}")),
            AttackKind::CwL2 { kappa, .. } if !(kappa >= 0.0 && kappa.is_finite()) => {
                bad(format!("C&W confidence must be non-negative, got {kappa}"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Attack the classifier alone.
    #[default]
    GreyBox,
    /// Attack `C(AE(x))`.
    WhiteBox,
}

/// Which labels the untargeted loss moves away from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    /// The target's own prediction on the clean input.
    #[default]
    Predicted,
    /// Ground-truth labels supplied by the caller.
    True,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub attack: AttackKind,
    #[serde(default)]
    pub target: TargetMode,
    #[serde(default)]
    pub labels: LabelSource,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(attack: AttackKind, target: TargetMode, seed: u64) -> Self {
        AttackConfig {
            attack,
            target,
            labels: LabelSource::Predicted,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Norms {
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
}

impl Norms {
    pub fn of(delta: &[f64]) -> Norms {
        Norms {
            l1: delta.iter().map(|v| v.abs()).sum(),
            l2: math::sqrt(delta.iter().map(|v| v * v).sum()),
            linf: delta.iter().fold(0.0, |m, v| m.max(v.abs())),
        }
    }
}

/// Per-iteration SLIDE bookkeeping for one instance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideStep {
    /// Nonzero components of the direction `e`.
    pub nonzero: usize,
    /// `||delta||_1` after projection and clipping.
    pub l1: f64,
    /// True when `e` was all zero and the step was skipped.
    pub skipped: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackDiagnostics {
    /// FGSM: `epsilon * sign(g)` before clipping, flattened per instance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fgsm_pre_clip: Option<Tensor>,
    /// SLIDE: one entry per instance, one step per iteration.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub slide_steps: Vec<Vec<SlideStep>>,
    /// C&W: instances whose objective became non-finite.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cw_failed: Vec<bool>,
    /// C&W: final constant per instance.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cw_constants: Vec<f64>,
}

impl AttackDiagnostics {
    /// `(instance, iteration)` of every skipped SLIDE step.
    pub fn skipped_iterations(&self) -> Vec<(usize, usize)> {
        self.slide_steps
            .iter()
            .enumerate()
            .flat_map(|(i, steps)| {
                steps
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.skipped)
                    .map(move |(t, _)| (i, t))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdversarialBatch {
    pub config: AttackConfig,
    pub originals: Tensor,
    pub adversarials: Tensor,
    pub labels: Vec<usize>,
    pub original_predictions: Vec<usize>,
    pub adversarial_predictions: Vec<usize>,
    pub success: Vec<bool>,
    pub norms: Vec<Norms>,
    pub diagnostics: AttackDiagnostics,
}

impl AdversarialBatch {
    /// Assembles a batch, recomputing predictions and success on `target`.
    pub fn assemble(
        config: AttackConfig,
        target: &dyn Target,
        originals: Tensor,
        adversarials: Tensor,
        labels: Vec<usize>,
        diagnostics: AttackDiagnostics,
    ) -> Result<AdversarialBatch> {
        if originals.shape() != adversarials.shape() {
            return Err(Error::dim("adversarial batch", originals.shape(), adversarials.shape()));
        }
        let original_predictions = target.predict(&originals)?;
        let adversarial_predictions = target.predict(&adversarials)?;
        let success = original_predictions
            .iter()
            .zip(&adversarial_predictions)
            .map(|(a, b)| a != b)
            .collect();
        let norms = (0..originals.batch())
            .map(|i| {
                let d: Vec<f64> = adversarials.item(i).iter().zip(originals.item(i)).map(|(a, o)| a - o).collect();
                Norms::of(&d)
            })
            .collect();
        Ok(AdversarialBatch {
            config,
            originals,
            adversarials,
            labels,
            original_predictions,
            adversarial_predictions,
            success,
            norms,
            diagnostics,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn success_rate(&self) -> f64 {
        self.success.iter().filter(|s| **s).count() as f64 / self.len().max(1) as f64
    }

    /// Concatenates batches produced by the same config, in order.
    pub fn concat(parts: Vec<AdversarialBatch>) -> Result<AdversarialBatch> {
        let mut it = parts.into_iter();
        let mut out = it.next().ok_or_else(|| Error::Data("no adversarial batches to merge".into()))?;
        for p in it {
            if p.config != out.config {
                return Err(Error::Config("cannot merge batches from different attack configs".into()));
            }
            out.originals = Tensor::concat_batch(&[out.originals, p.originals])?;
            out.adversarials = Tensor::concat_batch(&[out.adversarials, p.adversarials])?;
            out.labels.extend(p.labels);
            out.original_predictions.extend(p.original_predictions);
            out.adversarial_predictions.extend(p.adversarial_predictions);
            out.success.extend(p.success);
            out.norms.extend(p.norms);
            let d = &mut out.diagnostics;
            d.fgsm_pre_clip = match (d.fgsm_pre_clip.take(), p.diagnostics.fgsm_pre_clip) {
                (Some(a), Some(b)) => Some(Tensor::concat_batch(&[a, b])?),
                _ => None,
            };
            d.slide_steps.extend(p.diagnostics.slide_steps);
            d.cw_failed.extend(p.diagnostics.cw_failed);
            d.cw_constants.extend(p.diagnostics.cw_constants);
        }
        Ok(out)
    }
}

/// Gradient of the per-instance cross-entropy `-ln softmax(Z(x))[y]` with
/// respect to `x`.
pub fn input_gradient(target: &dyn Target, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if x.batch() != labels.len() {
        return Err(Error::Data(format!("{} inputs but {} labels", x.batch(), labels.len())));
    }
    let mut parts = Vec::new();
    let mut start = 0;
    while start < x.batch() {
        let end = (start + GRAD_CHUNK).min(x.batch());
        let mut tape = Tape::new();
        let xv = tape.param(x.slice_batch(start, end));
        let z = target.logits_on(&mut tape, xv)?;
        let l = tape.cross_entropy(z, &labels[start..end])?;
        // The batch mean scales each instance's gradient by 1/n; undo that.
        let l = tape.scale(l, (end - start) as f64)?;
        parts.push(tape.backward(l)?.wrt(xv));
        start = end;
    }
    Tensor::concat_batch(&parts)
}

fn check_domain(x: &Tensor) -> Result<()> {
    if let Some(v) = x.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Data(format!("attack input value {v} outside [0, 1]")));
    }
    Ok(())
}

/// Resolves the labels the attack moves away from.
fn attack_labels(target: &dyn Target, x: &Tensor, source: LabelSource, truth: Option<&[usize]>) -> Result<Vec<usize>> {
    match (source, truth) {
        (LabelSource::Predicted, _) => target.predict(x),
        (LabelSource::True, Some(y)) if y.len() == x.batch() => Ok(y.to_vec()),
        (LabelSource::True, Some(y)) => Err(Error::Data(format!("{} inputs but {} labels", x.batch(), y.len()))),
        (LabelSource::True, None) => Err(Error::Config("attack configured for true labels but none were given".into())),
    }
}

/// Single-step FGSM: `clip(x + epsilon * sign(grad_x L), 0, 1)`.
pub fn fgsm(target: &dyn Target, x: &Tensor, labels: &[usize], epsilon: f64) -> Result<(Tensor, Tensor)> {
    AttackKind::Fgsm { epsilon }.validate()?;
    check_domain(x)?;
    let g = input_gradient(target, x, labels)?;
    let step = g.map(|v| epsilon * math::sign(v));
    let mut adv = x.clone();
    for (a, s) in adv.data_mut().iter_mut().zip(step.data()) {
        *a = (*a + s).clamp(0.0, 1.0);
    }
    Ok((adv, step))
}

/// Runs `config` against `target`. `truth` is only used when the config asks
/// for true labels; it is also recorded in the batch when given.
pub fn run_attack(config: &AttackConfig, target: &dyn Target, x: &Tensor, truth: Option<&[usize]>) -> Result<AdversarialBatch> {
    config.attack.validate()?;
    check_domain(x)?;
    let labels = attack_labels(target, x, config.labels, truth)?;
    let mut diagnostics = AttackDiagnostics::default();
    let adversarials = match config.attack {
        AttackKind::Fgsm { epsilon } => {
            let (adv, step) = fgsm(target, x, &labels, epsilon)?;
            diagnostics.fgsm_pre_clip = Some(step);
            adv
        }
        AttackKind::Slide { q, gamma, k, epsilon_l1 } => {
            let (adv, steps) = slide(target, x, &labels, q, gamma, k, epsilon_l1)?;
            diagnostics.slide_steps = steps;
            adv
        }
        AttackKind::CwL2 {
            c_init,
            binary_steps,
            max_iter,
            lr,
            kappa,
        } => {
            let out = cw_l2(target, x, &labels, c_init, binary_steps, max_iter, lr, kappa)?;
            diagnostics.cw_failed = out.failed;
            diagnostics.cw_constants = out.constants;
            out.adversarials
        }
    };
    let recorded = truth.map_or_else(|| labels.clone(), <[usize]>::to_vec);
    AdversarialBatch::assemble(config.clone(), target, x.clone(), adversarials, recorded, diagnostics)
}
