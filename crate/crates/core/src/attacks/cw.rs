use alloc::vec;
use alloc::vec::Vec;

use super::AttackKind;
use crate::error::{Error, Result};
use crate::math;
use crate::nn::Target;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Upper cap on the C&W constant.
pub const CW_MAX_CONST: f64 = 1e10;
/// Keeps `atanh` finite at the box edges.
const TANH_EDGE: f64 = 1.0 - 1e-6;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

pub struct CwOutcome {
    pub adversarials: Tensor,
    pub failed: Vec<bool>,
    pub constants: Vec<f64>,
}

struct Step {
    /// Per-instance objective value (norm + c * margin term).
    loss: Vec<f64>,
    l2: Vec<f64>,
    logits: Tensor,
    x_adv: Tensor,
    grad: Tensor,
}

/// One forward/backward pass of `sum_i ||x'_i - x_i||_2 + c_i f(x'_i)` with
/// `x' = (tanh(w) + 1) / 2`.
fn objective(target: &dyn Target, w: &Tensor, x: &Tensor, labels: &[usize], c: &[f64], kappa: f64) -> Result<Step> {
    let mut tape = Tape::new();
    let wv = tape.param(w.clone());
    let t = tape.tanh(wv)?;
    let t = tape.add_scalar(t, 1.0)?;
    let xa = tape.scale(t, 0.5)?;
    let xc = tape.constant(x.clone());
    let d = tape.sub(xa, xc)?;
    let l2 = tape.row_l2_norm(d)?;
    let z = target.logits_on(&mut tape, xa)?;
    let f = tape.logit_margin(z, labels, kappa)?;
    let cv = tape.constant(Tensor::new(vec![c.len()], c.to_vec())?);
    let cf = tape.mul(f, cv)?;
    let per = tape.add(l2, cf)?;
    let total = tape.sum(per)?;
    let grad = tape.backward(total)?.wrt(wv);
    Ok(Step {
        loss: tape.value(per).data().to_vec(),
        l2: tape.value(l2).data().to_vec(),
        logits: tape.value(z).clone(),
        x_adv: tape.value(xa).clone(),
        grad,
    })
}

/// Runs [`objective`] on the whole batch, falling back to one instance at a
/// time when the batch produces a non-finite value so that only the
/// offending instances are flagged.
fn objective_or_split(
    target: &dyn Target,
    w: &Tensor,
    x: &Tensor,
    labels: &[usize],
    c: &[f64],
    kappa: f64,
) -> Result<Vec<Option<Step>>> {
    match objective(target, w, x, labels, c, kappa) {
        Ok(s) if s.loss.iter().all(|v| v.is_finite()) && s.grad.is_finite() => Ok(vec![Some(s)]),
        Ok(_) | Err(Error::Evaluation(_)) if x.batch() > 1 => (0..x.batch())
            .map(|i| {
                let one = objective_or_split(
                    target,
                    &w.slice_batch(i, i + 1),
                    &x.slice_batch(i, i + 1),
                    &labels[i..=i],
                    &c[i..=i],
                    kappa,
                )?;
                Ok(one.into_iter().next().flatten())
            })
            .collect(),
        Ok(_) | Err(Error::Evaluation(_)) => Ok(vec![None]),
        Err(e) => Err(e),
    }
}

fn attack_succeeded(logits: &[f64], label: usize, kappa: f64) -> bool {
    let best_other = logits
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != label)
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    math::argmax(logits) != label && logits[label] - best_other <= -kappa
}

/// Untargeted C&W-L2 in tanh space with a per-instance binary search over
/// the constant. Instances without a success keep their original input.
#[allow(clippy::too_many_arguments)]
pub fn cw_l2(
    target: &dyn Target,
    x: &Tensor,
    labels: &[usize],
    c_init: f64,
    binary_steps: usize,
    max_iter: usize,
    lr: f64,
    kappa: f64,
) -> Result<CwOutcome> {
    AttackKind::CwL2 {
        c_init,
        binary_steps,
        max_iter,
        lr,
        kappa,
    }
    .validate()?;
    let n = x.batch();
    let dim = x.item_len();
    let w0 = x.map(|v| math::atanh((2.0 * v - 1.0).clamp(-TANH_EDGE, TANH_EDGE)));
    let mut c = vec![c_init; n];
    let mut lower = vec![0.0; n];
    let mut upper = vec![CW_MAX_CONST; n];
    let mut best_l2 = vec![f64::INFINITY; n];
    let mut best = x.clone();
    let mut failed = vec![false; n];

    for _ in 0..binary_steps {
        let mut w = w0.clone();
        let mut m = vec![0.0; n * dim];
        let mut v = vec![0.0; n * dim];
        let mut round_success = vec![false; n];
        for it in 0..max_iter {
            let active: Vec<usize> = (0..n).filter(|&i| !failed[i]).collect();
            if active.is_empty() {
                break;
            }
            let wa = w.select_batch(&active);
            let xa = x.select_batch(&active);
            let la: Vec<usize> = active.iter().map(|&i| labels[i]).collect();
            let ca: Vec<f64> = active.iter().map(|&i| c[i]).collect();
            let steps = objective_or_split(target, &wa, &xa, &la, &ca, kappa)?;
            // Map results back to instance indices.
            let mut per_instance: Vec<(usize, &Step, usize)> = Vec::with_capacity(active.len());
            if steps.len() == 1 && active.len() > 1 {
                let s = steps[0].as_ref().expect("whole-batch step");
                per_instance.extend(active.iter().enumerate().map(|(r, &i)| (i, s, r)));
            } else {
                for (&i, s) in active.iter().zip(&steps) {
                    match s {
                        Some(s) => per_instance.push((i, s, 0)),
                        None => failed[i] = true,
                    }
                }
            }
            let t = (it + 1) as f64;
            let c1 = 1.0 - math::powf(ADAM_BETA1, t);
            let c2 = 1.0 - math::powf(ADAM_BETA2, t);
            for (i, s, r) in per_instance {
                let k = s.logits.item_len();
                let zrow = &s.logits.data()[r * k..(r + 1) * k];
                if attack_succeeded(zrow, labels[i], kappa) {
                    round_success[i] = true;
                    if s.l2[r] < best_l2[i] {
                        best_l2[i] = s.l2[r];
                        best.data_mut()[i * dim..(i + 1) * dim].copy_from_slice(s.x_adv.item(r));
                    }
                }
                let g = s.grad.item(r);
                let wi = &mut w.data_mut()[i * dim..(i + 1) * dim];
                let mi = &mut m[i * dim..(i + 1) * dim];
                let vi = &mut v[i * dim..(i + 1) * dim];
                for j in 0..dim {
                    mi[j] = ADAM_BETA1 * mi[j] + (1.0 - ADAM_BETA1) * g[j];
                    vi[j] = ADAM_BETA2 * vi[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
                    wi[j] -= lr * (mi[j] / c1) / (math::sqrt(vi[j] / c2) + ADAM_EPS);
                }
            }
        }
        // Final iterate of the round.
        let active: Vec<usize> = (0..n).filter(|&i| !failed[i]).collect();
        if !active.is_empty() {
            let xa = w.select_batch(&active).map(|wv| (math::tanh(wv) + 1.0) / 2.0);
            let z = target.logits(&xa)?;
            for (r, &i) in active.iter().enumerate() {
                let k = z.item_len();
                if attack_succeeded(&z.data()[r * k..(r + 1) * k], labels[i], kappa) {
                    round_success[i] = true;
                    let l2 = math::sqrt(
                        xa.item(r).iter().zip(x.item(i)).map(|(a, b)| (a - b) * (a - b)).sum(),
                    );
                    if l2 < best_l2[i] {
                        best_l2[i] = l2;
                        best.data_mut()[i * dim..(i + 1) * dim].copy_from_slice(xa.item(r));
                    }
                }
            }
        }
        for i in 0..n {
            if round_success[i] {
                upper[i] = upper[i].min(c[i]);
                c[i] = (lower[i] + upper[i]) / 2.0;
            } else {
                lower[i] = lower[i].max(c[i]);
                c[i] = if upper[i] < CW_MAX_CONST {
                    (lower[i] + upper[i]) / 2.0
                } else {
                    (c[i] * 10.0).min(CW_MAX_CONST)
                };
            }
        }
    }
    Ok(CwOutcome {
        adversarials: best,
        failed,
        constants: c,
    })
}
