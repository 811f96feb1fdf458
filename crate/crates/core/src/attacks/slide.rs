use alloc::vec;
use alloc::vec::Vec;

use super::{input_gradient, AttackKind, SlideStep};
use crate::error::Result;
use crate::math;
use crate::nn::Target;
use crate::tensor::Tensor;

/// Sparse sign direction: `e_i = sign(g_i)` where `|g_i|` is strictly above
/// the `q`-th percentile of `|g|` (linear interpolation), else 0.
pub fn slide_direction(g: &[f64], q: f64) -> Vec<f64> {
    let mut mags: Vec<f64> = g.iter().map(|v| v.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let p = math::percentile_sorted(&mags, q);
    g.iter().map(|&v| if v.abs() > p { math::sign(v) } else { 0.0 }).collect()
}

/// Euclidean projection of `v` onto `{w : ||w||_1 <= radius}` by the sorted
/// soft-threshold algorithm.
pub fn project_l1_ball(v: &[f64], radius: f64) -> Vec<f64> {
    let l1: f64 = v.iter().map(|a| a.abs()).sum();
    if l1 <= radius {
        return v.to_vec();
    }
    let mut u: Vec<f64> = v.iter().map(|a| a.abs()).collect();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cum += uj;
        let t = (cum - radius) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        } else {
            break;
        }
    }
    v.iter().map(|&a| math::sign(a) * (a.abs() - theta).max(0.0)).collect()
}

/// SLIDE: `k` steps of `delta += gamma * e / ||e||_2`, each followed by
/// projection onto the l1 ball of radius `epsilon_l1` and clipping of
/// `x + delta` into `[0, 1]`. Returns the adversarials and the per-instance
/// step log.
pub fn slide(
    target: &dyn Target,
    x: &Tensor,
    labels: &[usize],
    q: f64,
    gamma: f64,
    k: usize,
    epsilon_l1: f64,
) -> Result<(Tensor, Vec<Vec<SlideStep>>)> {
    AttackKind::Slide { q, gamma, k, epsilon_l1 }.validate()?;
    let n = x.batch();
    let d = x.item_len();
    let mut delta = vec![0.0; n * d];
    let mut steps: Vec<Vec<SlideStep>> = (0..n).map(|_| Vec::with_capacity(k)).collect();
    let mut cur = x.clone();
    for _ in 0..k {
        let g = input_gradient(target, &cur, labels)?;
        for i in 0..n {
            let e = slide_direction(g.item(i), q);
            let nonzero = e.iter().filter(|v| **v != 0.0).count();
            let di: &mut [f64] = &mut delta[i * d..(i + 1) * d];
            if nonzero == 0 {
                steps[i].push(SlideStep {
                    nonzero,
                    l1: di.iter().map(|v| v.abs()).sum(),
                    skipped: true,
                });
                continue;
            }
            let norm = math::sqrt(nonzero as f64);
            for (dv, ev) in di.iter_mut().zip(&e) {
                *dv += gamma * ev / norm;
            }
            let projected = project_l1_ball(di, epsilon_l1);
            let xi = x.item(i);
            let ci = &mut cur.data_mut()[i * d..(i + 1) * d];
            for j in 0..d {
                ci[j] = (xi[j] + projected[j]).clamp(0.0, 1.0);
                di[j] = ci[j] - xi[j];
            }
            steps[i].push(SlideStep {
                nonzero,
                l1: di.iter().map(|v| v.abs()).sum(),
                skipped: false,
            });
        }
    }
    Ok((cur, steps))
}
