use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;

/// Below this `lambda` the Kolmogorov tail is 1 to double precision and the
/// alternating series has not yet converged at 100 terms.
const KS_SMALL_LAMBDA: f64 = 0.2;
const KS_TERMS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Scores `>=` this value are flagged.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// From (0, 0) to (1, 1), monotone in both coordinates.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

fn check_scores(name: &str, s: &[f64]) -> Result<()> {
    if s.is_empty() {
        return Err(Error::Data(alloc::format!("{name} scores are empty")));
    }
    if s.iter().any(|v| v.is_nan()) {
        return Err(Error::Data(alloc::format!("{name} scores contain NaN")));
    }
    Ok(())
}

/// ROC of flagging adversarial (positive) against normal scores, sweeping
/// the threshold over every distinct score. The trapezoid area is
/// accumulated in integer counts, so it equals the Mann-Whitney statistic
/// exactly.
pub fn roc_auc(normal: &[f64], adversarial: &[f64]) -> Result<RocCurve> {
    check_scores("normal", normal)?;
    check_scores("adversarial", adversarial)?;
    let mut all: Vec<(f64, bool)> = normal
        .iter()
        .map(|&s| (s, false))
        .chain(adversarial.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (nn, na) = (normal.len() as u64, adversarial.len() as u64);
    let mut points = Vec::new();
    points.push(RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    });
    let (mut fp, mut tp) = (0u64, 0u64);
    let mut twice_area: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        let (fp0, tp0) = (fp, tp);
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += (fp - fp0) as u128 * (tp + tp0) as u128;
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / nn as f64,
            tpr: tp as f64 / na as f64,
        });
    }
    let auc = twice_area as f64 / (2 * nn as u128 * na as u128) as f64;
    Ok(RocCurve { points, auc })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Kolmogorov tail `Q(lambda) = 2 sum_{k>=1} (-1)^(k-1) exp(-2 k^2 lambda^2)`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < KS_SMALL_LAMBDA {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=KS_TERMS {
        let kf = k as f64;
        let term = math::exp(-2.0 * kf * kf * lambda * lambda);
        s += if k % 2 == 1 { term } else { -term };
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// Two-sided two-sample KS test. `D` is the largest gap between the
/// empirical CDFs; the p-value is `Q(sqrt(n_a n_b / (n_a + n_b)) D)`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    check_scores("first", a)?;
    check_scores("second", b)?;
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let (na, nb) = (sa.len(), sb.len());
    let (mut ia, mut ib) = (0, 0);
    let mut d: f64 = 0.0;
    while ia < na || ib < nb {
        let x = match (sa.get(ia), sb.get(ib)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        while ia < na && sa[ia] <= x {
            ia += 1;
        }
        while ib < nb && sb[ib] <= x {
            ib += 1;
        }
        d = d.max((ia as f64 / na as f64 - ib as f64 / nb as f64).abs());
    }
    let ne = (na * nb) as f64 / (na + nb) as f64;
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_q(math::sqrt(ne) * d),
    })
}
