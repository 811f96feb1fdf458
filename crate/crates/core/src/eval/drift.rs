use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::metrics::{ks_two_sample, KsResult};
use crate::defence::score_from_distributions;
use crate::error::{Error, Result};
use crate::math;
use crate::nn::{compose_defended, predict_proba, reconstruct, Model};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    Blur,
    Brightness,
    Contrast,
}

pub const ALL_CORRUPTIONS: [CorruptionKind; 4] = [
    CorruptionKind::GaussianNoise,
    CorruptionKind::Blur,
    CorruptionKind::Brightness,
    CorruptionKind::Contrast,
];

const NOISE_SIGMA: [f64; 5] = [0.04, 0.06, 0.08, 0.09, 0.10];
const BRIGHTNESS_SHIFT: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
const CONTRAST_FACTOR: [f64; 5] = [0.75, 0.6, 0.45, 0.3, 0.15];

impl CorruptionKind {
    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::Blur => "blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
        }
    }

    pub fn parse(s: &str) -> Result<CorruptionKind> {
        ALL_CORRUPTIONS
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown corruption kind {s:?}")))
    }

    /// Noise sigma, blur radius, brightness shift or contrast factor.
    pub fn parameter(self, severity: usize) -> Result<f64> {
        if !(1..=5).contains(&severity) {
            return Err(Error::Parameter(format!("severity must be in 1..=5, got {severity}")));
        }
        let i = severity - 1;
        Ok(match self {
            CorruptionKind::GaussianNoise => NOISE_SIGMA[i],
            CorruptionKind::Blur => severity as f64,
            CorruptionKind::Brightness => BRIGHTNESS_SHIFT[i],
            CorruptionKind::Contrast => CONTRAST_FACTOR[i],
        })
    }
}

/// Box blur of radius `r` over each channel, with edge pixels repeated.
fn box_blur(item: &[f64], h: usize, w: usize, c: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; item.len()];
    let norm = ((2 * r + 1) * (2 * r + 1)) as f64;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut s = 0.0;
                for dy in 0..=2 * r {
                    let yy = (y + dy).saturating_sub(r).min(h - 1);
                    for dx in 0..=2 * r {
                        let xx = (x + dx).saturating_sub(r).min(w - 1);
                        s += item[(yy * w + xx) * c + ch];
                    }
                }
                out[(y * w + x) * c + ch] = s / norm;
            }
        }
    }
    out
}

/// Applies one synthetic corruption to an `N x H x W x C` batch; the result
/// is clipped into `[0, 1]`.
pub fn corrupt_dataset(x: &Tensor, kind: CorruptionKind, severity: usize, seed_: u64) -> Result<Tensor> {
    let param = kind.parameter(severity)?;
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::dim("corrupt_dataset", shape, &[0, 0, 0, 0]));
    }
    let (h, w, c) = (shape[1], shape[2], shape[3]);
    let mut out = x.clone();
    let k = x.item_len();
    match kind {
        CorruptionKind::GaussianNoise => {
            let mut rng = seed::rng(seed_);
            let normal = Normal::new(0.0, param).expect("positive sigma");
            out.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
        CorruptionKind::Blur => {
            for (i, item) in out.data_mut().chunks_mut(k).enumerate() {
                item.copy_from_slice(&box_blur(x.item(i), h, w, c, param as usize));
            }
        }
        CorruptionKind::Brightness => out.data_mut().iter_mut().for_each(|v| *v += param),
        CorruptionKind::Contrast => {
            for item in out.data_mut().chunks_mut(k) {
                let m = math::mean(item);
                item.iter_mut().for_each(|v| *v = (*v - m) * param + m);
            }
        }
    }
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub n: usize,
    /// Absent for an empty group.
    pub mean: Option<f64>,
    /// Sample standard deviation; absent below two members.
    pub std: Option<f64>,
}

impl GroupStats {
    fn of(scores: &[f64]) -> GroupStats {
        GroupStats {
            n: scores.len(),
            mean: (!scores.is_empty()).then(|| math::mean(scores)),
            std: (scores.len() >= 2).then(|| math::sample_std(scores)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftRow {
    pub severity: usize,
    pub n: usize,
    pub accuracy: f64,
    /// Clean-correct instances the corruption made incorrect.
    pub harmful: GroupStats,
    /// Every other instance.
    pub not_harmful: GroupStats,
    /// KS test between the two groups, when both are non-empty.
    pub ks: Option<KsResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub kinds: Vec<String>,
    pub rows: Vec<DriftRow>,
}

/// Scores clean and corrupted copies of `x` and splits each severity's
/// instances into harmful and not-harmful groups. Severity 0 is the clean
/// set; each other severity pools all `kinds`.
pub fn drift_report(
    classifier: &Model,
    ae: &Model,
    x: &Tensor,
    y: &[usize],
    kinds: &[CorruptionKind],
    severities: &[usize],
    seed_: u64,
) -> Result<DriftReport> {
    compose_defended(classifier, ae)?;
    if x.batch() != y.len() {
        return Err(Error::Data(format!("{} images but {} labels", x.batch(), y.len())));
    }
    if kinds.is_empty() {
        return Err(Error::Parameter("drift report needs at least one corruption kind".into()));
    }
    let clean_pred = predict_proba(classifier, x)?.argmax_rows();
    let clean_correct: Vec<bool> = clean_pred.iter().zip(y).map(|(p, t)| p == t).collect();
    let mut rows = Vec::with_capacity(severities.len());
    for &s in severities {
        let (xs, copies) = if s == 0 {
            (x.clone(), 1)
        } else {
            let parts = kinds
                .iter()
                .enumerate()
                .map(|(ki, k)| {
                    let sd = seed::derive_indexed(seed_, "drift/corruption", (s * 16 + ki) as u64);
                    corrupt_dataset(x, *k, s, sd)
                })
                .collect::<Result<Vec<_>>>()?;
            (Tensor::concat_batch(&parts)?, kinds.len())
        };
        let p = predict_proba(classifier, &xs)?;
        let q = predict_proba(classifier, &reconstruct(ae, &xs)?)?;
        let scores = score_from_distributions(&p, &q, None)?;
        let pred = p.argmax_rows();
        let n = xs.batch();
        let mut harmful = Vec::new();
        let mut benign = Vec::new();
        let mut correct = 0;
        for j in 0..n {
            let i = j % x.batch();
            let ok = pred[j] == y[i];
            correct += ok as usize;
            if clean_correct[i] && !ok {
                harmful.push(scores[j]);
            } else {
                benign.push(scores[j]);
            }
        }
        debug_assert_eq!(n, x.batch() * copies);
        let ks = if harmful.is_empty() || benign.is_empty() {
            None
        } else {
            Some(ks_two_sample(&harmful, &benign)?)
        };
        rows.push(DriftRow {
            severity: s,
            n,
            accuracy: correct as f64 / n as f64,
            harmful: GroupStats::of(&harmful),
            not_harmful: GroupStats::of(&benign),
            ks,
        });
    }
    Ok(DriftReport {
        kinds: kinds.iter().map(|k| k.name().into()).collect(),
        rows,
    })
}
