//! Adversarial score, threshold calibration, detect-and-correct and the
//! checkpoint-ensemble vote.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{compose_defended, predict, predict_proba, reconstruct, Model, Target};
use crate::tape::kl_rows;
use crate::tensor::Tensor;
use crate::train::temperature_scale;

/// Default tolerated false-positive rate.
pub const DEFAULT_FPR: f64 = 0.05;
/// Share of the vote given to ensemble members by default.
pub const DEFAULT_ENSEMBLE_SHARE: f64 = 0.8;
/// Relative tolerance under which two vote totals count as tied.
const VOTE_TIE_TOL: f64 = 1e-12;

/// `S_adv(x) = KL(M(x)_T || M(AE(x)))` per instance (`T = 1` when `None`).
pub fn adversarial_score(classifier: &Model, ae: &Model, x: &Tensor, temperature: Option<f64>) -> Result<Vec<f64>> {
    compose_defended(classifier, ae)?;
    let p = predict_proba(classifier, x)?;
    let q = predict_proba(classifier, &reconstruct(ae, x)?)?;
    score_from_distributions(&p, &q, temperature)
}

/// The score from precomputed `M(x)` and `M(AE(x))`.
pub fn score_from_distributions(p: &Tensor, q: &Tensor, temperature: Option<f64>) -> Result<Vec<f64>> {
    let p = match temperature {
        Some(t) => temperature_scale(p, t)?,
        None => p.clone(),
    };
    kl_rows(&p, q).map_err(|e| match e {
        Error::Validation(m) => Error::Contract(format!("model output is not a distribution: {m}")),
        other => other,
    })
}

/// Smallest observed score `t` such that at most `floor(fpr * n)` normal
/// scores lie strictly above it. `fpr >= 1` yields `-inf`.
pub fn calibrate_threshold(scores: &[f64], fpr: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Data("cannot calibrate a threshold on no scores".into()));
    }
    if !(0.0..=1.0).contains(&fpr) {
        return Err(Error::Parameter(format!("false-positive rate must be in [0, 1], got {fpr}")));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Data(format!("score {s} is not a number")));
    }
    let n = scores.len();
    let allowed = libm::floor(fpr * n as f64 + 1e-9) as usize;
    if allowed >= n {
        return Ok(f64::NEG_INFINITY);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[n - 1 - allowed])
}

/// Fraction of `scores` strictly above `t`.
pub fn flag_rate(scores: &[f64], t: f64) -> f64 {
    scores.iter().filter(|&&s| s > t).count() as f64 / scores.len().max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Original,
    Reconstructed,
    Ensemble,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Original => "original",
            Source::Reconstructed => "reconstructed",
            Source::Ensemble => "ensemble",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenceVerdict {
    pub score: f64,
    pub threshold: f64,
    pub flagged: bool,
    pub label: usize,
    pub source: Source,
}

/// Routes instances scoring above `t` through the autoencoder.
pub fn detect_and_correct(classifier: &Model, ae: &Model, x: &Tensor, t: f64) -> Result<Vec<DefenceVerdict>> {
    compose_defended(classifier, ae)?;
    let p = predict_proba(classifier, x)?;
    let q = predict_proba(classifier, &reconstruct(ae, x)?)?;
    let scores = score_from_distributions(&p, &q, None)?;
    Ok(verdicts(&scores, &p.argmax_rows(), &q.argmax_rows(), t))
}

/// Verdicts from precomputed scores and the two candidate labels.
pub fn verdicts(scores: &[f64], plain: &[usize], corrected: &[usize], t: f64) -> Vec<DefenceVerdict> {
    scores
        .iter()
        .zip(plain.iter().zip(corrected))
        .map(|(&score, (&a, &b))| {
            let flagged = score > t;
            DefenceVerdict {
                score,
                threshold: t,
                flagged,
                label: if flagged { b } else { a },
                source: if flagged { Source::Reconstructed } else { Source::Original },
            }
        })
        .collect()
}

/// Vote weights: one per autoencoder member plus the classifier's own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub member_weights: Vec<f64>,
    pub classifier_weight: f64,
}

impl EnsembleSpec {
    /// Members with the given weights; the classifier gets `1 - sum`.
    pub fn new(member_weights: Vec<f64>) -> Result<EnsembleSpec> {
        let total: f64 = member_weights.iter().sum();
        if total > 1.0 + 1e-12 {
            return Err(Error::Config(format!("member weights sum to {total} > 1")));
        }
        let spec = EnsembleSpec {
            member_weights,
            classifier_weight: (1.0 - total).max(0.0),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `members` equal weights sharing 0.8, classifier 0.2.
    pub fn uniform(members: usize) -> Result<EnsembleSpec> {
        if members == 0 {
            return EnsembleSpec::new(Vec::new());
        }
        EnsembleSpec::new(vec![DEFAULT_ENSEMBLE_SHARE / members as f64; members])
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(w) = self
            .member_weights
            .iter()
            .chain(core::iter::once(&self.classifier_weight))
            .find(|w| !(**w >= 0.0 && w.is_finite()))
        {
            return Err(Error::Config(format!("ensemble weight {w} must be finite and non-negative")));
        }
        if self.member_weights.is_empty() && self.classifier_weight == 0.0 {
            return Err(Error::Config("empty ensemble with zero classifier weight".into()));
        }
        if self.member_weights.iter().sum::<f64>() + self.classifier_weight <= 0.0 {
            return Err(Error::Config("all ensemble weights are zero".into()));
        }
        Ok(())
    }
}

/// Weighted vote `argmax_i sum_j w_j 1(member_j = i) + w_c 1(classifier = i)`,
/// ties to the lowest class index.
pub fn ensemble_vote(spec: &EnsembleSpec, member_labels: &[Vec<usize>], classifier_labels: &[usize], classes: usize) -> Result<Vec<usize>> {
    spec.validate()?;
    if member_labels.len() != spec.member_weights.len() {
        return Err(Error::Config(format!(
            "{} member weights for {} members",
            spec.member_weights.len(),
            member_labels.len()
        )));
    }
    let n = classifier_labels.len();
    if let Some(m) = member_labels.iter().find(|m| m.len() != n) {
        return Err(Error::Data(format!("member voted on {} instances, classifier on {n}", m.len())));
    }
    let mut out = Vec::with_capacity(n);
    let mut tally = vec![0.0; classes];
    for i in 0..n {
        tally.iter_mut().for_each(|v| *v = 0.0);
        for (labels, w) in member_labels.iter().zip(&spec.member_weights) {
            tally[labels[i]] += w;
        }
        tally[classifier_labels[i]] += spec.classifier_weight;
        let top = tally.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let tol = VOTE_TIE_TOL * top.abs();
        out.push(tally.iter().position(|v| *v >= top - tol).expect("non-empty"));
    }
    Ok(out)
}

/// Ensemble prediction over autoencoder `members` in front of `classifier`.
pub fn ensemble_predict(spec: &EnsembleSpec, members: &[&Model], classifier: &Model, x: &Tensor) -> Result<Vec<usize>> {
    spec.validate()?;
    let member_labels = members
        .iter()
        .map(|ae| compose_defended(classifier, ae)?.predict(x))
        .collect::<Result<Vec<_>>>()?;
    let plain = predict(classifier, x)?;
    ensemble_vote(spec, &member_labels, &plain, classifier.num_classes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, Layer, ModelSpec};
    use proptest::prelude::*;

    fn identity_ae(n: usize) -> Model {
        let spec = ModelSpec::new("id", &[n], vec![Layer::Dense { units: n }]);
        let mut ae = build_model(spec, 0).unwrap();
        let mut eye = vec![0.0; n * n];
        (0..n).for_each(|i| eye[i * n + i] = 1.0);
        ae.params_mut().get_mut(0).unwrap().weight = Tensor::new(vec![n, n], eye).unwrap();
        ae
    }

    fn grid(n: usize) -> Tensor {
        Tensor::new(vec![n, 3], (0..3 * n).map(|i| ((i * 13) % 10) as f64 / 9.0).collect()).unwrap()
    }

    #[test]
    fn identity_ae_scores_zero() {
        let clf = build_model(ModelSpec::mlp_classifier("c", &[3], &[4], 3), 1).unwrap();
        let s = adversarial_score(&clf, &identity_ae(3), &grid(20), None).unwrap();
        assert!(s.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn score_hand_value() {
        let p = Tensor::new(vec![1, 2], vec![0.9, 0.1]).unwrap();
        let q = Tensor::new(vec![1, 2], vec![0.1, 0.9]).unwrap();
        let s = score_from_distributions(&p, &q, None).unwrap();
        assert!((s[0] - 0.8 * libm::log(9.0)).abs() < 1e-12);
        assert!((s[0] - 1.757780).abs() < 1e-6);
    }

    #[test]
    fn score_is_composition_of_parts() {
        let clf = build_model(ModelSpec::mlp_classifier("c", &[3], &[4], 3), 1).unwrap();
        let ae = build_model(ModelSpec::dense_autoencoder("ae", &[3], 4, 2, true), 2).unwrap();
        let x = grid(7);
        let s = adversarial_score(&clf, &ae, &x, None).unwrap();
        let p = predict_proba(&clf, &x).unwrap();
        let q = predict_proba(&clf, &reconstruct(&ae, &x).unwrap()).unwrap();
        for i in 0..7 {
            let one = crate::tape::kl_divergence(
                &p.slice_batch(i, i + 1),
                &q.slice_batch(i, i + 1),
            )
            .unwrap();
            assert_eq!(s[i], one);
        }
    }

    #[test]
    fn threshold_examples() {
        let scores: Vec<f64> = (1..=100).map(f64::from).collect();
        let t = calibrate_threshold(&scores, 0.05).unwrap();
        assert_eq!(t, 95.0);
        assert_eq!(scores.iter().filter(|&&s| s > t).count(), 5);
        assert_eq!(calibrate_threshold(&scores, 0.0).unwrap(), 100.0);
        assert_eq!(calibrate_threshold(&scores, 1.0).unwrap(), f64::NEG_INFINITY);
        assert!(matches!(calibrate_threshold(&[], 0.1), Err(Error::Data(_))));
    }

    #[test]
    fn thresholds_at_the_extremes() {
        let clf = build_model(ModelSpec::mlp_classifier("c", &[3], &[4], 3), 1).unwrap();
        let ae = build_model(ModelSpec::dense_autoencoder("ae", &[3], 4, 2, true), 2).unwrap();
        let x = grid(15);
        let open = detect_and_correct(&clf, &ae, &x, f64::INFINITY).unwrap();
        assert_eq!(open.iter().map(|v| v.label).collect::<Vec<_>>(), predict(&clf, &x).unwrap());
        assert!(open.iter().all(|v| v.source == Source::Original && !v.flagged));
        let closed = detect_and_correct(&clf, &ae, &x, f64::NEG_INFINITY).unwrap();
        let corrected = predict(&clf, &reconstruct(&ae, &x).unwrap()).unwrap();
        assert_eq!(closed.iter().map(|v| v.label).collect::<Vec<_>>(), corrected);
        assert!(closed.iter().all(|v| v.source == Source::Reconstructed && v.flagged));
    }

    #[test]
    fn vote_examples() {
        let spec = EnsembleSpec::new(vec![0.3, 0.3]).unwrap();
        assert!((spec.classifier_weight - 0.4).abs() < 1e-15);
        let out = ensemble_vote(&spec, &[vec![3], vec![3]], &[7], 10).unwrap();
        assert_eq!(out, vec![3]);
        let single = EnsembleSpec::new(vec![1.0]).unwrap();
        assert_eq!(ensemble_vote(&single, &[vec![4]], &[2], 10).unwrap(), vec![4]);
        // 0.4 vs 0.4 vs 0.2: tie between classes 5 and 1 goes to 1.
        let tie = EnsembleSpec::new(vec![0.4, 0.4]).unwrap();
        assert_eq!(ensemble_vote(&tie, &[vec![5], vec![1]], &[2], 10).unwrap(), vec![1]);
    }

    #[test]
    fn ensemble_config_errors() {
        let spec = EnsembleSpec {
            member_weights: vec![],
            classifier_weight: 0.0,
        };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
        assert!(EnsembleSpec::new(vec![0.7, 0.7]).is_err());
        assert!(EnsembleSpec::new(vec![-0.1]).is_err());
        let u = EnsembleSpec::uniform(4).unwrap();
        assert!((u.classifier_weight - 0.2).abs() < 1e-12);
    }

    #[test]
    fn ensemble_predict_with_identity_members_matches_classifier() {
        let clf = build_model(ModelSpec::mlp_classifier("c", &[3], &[4], 3), 1).unwrap();
        let id = identity_ae(3);
        let x = grid(30);
        let spec = EnsembleSpec::uniform(2).unwrap();
        assert_eq!(ensemble_predict(&spec, &[&id, &id], &clf, &x).unwrap(), predict(&clf, &x).unwrap());
    }

    proptest! {
        #[test]
        fn calibration_is_tight(scores in prop::collection::vec(0.0f64..10.0, 1..300), fpr in 0.0f64..0.99) {
            let t = calibrate_threshold(&scores, fpr).unwrap();
            let rate = flag_rate(&scores, t);
            let n = scores.len() as f64;
            prop_assert!(rate <= fpr + 1e-12);
            // Ties at the threshold can only push the rate further down.
            let distinct = {
                let mut s = scores.clone();
                s.sort_by(f64::total_cmp);
                s.dedup();
                s.len() == scores.len()
            };
            if distinct {
                prop_assert!(rate > fpr - 1.0 / n - 1e-12);
            }
        }

        #[test]
        fn vote_is_scale_invariant(
            votes in prop::collection::vec(prop::collection::vec(0usize..4, 6), 1..5),
            clf in prop::collection::vec(0usize..4, 6),
            raw in prop::collection::vec(0.0f64..1.0, 6),
            c in 0.01f64..1.0,
            scale in 0.001f64..1000.0,
        ) {
            let m = votes.len();
            let spec = EnsembleSpec { member_weights: raw[..m].to_vec(), classifier_weight: c };
            let scaled = EnsembleSpec {
                member_weights: spec.member_weights.iter().map(|w| w * scale).collect(),
                classifier_weight: c * scale,
            };
            prop_assert_eq!(
                ensemble_vote(&spec, &votes, &clf, 4).unwrap(),
                ensemble_vote(&scaled, &votes, &clf, 4).unwrap()
            );
        }

        #[test]
        fn unanimous_vote_wins(label in 0usize..5, raw in prop::collection::vec(0.0f64..1.0, 3), c in 0.01f64..1.0) {
            let spec = EnsembleSpec { member_weights: raw, classifier_weight: c };
            let votes = vec![vec![label]; 3];
            prop_assert_eq!(ensemble_vote(&spec, &votes, &[label], 5).unwrap(), vec![label]);
        }
    }
}
