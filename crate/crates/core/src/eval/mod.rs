//! Detection metrics, corrupted-data drift analysis and accuracy tables.

mod drift;
mod metrics;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use drift::{corrupt_dataset, drift_report, CorruptionKind, DriftReport, DriftRow, GroupStats, ALL_CORRUPTIONS};
pub use metrics::{kolmogorov_q, ks_two_sample, roc_auc, KsResult, RocCurve, RocPoint};

use crate::defence::{score_from_distributions, verdicts};
use crate::error::{Error, Result};
use crate::nn::{compose_defended, predict_proba, reconstruct, Model};
use crate::tensor::Tensor;

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len().max(1) as f64
}

/// One defence column: correction accuracy (every instance through the AE)
/// and, with a threshold, detection-gated accuracy as an extra column.
pub struct DefenceColumn<'a> {
    pub name: String,
    pub ae: &'a Model,
    pub threshold: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub attack: String,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub columns: Vec<String>,
    pub rows: Vec<AccuracyRow>,
}

/// Accuracy table: `No Attack`, `No Defence`, then one column per defence
/// (plus a gated column when it carries a threshold); one row per attack.
pub fn accuracy_report(
    classifier: &Model,
    defences: &[DefenceColumn<'_>],
    clean: &Tensor,
    attacks: &[(&str, &Tensor)],
    labels: &[usize],
) -> Result<AccuracyTable> {
    let n = labels.len();
    if clean.batch() != n {
        return Err(Error::Data(format!("{} clean images but {n} labels", clean.batch())));
    }
    let mut columns: Vec<String> = ["No Attack", "No Defence"].iter().map(|s| String::from(*s)).collect();
    for d in defences {
        compose_defended(classifier, d.ae)?;
        columns.push(d.name.clone());
        if d.threshold.is_some() {
            columns.push(format!("{} (gated)", d.name));
        }
    }
    let clean_acc = accuracy(&predict_proba(classifier, clean)?.argmax_rows(), labels);
    let mut rows = Vec::with_capacity(attacks.len());
    for (name, x) in attacks {
        if x.batch() != n || x.shape() != clean.shape() {
            return Err(Error::Data(format!("attack {name:?} has shape {:?}, expected {:?}", x.shape(), clean.shape())));
        }
        let p = predict_proba(classifier, x)?;
        let plain = p.argmax_rows();
        let mut values = alloc::vec![clean_acc, accuracy(&plain, labels)];
        for d in defences {
            let q = predict_proba(classifier, &reconstruct(d.ae, x)?)?;
            let corrected = q.argmax_rows();
            values.push(accuracy(&corrected, labels));
            if let Some(t) = d.threshold {
                let scores = score_from_distributions(&p, &q, None)?;
                let gated: Vec<usize> = verdicts(&scores, &plain, &corrected, t).iter().map(|v| v.label).collect();
                values.push(accuracy(&gated, labels));
            }
        }
        rows.push(AccuracyRow {
            attack: String::from(*name),
            values,
        });
    }
    Ok(AccuracyTable { columns, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_model, Layer, ModelSpec};
    use alloc::vec;

    #[test]
    fn identity_defence_reproduces_no_defence_column() {
        let clf = build_model(ModelSpec::mlp_classifier("c", &[4], &[6], 3), 1).unwrap();
        let spec = ModelSpec::new("id", &[4], vec![Layer::Dense { units: 4 }]);
        let mut id = build_model(spec, 0).unwrap();
        let mut eye = vec![0.0; 16];
        (0..4).for_each(|i| eye[i * 5] = 1.0);
        id.params_mut().get_mut(0).unwrap().weight = Tensor::new(vec![4, 4], eye).unwrap();
        let clean = Tensor::new(vec![5, 4], (0..20).map(|i| (i % 7) as f64 / 6.0).collect()).unwrap();
        let attacked = clean.map(|v| 1.0 - v);
        let labels = vec![0, 1, 2, 0, 1];
        let table = accuracy_report(
            &clf,
            &[DefenceColumn {
                name: "identity".into(),
                ae: &id,
                threshold: Some(0.0),
            }],
            &clean,
            &[("flip", &attacked), ("none", &clean)],
            &labels,
        )
        .unwrap();
        assert_eq!(table.columns.len(), 4);
        for row in &table.rows {
            assert_eq!(row.values[1], row.values[2]);
            assert_eq!(row.values[1], row.values[3]);
        }
    }
}
