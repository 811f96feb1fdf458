//! CSV and JSON renderings of verdicts, tables, curves and training logs.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use pmdef_core::defence::DefenceVerdict;
use pmdef_core::eval::{AccuracyTable, DriftReport, RocCurve};
use pmdef_core::train::TrainReport;

use crate::error::{Error, Result};

fn csv_bytes(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))
}

/// Shortest round-tripping decimal form; infinities as `inf` / `-inf`.
pub fn fmt_f64(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:?}")
    }
}

pub fn verdicts_csv(verdicts: &[DefenceVerdict]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "score", "threshold", "flagged", "label", "source"])?;
    for (i, v) in verdicts.iter().enumerate() {
        w.write_record([
            i.to_string(),
            fmt_f64(v.score),
            fmt_f64(v.threshold),
            v.flagged.to_string(),
            v.label.to_string(),
            v.source.as_str().to_string(),
        ])?;
    }
    csv_bytes(w)
}

pub fn accuracy_csv(table: &AccuracyTable) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(std::iter::once("attack").chain(table.columns.iter().map(String::as_str)))?;
    for row in &table.rows {
        w.write_record(std::iter::once(row.attack.clone()).chain(row.values.iter().map(|v| fmt_f64(*v))))?;
    }
    csv_bytes(w)
}

/// `(name, value)` rows under a two-column header.
pub fn pairs_csv(header: [&str; 2], rows: &[(String, f64)]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for (k, v) in rows {
        w.write_record([k.clone(), fmt_f64(*v)])?;
    }
    csv_bytes(w)
}

pub fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

pub fn roc_json(curve: &RocCurve) -> Result<Vec<u8>> {
    #[derive(Serialize)]
    struct Point {
        threshold: String,
        fpr: f64,
        tpr: f64,
    }
    #[derive(Serialize)]
    struct Out {
        auc: f64,
        points: Vec<Point>,
    }
    to_json(&Out {
        auc: curve.auc,
        points: curve
            .points
            .iter()
            .map(|p| Point {
                threshold: fmt_f64(p.threshold),
                fpr: p.fpr,
                tpr: p.tpr,
            })
            .collect(),
    })
}

pub fn drift_json(report: &DriftReport) -> Result<Vec<u8>> {
    to_json(report)
}

/// One JSON object per line: a header line, then one line per epoch.
/// Wall time is left out so the log is reproducible.
pub fn train_jsonl(report: &TrainReport) -> Result<Vec<u8>> {
    #[derive(Serialize)]
    struct Head<'a> {
        seed: u64,
        initial_loss: f64,
        final_loss: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        loss: Option<&'a pmdef_core::train::DefenceLoss>,
    }
    let mut out = serde_json::to_vec(&Head {
        seed: report.seed,
        initial_loss: report.initial_loss,
        final_loss: report.final_loss,
        loss: report.loss.as_ref(),
    })?;
    out.push(b'\n');
    for e in &report.epochs {
        out.extend(serde_json::to_vec(e)?);
        out.push(b'\n');
    }
    Ok(out)
}

/// Serialises a float that may be infinite as a JSON string.
pub mod lenient_f64 {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&fmt_f64(*v))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(serde::de::Error::custom(format!("not a number: {other:?}"))),
            },
        }
    }
}

/// Calibrated detection threshold of one defence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRecord {
    pub defence: String,
    pub fpr: f64,
    pub n: usize,
    #[serde(with = "lenient_f64")]
    pub threshold: f64,
    /// Fraction of the calibration scores strictly above the threshold.
    pub empirical_fpr: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use pmdef_core::defence::verdicts;

    #[test]
    fn verdict_csv_layout() {
        let v = verdicts(&[0.5, 2.0], &[1, 2], &[3, 4], 1.0);
        let text = String::from_utf8(verdicts_csv(&v).unwrap()).unwrap();
        assert_eq!(
            text,
            "id,score,threshold,flagged,label,source\n0,0.5,1.0,false,1,original\n1,2.0,1.0,true,4,reconstructed\n"
        );
    }

    #[test]
    fn infinite_threshold_round_trips() {
        let r = ThresholdRecord {
            defence: "kl".into(),
            fpr: 1.0,
            n: 3,
            threshold: f64::NEG_INFINITY,
            empirical_fpr: 1.0,
        };
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.contains("\"-inf\""));
        assert_eq!(serde_json::from_str::<ThresholdRecord>(&text).unwrap(), r);
    }
}
