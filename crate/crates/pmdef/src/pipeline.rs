//! The pipeline stages behind each CLI subcommand. Every stage reads its
//! inputs from and writes its artifacts to the experiment output directory.

use pmdef_core::attacks::{AdversarialBatch, TargetMode};
use pmdef_core::data::Dataset;
use pmdef_core::defence::{adversarial_score, calibrate_threshold, ensemble_predict, flag_rate, verdicts};
use pmdef_core::eval::{accuracy, accuracy_report, drift_report, roc_auc, AccuracyTable, DefenceColumn};
use pmdef_core::nn::{build_model, compose_defended, predict_proba, reconstruct, Model, ModelSpec};
use pmdef_core::seed::derive_seed;
use pmdef_core::train::{train_classifier, train_defence_with, DefenceLoss};
use pmdef_core::Tensor;

use crate::checkpoint::{decode_batch, decode_model, encode_batch, encode_model};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::manifest::Artifacts;
use crate::report::{self, ThresholdRecord};
use crate::runner::run_attack_parallel;

pub const CLASSIFIER_CKPT: &str = "classifier.ckpt";

pub fn ae_ckpt(defence: &str) -> String {
    format!("ae_{defence}.ckpt")
}

pub fn ae_epoch_ckpt(defence: &str, epoch: usize) -> String {
    format!("ae_{defence}_epoch{epoch:03}.ckpt")
}

pub fn threshold_file(defence: &str) -> String {
    format!("threshold_{defence}.json")
}

pub fn adv_file(attack: &str) -> String {
    format!("adv_{attack}.bin")
}

/// A loaded experiment plus run-level overrides.
pub struct Run {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub workers: usize,
}

impl Run {
    fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    fn train_set(&self) -> Result<Dataset> {
        self.config.train.load()
    }

    fn test_set(&self) -> Result<Dataset> {
        self.config.test.load()
    }

    fn classifier_spec(&self, d: &Dataset) -> Result<ModelSpec> {
        let spec = self.config.classifier.model.resolve("classifier", d.item_shape(), d.num_classes)?;
        let k = spec.validate_classifier()?;
        if k != d.num_classes {
            return Err(Error::Config(format!("classifier has {k} outputs but the data has {} classes", d.num_classes)));
        }
        Ok(spec)
    }

    fn ae_spec(&self, d: &Dataset) -> Result<ModelSpec> {
        self.config.autoencoder.model.resolve("autoencoder", d.item_shape(), d.num_classes)
    }

    fn load_classifier(&self, arts: &mut Artifacts, d: &Dataset) -> Result<Model> {
        let spec = self.classifier_spec(d)?;
        load_expecting(arts, CLASSIFIER_CKPT, &spec)
    }

    fn load_ae(&self, arts: &mut Artifacts, name: &str, d: &Dataset) -> Result<Model> {
        let spec = self.ae_spec(d)?;
        load_expecting(arts, name, &spec)
    }

    fn load_batches(&self, arts: &mut Artifacts) -> Result<Vec<(String, AdversarialBatch)>> {
        self.config
            .attacks
            .iter()
            .map(|a| {
                let file = adv_file(&a.name);
                let bytes = arts.read(&file)?;
                Ok((a.name.clone(), decode_batch(&bytes, &arts.path(&file).display().to_string())?))
            })
            .collect()
    }
}

fn load_expecting(arts: &mut Artifacts, name: &str, spec: &ModelSpec) -> Result<Model> {
    let bytes = arts.read(name)?;
    let ck = decode_model(&bytes, &arts.path(name).display().to_string())?;
    if ck.model.spec() != spec {
        return Err(Error::SpecMismatch {
            expected: spec.name.clone(),
            found: ck.model.spec().name.clone(),
        });
    }
    Ok(ck.model)
}

/// Temperature used when scoring a defence trained with a tempered target.
pub fn score_temperature(loss: &DefenceLoss) -> Option<f64> {
    match loss {
        DefenceLoss::KlTemperature { temperature } => Some(*temperature),
        _ => None,
    }
}

pub fn train_classifier_stage(run: &Run, arts: &mut Artifacts) -> Result<()> {
    let train = run.train_set()?;
    let spec = run.classifier_spec(&train)?;
    let mut model = build_model(spec, run.stage_seed("classifier/init"))?;
    model.set_preprocessing(run.config.classifier_preprocessing());
    let opt = run.config.classifier.train.optimizer(run.stage_seed("classifier/train"));
    let report = train_classifier(&mut model, &train.images, &train.labels, &opt)?;
    let train_acc = accuracy(&pmdef_core::nn::predict(&model, &train.images)?, &train.labels);
    log::info!("classifier: final loss {:.4}, train accuracy {:.4}", report.final_loss, train_acc);
    arts.write(CLASSIFIER_CKPT, &encode_model(&model, None)?)?;
    arts.write("classifier_train.jsonl", &report::train_jsonl(&report)?)?;
    Ok(())
}

pub fn train_defence_stage(run: &Run, arts: &mut Artifacts) -> Result<()> {
    let train = run.train_set()?;
    let mut clf = run.load_classifier(arts, &train)?;
    clf.params_mut().freeze_all();
    let spec = run.ae_spec(&train)?;
    let every = run.config.autoencoder.checkpoint_every;
    for d in &run.config.defences {
        let mut ae = build_model(spec.clone(), run.stage_seed("autoencoder/init"))?;
        let opt = run.config.autoencoder.train.optimizer(run.stage_seed("autoencoder/train"));
        let mut snapshots = Vec::new();
        let mut hook = |epoch: usize, m: &Model| {
            if every > 0 && epoch % every == 0 {
                snapshots.push((epoch, encode_model(m, None).map_err(|e| pmdef_core::Error::Data(e.to_string()))?));
            }
            Ok(())
        };
        let outcome = train_defence_with(&mut ae, &clf, &train.images, &d.loss, &opt, &mut hook)?;
        log::info!("defence {}: loss {:.5} -> {:.5}", d.name, outcome.report.initial_loss, outcome.report.final_loss);
        for (epoch, bytes) in snapshots {
            arts.write(&ae_epoch_ckpt(&d.name, epoch), &bytes)?;
        }
        arts.write(&ae_ckpt(&d.name), &encode_model(&ae, outcome.probe.as_ref())?)?;
        arts.write(&format!("ae_{}_train.jsonl", d.name), &report::train_jsonl(&outcome.report)?)?;
    }
    Ok(())
}

pub fn calibrate_stage(run: &Run, arts: &mut Artifacts) -> Result<()> {
    let train = run.train_set()?;
    let normal = match &run.config.calibration {
        Some(c) => c.load()?,
        None => train.clone(),
    };
    let clf = run.load_classifier(arts, &train)?;
    for d in &run.config.defences {
        let ae = run.load_ae(arts, &ae_ckpt(&d.name), &train)?;
        let scores = adversarial_score(&clf, &ae, &normal.images, score_temperature(&d.loss))?;
        let t = calibrate_threshold(&scores, run.config.fpr)?;
        let rec = ThresholdRecord {
            defence: d.name.clone(),
            fpr: run.config.fpr,
            n: scores.len(),
            threshold: t,
            empirical_fpr: flag_rate(&scores, t),
        };
        log::info!("defence {}: threshold {t:.6} (empirical FPR {:.4})", d.name, rec.empirical_fpr);
        arts.write(&threshold_file(&d.name), &report::to_json(&rec)?)?;
    }
    Ok(())
}

pub fn attack_stage(run: &Run, arts: &mut Artifacts) -> Result<()> {
    let train = run.train_set()?;
    let test = run.test_set()?;
    let clf = run.load_classifier(arts, &train)?;
    for a in &run.config.attacks {
        let d = match a.limit {
            Some(k) => test.head(k),
            None => test.clone(),
        };
        let cfg = run.config.attack_config(a, run.stage_seed(&format!("attack/{}", a.name)));
        let batch = match (a.target, &a.defence) {
            (TargetMode::WhiteBox, Some(name)) => {
                let ae = run.load_ae(arts, &ae_ckpt(name), &train)?;
                let target = compose_defended(&clf, &ae)?;
                run_attack_parallel(&cfg, &target, &d.images, Some(&d.labels), run.workers)?
            }
            _ => run_attack_parallel(&cfg, &clf, &d.images, Some(&d.labels), run.workers)?,
        };
        log::info!("attack {}: success rate {:.4} on {} instances", a.name, batch.success_rate(), batch.len());
        arts.write(&adv_file(&a.name), &encode_batch(&batch)?)?;
    }
    Ok(())
}

fn read_threshold(arts: &mut Artifacts, defence: &str) -> Result<ThresholdRecord> {
    let file = threshold_file(defence);
    let bytes = arts.read(&file)?;
    serde_json::from_slice(&bytes).map_err(|source| Error::HeaderJson {
        what: arts.path(&file).display().to_string(),
        source,
    })
}

pub fn score_stage(run: &Run, arts: &mut Artifacts) -> Result<()> {
    let train = run.train_set()?;
    let test = run.test_set()?;
    let clf = run.load_classifier(arts, &train)?;
    let batches = run.load_batches(arts)?;
    for d in &run.config.defences {
        let ae = run.load_ae(arts, &ae_ckpt(&d.name), &train)?;
        let t = read_threshold(arts, &d.name)?.threshold;
        let temp = score_temperature(&d.loss);
        let mut sets: Vec<(String, &Tensor)> = vec![("clean".into(), &test.images)];
        sets.extend(batches.iter().map(|(n, b)| (n.clone(), &b.adversarials)));
        for (set, x) in sets {
            let p = predict_proba(&clf, x)?;
            let q = predict_proba(&clf, &reconstruct(&ae, x)?)?;
            let scores = pmdef_core::defence::score_from_distributions(&p, &q, temp)?;
            let v = verdicts(&scores, &p.argmax_rows(), &q.argmax_rows(), t);
            arts.write(&format!("verdicts_{}_{set}.csv", d.name), &report::verdicts_csv(&v)?)?;
        }
    }
    Ok(())
}

/// Accuracy table over every attack; rows may cover different instance
/// counts, so each is computed on its own originals.
pub fn accuracy_table(clf: &Model, defences: &[DefenceColumn<'_>], batches: &[(String, AdversarialBatch)]) -> Result<AccuracyTable> {
    let mut table: Option<AccuracyTable> = None;
    for (name, b) in batches {
        let t = accuracy_report(clf, defences, &b.originals, &[(name.as_str(), &b.adversarials)], &b.labels)?;
        match &mut table {
            Some(acc) => acc.rows.extend(t.rows),
            None => table = Some(t),
        }
    }
    table.ok_or_else(|| Error::Config("no attacks configured".into()))
}

pub fn evaluate_stage(run: &Run, arts: &mut Artifacts) -> Result<()> {
    let train = run.train_set()?;
    let clf = run.load_classifier(arts, &train)?;
    let batches = run.load_batches(arts)?;
    let mut aes = Vec::new();
    for d in &run.config.defences {
        let ae = run.load_ae(arts, &ae_ckpt(&d.name), &train)?;
        let thr_path = arts.path(&threshold_file(&d.name));
        let threshold = if thr_path.exists() {
            Some(read_threshold(arts, &d.name)?.threshold)
        } else {
            None
        };
        aes.push((d.name.clone(), ae, threshold));
    }
    let columns: Vec<DefenceColumn<'_>> = aes
        .iter()
        .map(|(name, ae, threshold)| DefenceColumn {
            name: name.clone(),
            ae,
            threshold: *threshold,
        })
        .collect();
    let table = accuracy_table(&clf, &columns, &batches)?;
    arts.write("accuracy.csv", &report::accuracy_csv(&table)?)?;

    if let Some(e) = &run.config.ensemble {
        let spec = e.spec()?;
        let members = e
            .epochs
            .iter()
            .map(|&ep| run.load_ae(arts, &ae_epoch_ckpt(&e.defence, ep), &train))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Model> = members.iter().collect();
        let mut rows = Vec::new();
        for (name, b) in &batches {
            let pred = ensemble_predict(&spec, &refs, &clf, &b.adversarials)?;
            rows.push((name.clone(), accuracy(&pred, &b.labels)));
        }
        arts.write("ensemble.csv", &report::pairs_csv(["attack", "accuracy"], &rows)?)?;
    }
    Ok(())
}

pub fn roc_stage(run: &Run, arts: &mut Artifacts) -> Result<()> {
    let train = run.train_set()?;
    let clf = run.load_classifier(arts, &train)?;
    let batches = run.load_batches(arts)?;
    let mut aucs = Vec::new();
    for d in &run.config.defences {
        let ae = run.load_ae(arts, &ae_ckpt(&d.name), &train)?;
        let temp = score_temperature(&d.loss);
        for (name, b) in &batches {
            let curve = detection_roc(&clf, &ae, b, temp)?;
            aucs.push((format!("{}/{name}", d.name), curve.auc));
            arts.write(&format!("roc_{}_{name}.json", d.name), &report::roc_json(&curve)?)?;
        }
    }
    arts.write("auc.csv", &report::pairs_csv(["defence/attack", "auc"], &aucs)?)?;
    Ok(())
}

/// ROC of the adversarial score: the batch's originals as negatives against
/// its successful adversarials as positives.
pub fn detection_roc(clf: &Model, ae: &Model, b: &AdversarialBatch, temperature: Option<f64>) -> Result<pmdef_core::eval::RocCurve> {
    let idx: Vec<usize> = (0..b.len()).filter(|&i| b.success[i]).collect();
    if idx.is_empty() {
        return Err(Error::Core(pmdef_core::Error::Data(format!(
            "attack {} produced no successful adversarials",
            b.config.attack.name()
        ))));
    }
    let normal = adversarial_score(clf, ae, &b.originals, temperature)?;
    let adv = adversarial_score(clf, ae, &b.adversarials.select_batch(&idx), temperature)?;
    Ok(roc_auc(&normal, &adv)?)
}

pub fn drift_stage(run: &Run, arts: &mut Artifacts) -> Result<()> {
    let train = run.train_set()?;
    let test = run.test_set()?;
    let clf = run.load_classifier(arts, &train)?;
    for d in &run.config.defences {
        let ae = run.load_ae(arts, &ae_ckpt(&d.name), &train)?;
        let r = drift_report(
            &clf,
            &ae,
            &test.images,
            &test.labels,
            &run.config.drift.kinds,
            &run.config.drift.severities,
            run.stage_seed("drift"),
        )?;
        arts.write(&format!("drift_{}.json", d.name), &report::drift_json(&r)?)?;
    }
    Ok(())
}
