//! Model checkpoints and adversarial batch files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use pmdef_core::attacks::{AdversarialBatch, AttackConfig, AttackDiagnostics, Norms};
use pmdef_core::nn::{HiddenProbe, LayerParams, Model, ModelSpec, ParameterStore, Preprocessing, INIT_SCHEME};

use crate::container::{self, BlockRef, PayloadWriter};
use crate::error::{Error, Result};
use crate::io;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PMDEF001";
pub const BATCH_MAGIC: &[u8; 8] = b"PMDADV01";

#[derive(Serialize, Deserialize)]
struct ParamBlock {
    layer: usize,
    weight: BlockRef,
    bias: BlockRef,
}

#[derive(Serialize, Deserialize)]
struct ProbeBlock {
    source_layer: usize,
    weight: BlockRef,
    bias: BlockRef,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec: ModelSpec,
    seed: u64,
    preprocessing: Preprocessing,
    init_scheme: String,
    frozen: Vec<bool>,
    params: Vec<ParamBlock>,
    #[serde(default)]
    probe: Option<ProbeBlock>,
}

/// A model with the optional hidden-layer probe trained alongside it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub probe: Option<HiddenProbe>,
}

pub fn encode_model(model: &Model, probe: Option<&HiddenProbe>) -> Result<Vec<u8>> {
    let mut w = PayloadWriter::default();
    let params = model
        .params()
        .iter()
        .map(|(layer, p)| ParamBlock {
            layer,
            weight: w.push(&p.weight),
            bias: w.push(&p.bias),
        })
        .collect();
    let probe = probe.map(|p| ProbeBlock {
        source_layer: p.source_layer,
        weight: w.push(&p.weight),
        bias: w.push(&p.bias),
    });
    let header = CheckpointHeader {
        spec: model.spec().clone(),
        seed: model.seed(),
        preprocessing: model.preprocessing(),
        init_scheme: INIT_SCHEME.into(),
        frozen: model.params().frozen_flags().to_vec(),
        params,
        probe,
    };
    w.finish(CHECKPOINT_MAGIC, &header)
}

pub fn decode_model(bytes: &[u8], what: &str) -> Result<Checkpoint> {
    let (h, mut payload): (CheckpointHeader, _) = container::decode(bytes, CHECKPOINT_MAGIC, what)?;
    let n = h.spec.layers.len();
    if h.frozen.len() != n {
        return Err(Error::Format {
            what: what.into(),
            reason: format!("{} frozen flags for {n} layers", h.frozen.len()),
        });
    }
    let mut groups: Vec<Option<LayerParams>> = vec![None; n];
    for b in &h.params {
        let slot = groups.get_mut(b.layer).ok_or_else(|| Error::Format {
            what: what.into(),
            reason: format!("parameters for layer {} of a {n}-layer model", b.layer),
        })?;
        *slot = Some(LayerParams {
            weight: payload.tensor(&b.weight)?,
            bias: payload.tensor(&b.bias)?,
        });
    }
    let probe = match &h.probe {
        Some(p) => Some(HiddenProbe {
            source_layer: p.source_layer,
            weight: payload.tensor(&p.weight)?,
            bias: payload.tensor(&p.bias)?,
        }),
        None => None,
    };
    payload.finish()?;
    let mut store = ParameterStore::new(groups);
    for (i, &f) in h.frozen.iter().enumerate() {
        store.set_frozen(i, f);
    }
    let model = Model::from_parts(h.spec, h.seed, store, h.preprocessing)?;
    if let Some(p) = &probe {
        p.check(&model)?;
    }
    Ok(Checkpoint { model, probe })
}

pub fn save_model(path: &Path, model: &Model, probe: Option<&HiddenProbe>) -> Result<()> {
    io::write(path, &encode_model(model, probe)?)
}

pub fn load_model(path: &Path) -> Result<Checkpoint> {
    decode_model(&io::read(path)?, &path.display().to_string())
}

/// Loads a checkpoint and checks that it holds the `expected` architecture.
pub fn load_model_expecting(path: &Path, expected: &ModelSpec) -> Result<Checkpoint> {
    let ck = load_model(path)?;
    if ck.model.spec() != expected {
        return Err(Error::SpecMismatch {
            expected: expected.name.clone(),
            found: ck.model.spec().name.clone(),
        });
    }
    Ok(ck)
}

#[derive(Serialize, Deserialize)]
struct BatchHeader {
    config: AttackConfig,
    originals: BlockRef,
    adversarials: BlockRef,
    labels: Vec<usize>,
    original_predictions: Vec<usize>,
    adversarial_predictions: Vec<usize>,
    success: Vec<bool>,
    norms: Vec<Norms>,
    #[serde(default)]
    fgsm_pre_clip: Option<BlockRef>,
    diagnostics: AttackDiagnostics,
}

pub fn encode_batch(batch: &AdversarialBatch) -> Result<Vec<u8>> {
    let mut w = PayloadWriter::default();
    let originals = w.push(&batch.originals);
    let adversarials = w.push(&batch.adversarials);
    let fgsm_pre_clip = batch.diagnostics.fgsm_pre_clip.as_ref().map(|t| w.push(t));
    let header = BatchHeader {
        config: batch.config.clone(),
        originals,
        adversarials,
        labels: batch.labels.clone(),
        original_predictions: batch.original_predictions.clone(),
        adversarial_predictions: batch.adversarial_predictions.clone(),
        success: batch.success.clone(),
        norms: batch.norms.clone(),
        fgsm_pre_clip,
        diagnostics: AttackDiagnostics {
            fgsm_pre_clip: None,
            ..batch.diagnostics.clone()
        },
    };
    w.finish(BATCH_MAGIC, &header)
}

pub fn decode_batch(bytes: &[u8], what: &str) -> Result<AdversarialBatch> {
    let (h, mut payload): (BatchHeader, _) = container::decode(bytes, BATCH_MAGIC, what)?;
    let originals = payload.tensor(&h.originals)?;
    let adversarials = payload.tensor(&h.adversarials)?;
    let mut diagnostics = h.diagnostics;
    diagnostics.fgsm_pre_clip = h.fgsm_pre_clip.as_ref().map(|r| payload.tensor(r)).transpose()?;
    payload.finish()?;
    let n = originals.batch();
    let lens = [
        h.labels.len(),
        h.original_predictions.len(),
        h.adversarial_predictions.len(),
        h.success.len(),
        h.norms.len(),
    ];
    if originals.shape() != adversarials.shape() || lens.iter().any(|&l| l != n) {
        return Err(Error::Format {
            what: what.into(),
            reason: format!("inconsistent batch: {n} originals, per-instance lengths {lens:?}"),
        });
    }
    Ok(AdversarialBatch {
        config: h.config,
        originals,
        adversarials,
        labels: h.labels,
        original_predictions: h.original_predictions,
        adversarial_predictions: h.adversarial_predictions,
        success: h.success,
        norms: h.norms,
        diagnostics,
    })
}

pub fn save_batch(path: &Path, batch: &AdversarialBatch) -> Result<()> {
    io::write(path, &encode_batch(batch)?)
}

pub fn load_batch(path: &Path) -> Result<AdversarialBatch> {
    decode_batch(&io::read(path)?, &path.display().to_string())
}
