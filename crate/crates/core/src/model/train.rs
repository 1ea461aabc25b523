use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{image_to_planar, net::Net, AdamState, ModelError, ModelSpec, ParamVector, Result};
use crate::dataio::Manifest;
use crate::imaging::{read_image, run_pipeline, PipelineSpec};
use crate::metrics::{confusion, compute_metrics, MetricsReport};
use crate::rng::{derive_seed, SplitMix64};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 50, batch_size: 32, learning_rate: 1e-3 }
    }
}

/// Pipeline-processed samples in planar layout, ready for the model.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub inputs: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Decode every manifest entry and run it through `pipeline`.
pub fn load_dataset(manifest: &Manifest, pipeline: &PipelineSpec, spec: &ModelSpec) -> Result<Dataset> {
    if pipeline.target_size != spec.input_size {
        return Err(ModelError::Shape(format!(
            "pipeline target size {} differs from model input size {}",
            pipeline.target_size, spec.input_size
        )));
    }
    let inputs = manifest
        .entries
        .par_iter()
        .map(|e| {
            let wrap = |source| ModelError::Sample { sample_id: e.sample_id.clone(), source };
            let img = read_image(&e.path).map_err(wrap)?;
            let processed = run_pipeline(&img, pipeline).map_err(wrap)?;
            Ok(image_to_planar::<f32>(&processed))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        ids: manifest.entries.iter().map(|e| e.sample_id.clone()).collect(),
        inputs,
        labels: manifest.entries.iter().map(|e| e.label).collect(),
    })
}

/// Mini-batch Adam on a fresh optimizer state. Epoch `e` shuffles with
/// `derive_seed(seed, [e])`; the last batch of an epoch may be short.
pub fn train_on_dataset(params: &ParamVector, spec: &ModelSpec, data: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<ParamVector> {
    params.check_spec(spec)?;
    if data.is_empty() {
        return Err(ModelError::Shape("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(ModelError::Spec("batch_size must be positive".into()));
    }
    if let Some(&label) = data.labels.iter().find(|&&l| l >= spec.num_classes) {
        return Err(ModelError::Label { label, num_classes: spec.num_classes });
    }
    let net = Net::new(spec);
    let mut out = params.clone();
    let mut adam = AdamState::new(out.len(), cfg.learning_rate);
    let mut grad64 = vec![0f64; out.len()];
    let mut grad32 = vec![0f32; out.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        SplitMix64::new(derive_seed(seed, &[epoch as u64])).shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let inputs: Vec<&[f32]> = batch.iter().map(|&i| data.inputs[i].as_slice()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            grad64.fill(0.0);
            net.batch_loss_grad(out.values(), &inputs, &labels, &mut grad64);
            for (g32, &g) in grad32.iter_mut().zip(&grad64) {
                *g32 = g as f32;
            }
            adam.update(out.values_mut(), &grad32);
        }
    }
    Ok(out)
}

/// Load `manifest` through `pipeline` and train on it.
pub fn train_local(
    params: &ParamVector,
    spec: &ModelSpec,
    manifest: &Manifest,
    pipeline: &PipelineSpec,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ParamVector> {
    if manifest.is_empty() {
        return Err(ModelError::Shape("training manifest is empty".into()));
    }
    if cfg.epochs == 0 {
        return Ok(params.clone());
    }
    let data = load_dataset(manifest, pipeline, spec)?;
    train_on_dataset(params, spec, &data, cfg, seed)
}

/// Argmax class per sample.
pub fn predict_dataset(params: &ParamVector, spec: &ModelSpec, data: &Dataset) -> Result<Vec<usize>> {
    params.check_spec(spec)?;
    let net = Net::new(spec);
    Ok(data.inputs.par_iter().map(|x| super::argmax(&net.logits(params.values(), x))).collect())
}

pub fn evaluate_dataset(params: &ParamVector, spec: &ModelSpec, data: &Dataset) -> Result<MetricsReport> {
    let preds = predict_dataset(params, spec, data)?;
    let cm = confusion(&data.labels, &preds, spec.num_classes)
        .map_err(|e| ModelError::Shape(e.to_string()))?;
    compute_metrics(&cm).map_err(|e| ModelError::Shape(e.to_string()))
}
