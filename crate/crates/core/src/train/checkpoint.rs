use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{Adam, BestSnapshot, EpochMetrics, Precision, TrainConfig, TrainState};
use crate::container::{self, NamedArray};
use crate::error::{Error, Result};
use crate::model::{ChildModel, ModelConfig, ObsNormalizer};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMetadata {
    format_version: u32,
    model_config: ModelConfig,
    train_config: TrainConfig,
    precision: Precision,
    step: u64,
    epoch: usize,
    optimizer_steps: u64,
    normalizer: ObsNormalizer,
    metrics: Vec<EpochMetrics>,
    best_epoch: Option<usize>,
    best_val_mcc: Option<f64>,
}

fn tensor_values(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Writes parameters, optimiser moments, the best snapshot and run metadata.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut arrays = BTreeMap::new();
    let vars = state.model.named_parameters();
    for (k, (name, var)) in vars.iter().enumerate() {
        let shape = var.dims().to_vec();
        arrays.insert(format!("param/{name}"), NamedArray::f64(shape.clone(), tensor_values(var.as_tensor())?));
        arrays.insert(format!("adam_m/{name}"), NamedArray::f64(shape.clone(), tensor_values(&state.optimizer.first[k])?));
        arrays.insert(format!("adam_v/{name}"), NamedArray::f64(shape, tensor_values(&state.optimizer.second[k])?));
    }
    if let Some(best) = &state.best {
        for (name, shape, values) in &best.params {
            arrays.insert(format!("best/{name}"), NamedArray::f64(shape.clone(), values.clone()));
        }
    }
    let meta = CheckpointMetadata {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model_config: state.model.config().clone(),
        train_config: state.config.clone(),
        precision: if state.model.dtype() == candle_core::DType::F64 { Precision::F64 } else { Precision::F32 },
        step: state.step,
        epoch: state.epoch,
        optimizer_steps: state.optimizer.steps,
        normalizer: state.normalizer.clone(),
        metrics: state.metrics.clone(),
        best_epoch: state.best.as_ref().map(|b| b.epoch),
        best_val_mcc: state.best.as_ref().map(|b| b.val_mcc),
    };
    container::write(path, &arrays, &serde_json::to_string(&meta)?)
}

/// Restores a training state. With `expected`, the stored model config must
/// equal it.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<TrainState> {
    let (mut arrays, meta) = container::read(path)?;
    let value: serde_json::Value = serde_json::from_str(&meta).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    let found = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Version { found, expected: CHECKPOINT_FORMAT_VERSION });
    }
    let meta: CheckpointMetadata = serde_json::from_value(value).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
    if let Some(cfg) = expected {
        if cfg != &meta.model_config {
            return Err(Error::Shape(format!(
                "checkpoint model config {:?} differs from requested {:?}",
                meta.model_config, cfg
            )));
        }
    }
    let model = ChildModel::new(meta.model_config.clone(), 0, meta.precision.dtype())?;
    let mut take = |prefix: &str, name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
        let a = arrays
            .remove(&format!("{prefix}/{name}"))
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {prefix}/{name}")))?;
        Ok((a.shape.clone(), a.into_f64()))
    };
    let names: Vec<String> = model.named_parameters().iter().map(|(n, _)| n.clone()).collect();
    let mut params = Vec::new();
    let mut first = Vec::new();
    let mut second = Vec::new();
    let dtype = model.dtype();
    let to_t = |(shape, v): (Vec<usize>, Vec<f64>)| -> Result<Tensor> {
        Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
    };
    for name in &names {
        let (shape, v) = take("param", name)?;
        params.push((name.clone(), shape, v));
        first.push(to_t(take("adam_m", name)?)?);
        second.push(to_t(take("adam_v", name)?)?);
    }
    model.import_parameters(&params)?;
    for ((_, var), (m, v)) in model.named_parameters().iter().zip(first.iter().zip(&second)) {
        if m.dims() != var.dims() || v.dims() != var.dims() {
            return Err(Error::Shape("optimizer moments do not match parameter shapes".into()));
        }
    }
    let best = match (meta.best_epoch, meta.best_val_mcc) {
        (Some(epoch), Some(val_mcc)) => {
            let params = names
                .iter()
                .map(|n| take("best", n).map(|(s, v)| (n.clone(), s, v)))
                .collect::<Result<Vec<_>>>()?;
            Some(BestSnapshot { epoch, val_mcc, params })
        }
        _ => None,
    };
    let mut optimizer = Adam::new(model.named_parameters(), meta.train_config.learning_rate)?;
    optimizer.first = first;
    optimizer.second = second;
    optimizer.steps = meta.optimizer_steps;
    Ok(TrainState {
        model,
        optimizer,
        config: meta.train_config,
        normalizer: meta.normalizer,
        step: meta.step,
        epoch: meta.epoch,
        metrics: meta.metrics,
        best,
    })
}
