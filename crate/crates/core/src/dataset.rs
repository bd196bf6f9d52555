//! Dataset container: arrays `x`, `z`, `mask` plus a metadata block with the
//! process spec, sampling seed and fingerprint.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::container::{self, NamedArray};
use crate::error::{Error, Result};
use crate::process::{fingerprint, GroundTruthSeries, ProcessSpec};

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMetadata {
    format_version: u32,
    spec: ProcessSpec,
    seed: u64,
    fingerprint: String,
    content_sha256: String,
}

fn arrays_of(series: &GroundTruthSeries) -> BTreeMap<String, NamedArray> {
    let mut arrays = BTreeMap::new();
    arrays.insert(
        "x".to_string(),
        NamedArray::f64(series.observations.shape().to_vec(), series.observations.iter().copied().collect()),
    );
    arrays.insert(
        "z".to_string(),
        NamedArray::f64(series.latents.shape().to_vec(), series.latents.iter().copied().collect()),
    );
    arrays.insert(
        "mask".to_string(),
        NamedArray::f64(
            series.mask.shape().to_vec(),
            series.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        ),
    );
    arrays
}

pub fn export_dataset(series: &GroundTruthSeries, path: &Path) -> Result<()> {
    let arrays = arrays_of(series);
    let meta = DatasetMetadata {
        format_version: DATASET_FORMAT_VERSION,
        spec: series.spec.clone(),
        seed: series.seed,
        fingerprint: series.fingerprint.clone(),
        content_sha256: container::content_digest(&arrays),
    };
    container::write(path, &arrays, &serde_json::to_string(&meta)?)
}

fn take(arrays: &mut BTreeMap<String, NamedArray>, name: &str, rank: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let a = arrays
        .remove(name)
        .ok_or_else(|| Error::Integrity(format!("dataset is missing array {name:?}")))?;
    if a.shape.len() != rank {
        return Err(Error::Integrity(format!("array {name:?} has rank {}", a.shape.len())));
    }
    Ok((a.shape.clone(), a.into_f64()))
}

pub fn import_dataset(path: &Path) -> Result<GroundTruthSeries> {
    let (mut arrays, raw_meta) = container::read(path)?;
    let meta: DatasetMetadata = serde_json::from_str(&raw_meta)
        .map_err(|e| Error::Integrity(format!("corrupted metadata: {e}")))?;
    if meta.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Version {
            found: meta.format_version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let expected = fingerprint(&meta.spec, meta.seed);
    if expected != meta.fingerprint {
        return Err(Error::Integrity(format!(
            "fingerprint mismatch: stored {} but spec and seed hash to {expected}",
            meta.fingerprint
        )));
    }
    if container::content_digest(&arrays) != meta.content_sha256 {
        return Err(Error::Integrity("array contents do not match the stored digest".into()));
    }
    let shape_err = |e: ndarray::ShapeError| Error::Integrity(e.to_string());
    let (xs, x) = take(&mut arrays, "x", 3)?;
    let (zs, z) = take(&mut arrays, "z", 4)?;
    let (ms, m) = take(&mut arrays, "mask", 2)?;
    let observations = Array3::from_shape_vec((xs[0], xs[1], xs[2]), x).map_err(shape_err)?;
    let latents = Array4::from_shape_vec((zs[0], zs[1], zs[2], zs[3]), z).map_err(shape_err)?;
    let mask = Array2::from_shape_vec((ms[0], ms[1]), m.into_iter().map(|v| v != 0.0).collect())
        .map_err(shape_err)?;
    Ok(GroundTruthSeries {
        spec: meta.spec,
        seed: meta.seed,
        observations,
        latents,
        mask,
        fingerprint: meta.fingerprint,
    })
}
