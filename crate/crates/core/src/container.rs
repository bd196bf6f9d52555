//! Flat file container: named little-endian float arrays plus one JSON
//! metadata string, stored in the safetensors layout.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const METADATA_KEY: &str = "child";

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Self {
        NamedArray {
            shape,
            data: ArrayData::F64(data),
        }
    }

    fn bytes(&self) -> Vec<u8> {
        match &self.data {
            ArrayData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    fn dtype(&self) -> Dtype {
        match self.data {
            ArrayData::F32(_) => Dtype::F32,
            ArrayData::F64(_) => Dtype::F64,
        }
    }

    pub fn into_f64(self) -> Vec<f64> {
        match self.data {
            ArrayData::F32(v) => v.into_iter().map(f64::from).collect(),
            ArrayData::F64(v) => v,
        }
    }
}

/// SHA-256 over names, shapes and bytes of every array, in name order.
pub fn content_digest(arrays: &BTreeMap<String, NamedArray>) -> String {
    let mut h = Sha256::new();
    for (name, a) in arrays {
        h.update(name.as_bytes());
        for d in &a.shape {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(a.bytes());
    }
    hex::encode(h.finalize())
}

pub fn write(path: &Path, arrays: &BTreeMap<String, NamedArray>, metadata: &str) -> Result<()> {
    let bytes: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = arrays
        .iter()
        .map(|(k, a)| (k.clone(), a.dtype(), a.shape.clone(), a.bytes()))
        .collect();
    let views = bytes
        .iter()
        .map(|(k, dt, shape, b)| {
            TensorView::new(*dt, shape.clone(), b)
                .map(|v| (k.as_str(), v))
                .map_err(|e| Error::Format(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut info = HashMap::new();
    info.insert(METADATA_KEY.to_string(), metadata.to_string());
    let buf = safetensors::serialize(views, Some(info)).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(BTreeMap<String, NamedArray>, String)> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = SafeTensors::read_metadata(&buf)
        .map_err(|e| Error::Integrity(format!("unreadable container header: {e}")))?;
    let metadata = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(METADATA_KEY))
        .cloned()
        .ok_or_else(|| Error::Integrity("container has no metadata block".into()))?;
    let st = SafeTensors::deserialize(&buf)
        .map_err(|e| Error::Integrity(format!("unreadable container: {e}")))?;
    let mut arrays = BTreeMap::new();
    for (name, view) in st.tensors() {
        let raw = view.data();
        let data = match view.dtype() {
            Dtype::F64 => ArrayData::F64(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            Dtype::F32 => ArrayData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            other => return Err(Error::Format(format!("unsupported dtype {other:?} for {name}"))),
        };
        arrays.insert(
            name,
            NamedArray {
                shape: view.shape().to_vec(),
                data,
            },
        );
    }
    Ok((arrays, metadata))
}
