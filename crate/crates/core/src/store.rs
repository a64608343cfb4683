//! On-disk formats: pretty JSON documents and a JSON array container holding
//! named tensors next to a metadata block.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, ArrayView, Dimension, IxDyn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl StoredTensor {
    pub fn from_view<D: Dimension>(view: ArrayView<'_, f64, D>) -> Self {
        StoredTensor {
            shape: view.shape().to_vec(),
            data: view.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> Result<ArrayD<f64>> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data.clone())
            .map_err(|e| Error::Input(format!("stored tensor shape {:?}: {e}", self.shape)))
    }

    pub fn to_array_dim<D: Dimension>(&self) -> Result<ndarray::Array<f64, D>> {
        self.to_array()?
            .into_dimensionality::<D>()
            .map_err(|e| Error::Input(format!("stored tensor rank {:?}: {e}", self.shape)))
    }
}

/// Named tensors plus a free-form metadata document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ArrayFile<M> {
    pub metadata: M,
    pub tensors: BTreeMap<String, StoredTensor>,
}

impl<M: Serialize + DeserializeOwned> ArrayFile<M> {
    pub fn new(metadata: M) -> Self {
        ArrayFile {
            metadata,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert<D: Dimension>(&mut self, name: impl Into<String>, view: ArrayView<'_, f64, D>) {
        self.tensors.insert(name.into(), StoredTensor::from_view(view));
    }

    pub fn get<D: Dimension>(&self, name: &str) -> Result<ndarray::Array<f64, D>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Input(format!("array file has no tensor named {name:?}")))?
            .to_array_dim()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}
