//! Named-tensor archive on top of the safetensors container, with a JSON
//! metadata document stored under a single metadata key.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::error::{Error, Result};
use crate::scalar::{Precision, Scalar};

const METADATA_KEY: &str = "semprompt";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub values: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn into_array(self) -> Result<ArrayD<T>> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.values)
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// Ordered collection of tensors plus metadata, ready to write.
#[derive(Debug, Clone, Default)]
pub struct Archive<T> {
    pub tensors: BTreeMap<String, Tensor<T>>,
    pub metadata: Option<serde_json::Value>,
}

impl<T: Scalar> Archive<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
            metadata: None,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<T>) {
        self.tensors.insert(
            name.into(),
            Tensor {
                shape: shape.to_vec(),
                values,
            },
        );
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor<T>> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }

    pub fn take_array<D: ndarray::Dimension>(&mut self, name: &str) -> Result<ndarray::Array<T, D>> {
        self.take(name)?
            .into_array()?
            .into_dimensionality::<D>()
            .map_err(|e| Error::Checkpoint(format!("tensor {name:?}: {e}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dtype = match T::PRECISION {
            Precision::F32 => Dtype::F32,
            Precision::F64 => Dtype::F64,
        };
        let raw: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), t.shape.clone(), T::to_le_bytes_vec(&t.values)))
            .collect();
        let views = raw
            .iter()
            .map(|(k, shape, bytes)| {
                TensorView::new(dtype, shape.clone(), bytes)
                    .map(|v| (k.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let info = self
            .metadata
            .as_ref()
            .map(|m| HashMap::from([(METADATA_KEY.to_string(), m.to_string())]));
        safetensors::serialize(views, &info).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    /// Reads f32 or f64 tensors, converting to `T`.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            let values: Vec<T> = match view.dtype() {
                Dtype::F32 => f32::from_le_bytes_slice(view.data())
                    .into_iter()
                    .map(|v| T::of(f64::from(v)))
                    .collect(),
                Dtype::F64 => f64::from_le_bytes_slice(view.data())
                    .into_iter()
                    .map(T::of)
                    .collect(),
                other => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name:?} has unsupported dtype {other:?}"
                    )))
                }
            };
            tensors.insert(
                name,
                Tensor {
                    shape: view.shape().to_vec(),
                    values,
                },
            );
        }
        let (_, meta) =
            SafeTensors::read_metadata(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let metadata = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(METADATA_KEY))
            .map(|s| serde_json::from_str(s))
            .transpose()?;
        Ok(Self { tensors, metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Element type of the tensors stored in an archive file.
pub fn stored_precision(bytes: &[u8]) -> Result<Option<Precision>> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let first = st.tensors().into_iter().next();
    Ok(first.and_then(|(_, v)| match v.dtype() {
        Dtype::F32 => Some(Precision::F32),
        Dtype::F64 => Some(Precision::F64),
        _ => None,
    }))
}
