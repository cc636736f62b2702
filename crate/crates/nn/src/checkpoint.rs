use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{NnError, ParamSet, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// JSON checkpoint: `{"format_version":1,"tensors":{..},"config":{..}}`.
///
/// Tensors are written in lexicographic name order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub tensors: BTreeMap<String, TensorRecord>,
    pub config: serde_json::Value,
}

impl Checkpoint {
    pub fn from_params(params: &ParamSet, config: serde_json::Value) -> Result<Self, NnError> {
        let mut tensors = BTreeMap::new();
        for (name, t) in params.iter() {
            if !t.is_finite() {
                return Err(NnError::Checkpoint(format!(
                    "tensor `{name}` is not finite"
                )));
            }
            tensors.insert(
                name.to_string(),
                TensorRecord {
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                },
            );
        }
        Ok(Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            tensors,
            config,
        })
    }

    pub fn to_params(&self) -> Result<ParamSet, NnError> {
        let mut params = ParamSet::new();
        for (name, rec) in &self.tensors {
            let t = Tensor::from_vec(&rec.shape, rec.data.clone())
                .map_err(|e| NnError::Checkpoint(format!("tensor `{name}`: {e}")))?;
            params.insert(name.clone(), t);
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported format_version {}",
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }
}
