//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  "LSCKPT\0\0"
//! u32    format version
//! u8     element width of the tensors (4 or 8)
//! u32    length of the config JSON, then the JSON bytes
//! u32    number of RFF frequencies, then that many f64
//! u32    number of tensors, then per tensor:
//!        u32 name length, name bytes, u32 rank, u64 dims, raw elements
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{ModelConfig, ModelError, ModelParams, SourceModel};
use crate::diffgraph::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"LSCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("unsupported element width {0}")]
    ElementWidth(u8),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::F64(v) => v.len(),
        }
    }

    fn convert<T: Real>(&self) -> Vec<T> {
        match self {
            Self::F32(v) => v.iter().map(|&x| T::from_f64_lossy(x as f64)).collect(),
            Self::F64(v) => v.iter().map(|&x| T::from_f64_lossy(x)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub rff_freqs: Vec<f64>,
    pub tensors: BTreeMap<String, StoredTensor>,
}

fn stored<T: Real>(t: &Tensor<T>) -> StoredTensor {
    let data = if T::BYTES == 4 {
        TensorData::F32(t.data().iter().map(|v| v.to_f32().expect("f32")).collect())
    } else {
        TensorData::F64(t.to_f64())
    };
    StoredTensor { shape: t.shape().to_vec(), data }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() < n {
            return Err(CheckpointError::Truncated);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize, CheckpointError> {
        let n = self.u32()? as usize;
        if n > self.buf.len() {
            // Every counted item occupies at least one byte.
            return Err(CheckpointError::Truncated);
        }
        Ok(n)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(u32::try_from(v).expect("fits in u32")).to_le_bytes());
}

impl Checkpoint {
    pub fn from_model<T: Real>(model: &SourceModel<T>) -> Self {
        let params = model.params();
        Self {
            config: model.config().clone(),
            rff_freqs: params.rff_freqs.clone(),
            tensors: params.tensors.iter().map(|(k, v)| (k.clone(), stored(v))).collect(),
        }
    }

    pub fn to_model<T: Real>(&self) -> Result<SourceModel<T>, ModelError> {
        let mut tensors = BTreeMap::new();
        for (name, t) in &self.tensors {
            tensors.insert(name.clone(), Tensor::new(t.shape.clone(), t.data.convert())?);
        }
        SourceModel::from_params(self.config.clone(), ModelParams { tensors, rff_freqs: self.rff_freqs.clone() })
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.data.len()).sum()
    }

    /// Element width of the stored tensors in bytes.
    pub fn element_width(&self) -> u8 {
        match self.tensors.values().next().map(|t| &t.data) {
            Some(TensorData::F32(_)) => 4,
            _ => 8,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let width = self.element_width();
        out.push(width);
        let json = serde_json::to_vec(&self.config).expect("config serialises");
        put_u32(&mut out, json.len());
        out.extend_from_slice(&json);
        put_u32(&mut out, self.rff_freqs.len());
        for f in &self.rff_freqs {
            out.extend_from_slice(&f.to_le_bytes());
        }
        put_u32(&mut out, self.tensors.len());
        for (name, t) in &self.tensors {
            put_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape.len());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) if width == 4 => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) if width == 8 => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F32(v) => v.iter().for_each(|&x| out.extend_from_slice(&(x as f64).to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes };
        if r.take(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let width = r.take(1)?[0];
        if width != 4 && width != 8 {
            return Err(CheckpointError::ElementWidth(width));
        }
        let n = r.len()?;
        let config: ModelConfig =
            serde_json::from_slice(r.take(n)?).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let n = r.len()?;
        let rff_freqs = (0..n).map(|_| r.u64().map(f64::from_bits)).collect::<Result<_, _>>()?;
        let count = r.len()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let n = r.len()?;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            let rank = r.len()?;
            let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_, _>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&l| l.checked_mul(width as usize).is_some_and(|b| b <= r.buf.len()))
                .ok_or(CheckpointError::Truncated)?;
            let raw = r.take(len * width as usize)?;
            let data = if width == 4 {
                TensorData::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect())
            } else {
                TensorData::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect())
            };
            if tensors.insert(name.clone(), StoredTensor { shape, data }).is_some() {
                return Err(CheckpointError::Malformed(format!("duplicate tensor {name}")));
            }
        }
        if !r.buf.is_empty() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", r.buf.len())));
        }
        Ok(Self { config, rff_freqs, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
