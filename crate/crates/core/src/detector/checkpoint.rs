//! Binary checkpoints: an 8-byte magic, a little-endian `u64` header length,
//! a JSON header (config, metadata, tensor names and shapes) and the tensor
//! data as little-endian `f32` in header order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GidError, Result};
use crate::nn::{Parameterized, Real};

use super::{Detector, DetectorConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GIDCKPT1";
const MAX_HEADER_LEN: u64 = 64 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: DetectorConfig,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: DetectorConfig,
    pub meta: serde_json::Value,
    /// `(name, shape, values)`; may hold tensors beyond the detector's own.
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_detector<F: Real>(det: &Detector<F>, meta: serde_json::Value) -> Self {
        let mut ck = Self {
            config: det.config.clone(),
            meta,
            tensors: Vec::new(),
        };
        ck.add_params(det, "");
        ck
    }

    /// Appends every parameter of `module` under `prefix`.
    pub fn add_params<F: Real, M: Parameterized<F>>(&mut self, module: &M, prefix: &str) {
        let mut params = Vec::new();
        module.visit_params(prefix, &mut params);
        for (name, p) in params {
            let values = p.value.iter().map(|v| v.as_f64() as f32).collect();
            self.tensors.push((name, p.shape.clone(), values));
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&(String, Vec<usize>, Vec<f32>)> {
        self.tensors.iter().find(|t| t.0 == name)
    }

    /// Copies stored tensors into the matching parameters of `module`.
    pub fn load_params<F: Real, M: Parameterized<F>>(&self, module: &mut M, prefix: &str) -> Result<()> {
        let mut params = Vec::new();
        module.visit_params_mut(prefix, &mut params);
        for (name, p) in params {
            let (_, shape, values) = self
                .tensor(&name)
                .ok_or_else(|| GidError::Checkpoint(format!("missing tensor {name}")))?;
            if *shape != p.shape {
                return Err(GidError::Checkpoint(format!(
                    "tensor {name} has shape {shape:?}, model expects {:?}",
                    p.shape
                )));
            }
            for (dst, &v) in p.value.iter_mut().zip(values) {
                *dst = F::from_f64_lossy(v as f64);
            }
        }
        Ok(())
    }

    pub fn to_detector<F: Real>(&self) -> Result<Detector<F>> {
        let mut det = Detector::new(self.config.clone(), 0)?;
        self.load_params(&mut det, "")?;
        Ok(det)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, shape, _)| TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let io = |e| GidError::Checkpoint(format!("write failed: {e}"));
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for (_, _, values) in &self.tensors {
            let mut buf = Vec::with_capacity(values.len() * 4);
            for v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let truncated = |what: &str| GidError::Checkpoint(format!("truncated checkpoint while reading {what}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| truncated("magic"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(GidError::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| truncated("header length"))?;
        let len = u64::from_le_bytes(len);
        if len > MAX_HEADER_LEN {
            return Err(GidError::Checkpoint(format!("header length {len} is implausible")));
        }
        let mut json = vec![0u8; len as usize];
        r.read_exact(&mut json).map_err(|_| truncated("header"))?;
        let header: Header = serde_json::from_slice(&json)
            .map_err(|e| GidError::Checkpoint(format!("bad header: {e}")))?;
        header.config.validate()?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let count: usize = entry.shape.iter().product();
            let mut buf = vec![0u8; count * 4];
            r.read_exact(&mut buf).map_err(|_| truncated(&format!("tensor {}", entry.name)))?;
            let values = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((entry.name, entry.shape, values));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| GidError::Checkpoint(e.to_string()))? != 0 {
            return Err(GidError::Checkpoint("trailing bytes after tensor data".into()));
        }
        Ok(Self {
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| GidError::io(parent, e))?;
        }
        let file = std::fs::File::create(path).map_err(|e| GidError::io(path, e))?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| GidError::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file)).map_err(|e| match e {
            GidError::Checkpoint(m) => GidError::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
