//! Binary checkpoint container: an 8-byte magic, a little-endian `u64`
//! header length, a JSON header (schema version, caller metadata, tensor
//! names and shapes) and the tensors as raw little-endian `f64`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SSMDGCKP";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    schema: u32,
    meta: serde_json::Value,
    tensors: Vec<(String, Vec<usize>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            schema: SCHEMA_VERSION,
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let n: usize = self.tensors.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.schema != SCHEMA_VERSION {
            return Err(Error::Checkpoint(format!(
                "schema version {} is not supported (expected {SCHEMA_VERSION})",
                header.schema
            )));
        }
        let mut rest = &bytes[16 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for (name, shape) in header.tensors {
            let n: usize = shape.iter().product();
            if rest.len() < 8 * n {
                return Err(Error::Checkpoint(format!("truncated data for {name}")));
            }
            let (chunk, tail) = rest.split_at(8 * n);
            let data = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Tensor::new(&shape, data)?));
            rest = tail;
        }
        if !rest.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self { meta: header.meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
