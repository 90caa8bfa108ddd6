//! Checkpoint files.
//!
//! ```text
//! magic    4 bytes  "SCCK"
//! version  u32 LE   1
//! hlen     u64 LE   length of the JSON header
//! header   hlen bytes of UTF-8 JSON (config, MOS map, report, parameter list)
//! tensors  one tensor container per parameter, in header order
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::MosNormalizer;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor_file::{decode_tensor_prefix, encode_tensor};

pub const MAGIC: &[u8; 4] = b"SCCK";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    dims: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    mos: MosNormalizer,
    best: MetricReport,
    epoch: u32,
    params: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub normalizer: MosNormalizer,
    pub best: MetricReport,
    pub epoch: u32,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            mos: self.normalizer,
            best: self.best,
            epoch: self.epoch,
            params: self
                .params
                .iter()
                .map(|(name, t)| ParamEntry {
                    name: name.to_string(),
                    dims: t.dims().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.params.iter() {
            out.extend(encode_tensor(t)?);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(err("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let hend = usize::try_from(hlen)
            .ok()
            .and_then(|h| h.checked_add(16))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| err("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..hend]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut params = ParamStore::new();
        let mut pos = hend;
        for entry in &header.params {
            let (t, used) = decode_tensor_prefix(&bytes[pos..])
                .map_err(|e| Error::Checkpoint(format!("parameter {}: {e}", entry.name)))?;
            if t.dims() != entry.dims.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has dims {:?}, header says {:?}",
                    entry.name,
                    t.dims(),
                    entry.dims
                )));
            }
            params.add(entry.name.clone(), t);
            pos += used;
        }
        if pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Checkpoint {
            config: header.config,
            normalizer: header.mos,
            best: header.best,
            epoch: header.epoch,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::embed::write_atomic(path.as_ref(), &self.encode()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Rebuilds the model and copies the stored weights into it.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.model.clone(), 0)?;
        model.store.load_from(&self.params)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn sample() -> Checkpoint {
        let config = RunConfig {
            model: ModelConfig {
                dim: 8,
                vit_depth: 4,
                heads: 2,
                crop_size: 8,
                patch_size: 4,
                expert_hidden: 4,
                ..ModelConfig::default()
            },
            ..RunConfig::default()
        };
        let model = Model::new(config.model.clone(), 3).unwrap();
        Checkpoint {
            config,
            normalizer: MosNormalizer { min: 1.0, max: 5.0 },
            best: MetricReport {
                srcc: 0.5,
                plcc: 0.25,
                main_score: 0.375,
                n: 10,
            },
            epoch: 4,
            params: model.store,
        }
    }

    #[test]
    fn round_trip_at_f32() {
        let ck = sample();
        let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
        assert_eq!(back.config, ck.config);
        assert_eq!(back.normalizer, ck.normalizer);
        assert_eq!(back.best, ck.best);
        assert_eq!(back.epoch, 4);
        for ((n1, a), (n2, b)) in back.params.iter().zip(ck.params.iter()) {
            assert_eq!(n1, n2);
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        back.model().unwrap();
    }

    #[test]
    fn corruption_is_rejected() {
        let bytes = sample().encode().unwrap();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::decode(&magic).is_err());
        let mut version = bytes;
        version[4] = 9;
        assert!(Checkpoint::decode(&version).is_err());
    }
}
