//! Binary checkpoints.
//!
//! Layout (little-endian): magic `TPCK`, `u32` version, `u32` length plus a
//! JSON blob `{config, iteration, adam_step, model_hash}`, then a tensor table
//! (`u32` count; per tensor `u16` name length, UTF-8 name, `u8` rank,
//! `rank × u32` dims, f32 payload), then the CRC32 of everything before it.
//! Parameters and batch-norm buffers keep their own names; Adam moments are
//! stored as `adam.m.<name>` and `adam.v.<name>`.

use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::params::{buffer_specs, param_specs};
use crate::model::ParamStore;
use crate::numerics::{AdamState, Tensor};

pub const MAGIC: &[u8; 4] = b"TPCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Completed training iterations.
    pub iteration: usize,
    pub params: ParamStore,
    pub adam: AdamState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: RunConfig,
    iteration: usize,
    adam_step: u64,
    model_hash: u32,
}

impl Checkpoint {
    /// Freshly initialized model at iteration 0.
    pub fn init(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::init(&config.model, config.seed)?;
        let adam = AdamState::new(config.adam());
        Ok(Self {
            config,
            iteration: 0,
            params,
            adam,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            iteration: self.iteration,
            adam_step: self.adam.t,
            model_hash: self.config.model_hash()?,
        };
        let blob = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&len_u32(blob.len(), "config blob")?.to_le_bytes());
        out.extend_from_slice(&blob);

        let mut table: Vec<(String, &Tensor<f32>)> = Vec::new();
        table.extend(self.params.params.iter().map(|(n, t)| (n.clone(), t)));
        table.extend(self.params.buffers.iter().map(|(n, t)| (n.clone(), t)));
        table.extend(self.adam.m.iter().map(|(n, t)| (format!("adam.m.{n}"), t)));
        table.extend(self.adam.v.iter().map(|(n, t)| (format!("adam.v.{n}"), t)));
        out.extend_from_slice(&len_u32(table.len(), "tensor count")?.to_le_bytes());
        for (name, t) in table {
            let nb = name.as_bytes();
            let nlen = u16::try_from(nb.len()).map_err(|_| Error::Contract(format!("tensor name {name} too long")))?;
            out.extend_from_slice(&nlen.to_le_bytes());
            out.extend_from_slice(nb);
            let rank = u8::try_from(t.shape().len()).map_err(|_| Error::Contract(format!("{name}: rank too large")))?;
            out.push(rank);
            for &d in t.shape() {
                out.extend_from_slice(&len_u32(d, "dimension")?.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Parses a checkpoint; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |r: &str| Error::corrupt(path, r);
        if bytes.len() < 16 {
            return Err(corrupt("file too short"));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        let want = u32::from_le_bytes(trailer.try_into().unwrap());
        if crc32fast::hash(body) != want {
            return Err(corrupt("CRC32 mismatch"));
        }
        let mut r = Reader {
            buf: body,
            pos: 0,
            path,
        };
        if r.take(4)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Compatibility(format!(
                "checkpoint version {version}, expected {VERSION}"
            )));
        }
        let blob_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(blob_len)?).map_err(|e| corrupt(&format!("header: {e}")))?;
        if header.config.model_hash()? != header.model_hash {
            return Err(Error::Compatibility("model configuration hash mismatch".into()));
        }
        header.config.validate()?;

        let mut tensors: IndexMap<String, Tensor<f32>> = IndexMap::new();
        for _ in 0..r.u32()? {
            let nlen = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| corrupt("tensor name is not UTF-8"))?;
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if tensors.insert(name.clone(), Tensor::new(&shape, data)?).is_some() {
                return Err(corrupt(&format!("duplicate tensor {name}")));
            }
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes after tensor table"));
        }

        let cfg = &header.config;
        let mut take_group = |specs: Vec<crate::model::params::ParamSpec>| -> Result<IndexMap<String, Tensor<f32>>> {
            specs
                .into_iter()
                .map(|s| {
                    let t = tensors
                        .shift_remove(&s.name)
                        .ok_or_else(|| Error::Compatibility(format!("checkpoint lacks tensor {}", s.name)))?;
                    if t.shape() != s.shape.as_slice() {
                        return Err(Error::Compatibility(format!(
                            "tensor {} has shape {:?}, model expects {:?}",
                            s.name,
                            t.shape(),
                            s.shape
                        )));
                    }
                    Ok((s.name, t))
                })
                .collect()
        };
        let params = ParamStore {
            params: take_group(param_specs(&cfg.model))?,
            buffers: take_group(buffer_specs(&cfg.model))?,
        };
        let mut adam = AdamState::new(cfg.adam());
        adam.t = header.adam_step;
        for (name, t) in tensors {
            let slot = if let Some(p) = name.strip_prefix("adam.m.") {
                adam.m.insert(p.to_string(), t)
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                adam.v.insert(p.to_string(), t)
            } else {
                return Err(Error::Compatibility(format!("unexpected tensor {name}")));
            };
            debug_assert!(slot.is_none());
        }
        Ok(Self {
            config: header.config,
            iteration: header.iteration,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Contract(format!("{what} {n} exceeds u32")))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::corrupt(self.path, "unexpected end of data"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        let mut c = RunConfig::default();
        c.model.backbone.image_size = [16, 32];
        c.model.backbone.stage_depths = vec![1, 1];
        c.model.backbone.stage_heads = vec![1, 2];
        c.model.backbone.base_channels = 8;
        c.model.backbone.window_size = 2;
        c.model.decoder_channels = 8;
        c.seed = 11;
        c
    }

    fn with_moments(mut ck: Checkpoint) -> Checkpoint {
        let grads: Vec<(String, Vec<f32>)> = ck
            .params
            .params
            .iter()
            .map(|(n, t)| (n.clone(), t.data().iter().map(|x| x * 0.5 + 0.01).collect()))
            .collect();
        let items = ck
            .params
            .params
            .iter_mut()
            .zip(&grads)
            .map(|((n, t), (_, g))| (n.as_str(), t, g.as_slice()));
        ck.adam.step(items).unwrap();
        ck.iteration = 1;
        ck
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = with_moments(Checkpoint::init(small()).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.tpck");
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        let q = dir.path().join("b.tpck");
        back.save(&q).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
        assert_eq!(&std::fs::read(&p).unwrap()[..4], b"TPCK");
    }

    #[test]
    fn corruption_and_truncation_are_detected() {
        let bytes = Checkpoint::init(small()).unwrap().to_bytes().unwrap();
        let p = Path::new("ck.tpck");
        let mut flipped = bytes.clone();
        flipped[40] ^= 0x10;
        assert!(matches!(
            Checkpoint::from_bytes(&flipped, p),
            Err(Error::Corrupt { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() / 2], p),
            Err(Error::Corrupt { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..3], p),
            Err(Error::Corrupt { .. })
        ));
    }

    #[test]
    fn wrong_version_is_a_compatibility_error() {
        let mut bytes = Checkpoint::init(small()).unwrap().to_bytes().unwrap();
        bytes[4] = 2;
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, Path::new("x")),
            Err(Error::Compatibility(_))
        ));
    }

    #[test]
    fn missing_file_names_path() {
        let err = Checkpoint::load(Path::new("/nonexistent/ck.tpck")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/ck.tpck"), "{err}");
    }
}
