//! Checkpoint files: the magic `SCFCKPT1`, a little-endian u64 header length,
//! a JSON header, then every tensor as raw little-endian f64 in header order.
//!
//! Tensors are grouped by name prefix (`scaffnet/`, `fusionnet/`, `posenet/`,
//! and `adam.m/` or `adam.v/` in front of those).

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Param, ParamLayout, ParamStore};
use crate::nets::{FusionNetConfig, ScaffNetConfig};
use crate::optim::Adam;

pub const MAGIC: &[u8; 8] = b"SCFCKPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Scaffnet,
    Fusionnet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: ModelKind,
    pub scaffnet: ScaffNetConfig,
    #[serde(default)]
    pub fusionnet: Option<FusionNetConfig>,
    /// Snapshot of the run configuration that produced the checkpoint.
    #[serde(default)]
    pub run: serde_json::Value,
    /// Optimiser steps completed.
    pub step: u64,
    pub seed: u64,
    /// Hash of the frozen ScaffNet weights embedded in a FusionNet checkpoint.
    #[serde(default)]
    pub scaffnet_hash: Option<String>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    data: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn new(kind: ModelKind, scaffnet: ScaffNetConfig, fusionnet: Option<FusionNetConfig>, step: u64, seed: u64) -> Self {
        Self {
            header: Header {
                kind,
                scaffnet,
                fusionnet,
                run: serde_json::Value::Null,
                step,
                seed,
                scaffnet_hash: None,
                tensors: Vec::new(),
            },
            data: Vec::new(),
        }
    }

    pub fn put(&mut self, name: String, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.header.tensors.push(TensorEntry { name, shape });
        self.data.push(data);
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.header.tensors.iter().position(|t| t.name == name).map(|i| self.data[i].as_slice())
    }

    pub fn has_group(&self, prefix: &str) -> bool {
        let p = format!("{prefix}/");
        self.header.tensors.iter().any(|t| t.name.starts_with(&p))
    }

    pub fn put_params(&mut self, prefix: &str, params: &ParamStore) {
        for p in params.iter() {
            self.put(format!("{prefix}/{}", p.name), p.shape.clone(), p.data.clone());
        }
    }

    /// Parameters stored under `prefix`, checked against `layout`.
    pub fn params(&self, prefix: &str, layout: &ParamLayout) -> Result<ParamStore> {
        let p = format!("{prefix}/");
        let params: Vec<Param> = self
            .header
            .tensors
            .iter()
            .zip(&self.data)
            .filter_map(|(t, d)| {
                t.name.strip_prefix(&p).map(|name| Param {
                    name: name.to_string(),
                    shape: t.shape.clone(),
                    data: d.clone(),
                })
            })
            .collect();
        if params.is_empty() {
            return Err(Error::Checkpoint(format!("no `{prefix}` weights in checkpoint")));
        }
        layout.load(&params)
    }

    pub fn put_adam(&mut self, prefix: &str, params: &ParamStore, adam: &Adam) {
        for ((p, m), v) in params.iter().zip(&adam.m).zip(&adam.v) {
            self.put(format!("adam.m/{prefix}/{}", p.name), p.shape.clone(), m.clone());
            self.put(format!("adam.v/{prefix}/{}", p.name), p.shape.clone(), v.clone());
        }
    }

    /// Restore moments into `adam`, which must already be sized for `params`.
    pub fn adam_into(&self, prefix: &str, params: &ParamStore, adam: &mut Adam) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            for (which, dst) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
                let key = format!("adam.{which}/{prefix}/{}", p.name);
                let src = self.get(&key).ok_or_else(|| Error::Checkpoint(format!("missing optimiser state `{key}`")))?;
                if src.len() != dst.len() {
                    return Err(Error::Checkpoint(format!("optimiser state `{key}` has the wrong size")));
                }
                dst.copy_from_slice(src);
            }
        }
        adam.step = self.header.step;
        Ok(())
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        out.write_all(MAGIC)?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        for d in &self.data {
            let mut buf = Vec::with_capacity(d.len() * 8);
            for v in d {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        input
            .read_exact(&mut magic)
            .map_err(|_| Error::Checkpoint("file is too short to be a checkpoint".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        input.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        let mut data = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            let mut buf = vec![0u8; n * 8];
            input
                .read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint(format!("truncated data for `{}`", t.name)))?;
            data.push(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect());
        }
        Ok(Self { header, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        // Write then rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        let mut out = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        self.write_to(&mut out)?;
        out.flush()?;
        drop(out);
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// SHA-256 of the serialised file.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}
