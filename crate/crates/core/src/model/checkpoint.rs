//! Checkpoints: a directory holding `manifest.json` and `tensors.bin`.
//!
//! `tensors.bin` is the magic `b"TCKP"`, a little-endian `u32` version, then
//! the raw little-endian `f64` data of every tensor listed in the manifest,
//! back to back in manifest order. Each manifest entry records the tensor's
//! name, shape and element offset.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayViewD, IxDyn};
use serde::{Deserialize, Serialize};

use super::optim::{AdamMoments, Optimizer, OptimizerKind};
use super::train::TrainConfig;
use super::{ModelDims, ToyModelParams};
use crate::error::{Error, Result};
use crate::lattice::HeadConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSOR_FILE: &str = "tensors.bin";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dims: ModelDims,
    pub vocab_size: usize,
    pub head: HeadConfig,
    pub seed: u64,
    pub epoch: usize,
    pub optimizer: Option<OptimizerKind>,
    pub optimizer_step: u64,
    pub train_config: Option<TrainConfig>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ToyModelParams,
    pub head: HeadConfig,
    pub seed: u64,
    /// Completed training epochs.
    pub epoch: usize,
    pub optimizer: Option<Optimizer>,
    pub train_config: Option<TrainConfig>,
}

fn prefixed<'a>(
    prefix: &'a str,
    p: &'a ToyModelParams,
) -> impl Iterator<Item = (String, ArrayViewD<'a, f64>)> + 'a {
    p.tensors()
        .into_iter()
        .map(move |(n, t)| (format!("{prefix}{n}"), t))
}

impl Checkpoint {
    pub fn new(params: ToyModelParams, head: HeadConfig, seed: u64) -> Self {
        Self {
            params,
            head,
            seed,
            epoch: 0,
            optimizer: None,
            train_config: None,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut views: Vec<(String, ArrayViewD<'_, f64>)> = prefixed("", &self.params).collect();
        let mut step = 0;
        if let Some(Optimizer::Adam(m)) = &self.optimizer {
            step = m.step;
            views.extend(prefixed("adam.m.", &m.m));
            views.extend(prefixed("adam.v.", &m.v));
        }
        let mut tensors = Vec::with_capacity(views.len());
        let mut bin = BufWriter::new(fs::File::create(dir.join(TENSOR_FILE))?);
        bin.write_all(CHECKPOINT_MAGIC)?;
        bin.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let mut offset = 0;
        for (name, view) in &views {
            for v in view.iter() {
                bin.write_all(&v.to_le_bytes())?;
            }
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: view.shape().to_vec(),
                offset,
            });
            offset += view.len();
        }
        bin.flush()?;
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            dims: self.params.dims(),
            vocab_size: self.params.dims().vocab_size,
            head: self.head,
            seed: self.seed,
            epoch: self.epoch,
            optimizer: self.optimizer.as_ref().map(Optimizer::kind),
            optimizer_step: step,
            train_config: self.train_config.clone(),
            tensors,
        };
        let mut out = serde_json::to_string_pretty(&manifest)?;
        out.push('\n');
        fs::write(dir.join(MANIFEST_FILE), out)?;
        Ok(())
    }

    pub fn read_manifest(dir: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                manifest.version
            )));
        }
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Self::read_manifest(dir)?;
        let mut r = BufReader::new(fs::File::open(dir.join(TENSOR_FILE))?);
        let mut head = [0u8; 8];
        r.read_exact(&mut head)?;
        if &head[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Format("tensor file is truncated".into()));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();

        let mut params = ToyModelParams::zeros(manifest.dims)?;
        let mut moments = match manifest.optimizer {
            Some(OptimizerKind::Adam) => Some(AdamMoments {
                step: manifest.optimizer_step,
                m: params.zeros_like(),
                v: params.zeros_like(),
            }),
            _ => None,
        };
        let mut filled = 0;
        for entry in &manifest.tensors {
            let (target, name) = if let Some(n) = entry.name.strip_prefix("adam.m.") {
                (moments.as_mut().map(|m| &mut m.m), n)
            } else if let Some(n) = entry.name.strip_prefix("adam.v.") {
                (moments.as_mut().map(|m| &mut m.v), n)
            } else {
                (Some(&mut params), entry.name.as_str())
            };
            let target = target
                .ok_or_else(|| Error::Format(format!("unexpected tensor `{}`", entry.name)))?;
            let mut slot = target
                .tensors_mut()
                .into_iter()
                .find(|(n, _)| *n == name)
                .map(|(_, v)| v)
                .ok_or_else(|| Error::Format(format!("unknown tensor `{}`", entry.name)))?;
            if slot.shape() != entry.shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    entry.name,
                    entry.shape,
                    slot.shape()
                )));
            }
            let end = entry.offset + slot.len();
            let src = data.get(entry.offset..end).ok_or_else(|| {
                Error::Format(format!(
                    "tensor `{}` runs past the end of the file",
                    entry.name
                ))
            })?;
            slot.assign(&ArrayViewD::from_shape(IxDyn(&entry.shape), src).expect("shape checked"));
            filled += 1;
        }
        let expected = params.tensors().len() * if moments.is_some() { 3 } else { 1 };
        if filled != expected {
            return Err(Error::Format(format!(
                "checkpoint holds {filled} tensors, expected {expected}"
            )));
        }
        let optimizer = match manifest.optimizer {
            Some(OptimizerKind::Adam) => moments.map(Optimizer::Adam),
            Some(OptimizerKind::Sgd) => Some(Optimizer::Sgd),
            None => None,
        };
        Ok(Self {
            params,
            head: manifest.head,
            seed: manifest.seed,
            epoch: manifest.epoch,
            optimizer,
            train_config: manifest.train_config,
        })
    }
}
