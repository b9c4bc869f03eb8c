//! Checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "PSCKPT01"
//! u32 text length, UTF-8 text   (TrainConfig plus checkpoint.* keys)
//! u32 tensor count, tensors     (parameters)
//! u32 tensor count, tensors     (optimizer velocities)
//! u32 CRC32 of everything above
//! tensor: u16 name length, name, u8 rank, u32 dims[rank], f32 values
//! ```

use std::fmt::Write as _;
use std::path::Path;

use super::config::{parse_with_extra, TrainConfig};
use crate::error::{CheckpointError, Error, Result};
use crate::model::{build_model, Model};
use crate::nn::Tensor;
use crate::volume::NormStats;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PSCKPT01";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs; also the optimizer iteration.
    pub epoch: usize,
    pub norm: NormStats,
    pub params: Vec<(String, Tensor<f32>)>,
    pub velocities: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_model(config: &TrainConfig, model: &Model<f32>, velocities: &[Tensor<f32>], epoch: usize, norm: NormStats) -> Self {
        let names = model.param_info().iter().map(|p| p.name.clone());
        Checkpoint {
            config: config.clone(),
            epoch,
            norm,
            params: names.clone().zip(model.params().iter().cloned()).collect(),
            velocities: names.zip(velocities.iter().cloned()).collect(),
        }
    }

    /// Rebuilds the network described by the embedded config and installs
    /// the stored parameters.
    pub fn model(&self) -> Result<Model<f32>> {
        let mut m: Model<f32> = build_model(&self.config.network, self.config.seed)?;
        check_tensors(&m, &self.params)?;
        m.set_params(self.params.iter().map(|(_, t)| t.clone()).collect())?;
        Ok(m)
    }

    pub fn velocity_tensors(&self) -> Vec<Tensor<f32>> {
        self.velocities.iter().map(|(_, t)| t.clone()).collect()
    }

    fn text(&self) -> String {
        let mut s = self.config.to_text();
        let _ = writeln!(s, "checkpoint.epoch = {}", self.epoch);
        let _ = writeln!(s, "checkpoint.norm_mean = {}", self.norm.mean);
        let _ = writeln!(s, "checkpoint.norm_std = {}", self.norm.std);
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let text = self.text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for list in [&self.params, &self.velocities] {
            out.extend_from_slice(&(list.len() as u32).to_le_bytes());
            for (name, t) in list {
                out.extend_from_slice(&(name.len() as u16).to_le_bytes());
                out.extend_from_slice(name.as_bytes());
                out.push(t.shape().len() as u8);
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u32).to_le_bytes());
                }
                for &v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Structure is validated against the model the embedded config builds
    /// (tensor count, names, lengths) before the CRC is compared.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(CheckpointError::Truncated.into());
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            if bytes.starts_with(b"PSCKPT") {
                return Err(Error::UnsupportedVersion(String::from_utf8_lossy(&bytes[..8]).into_owned()));
            }
            return Err(CheckpointError::Magic(String::from_utf8_lossy(&bytes[..8]).into_owned()).into());
        }
        let mut r = Reader { bytes, pos: 8 };
        let text_len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(text_len)?).map_err(|_| CheckpointError::Utf8)?;
        let (config, extra) = parse_with_extra(text, None, "checkpoint.")?;
        let get = |k: &str| -> Result<&String> { extra.get(k).ok_or_else(|| Error::Config(format!("checkpoint text lacks '{k}'"))) };
        let parse_f = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::Config(format!("bad value for '{k}'"))) };
        let epoch = get("checkpoint.epoch")?.parse().map_err(|_| Error::Config("bad checkpoint.epoch".into()))?;
        let norm = NormStats::new(parse_f("checkpoint.norm_mean")?, parse_f("checkpoint.norm_std")?)?;
        let template: Model<f32> = build_model(&config.network, config.seed)?;
        let params = read_tensors(&mut r, &template)?;
        let velocities = read_tensors(&mut r, &template)?;
        let body_end = r.pos;
        let stored = r.u32()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(CheckpointError::TensorLength {
                name: "<trailer>".into(),
                expected: body_end + 4,
                found: bytes.len(),
            }));
        }
        let computed = crc32fast::hash(&bytes[..body_end]);
        if stored != computed {
            return Err(CheckpointError::Crc { stored, computed }.into());
        }
        Ok(Checkpoint { config, epoch, norm, params, velocities })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}

fn check_tensors(template: &Model<f32>, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let info = template.param_info();
    if info.len() != tensors.len() {
        return Err(CheckpointError::TensorCount { expected: info.len(), found: tensors.len() }.into());
    }
    for ((name, t), (p, expected)) in tensors.iter().zip(info.iter().zip(template.params())) {
        if *name != p.name {
            return Err(CheckpointError::TensorName { expected: p.name.clone(), found: name.clone() }.into());
        }
        if t.shape() != expected.shape() {
            return Err(CheckpointError::TensorLength { name: name.clone(), expected: expected.len(), found: t.len() }.into());
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated.into());
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
}

fn read_tensors(r: &mut Reader<'_>, template: &Model<f32>) -> Result<Vec<(String, Tensor<f32>)>> {
    let info = template.param_info();
    let count = r.u32()? as usize;
    if count != info.len() {
        return Err(CheckpointError::TensorCount { expected: info.len(), found: count }.into());
    }
    let mut out = Vec::with_capacity(count);
    for (p, expected) in info.iter().zip(template.params()) {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| CheckpointError::Utf8)?.to_string();
        if name != p.name {
            return Err(CheckpointError::TensorName { expected: p.name.clone(), found: name }.into());
        }
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let found: usize = shape.iter().product();
        if shape != expected.shape() {
            return Err(CheckpointError::TensorLength { name, expected: expected.len(), found }.into());
        }
        let data = r.take(4 * found)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}
