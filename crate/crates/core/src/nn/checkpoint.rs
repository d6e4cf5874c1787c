//! Binary checkpoint files.
//!
//! Layout, little endian throughout:
//!
//! ```text
//! b"PLINCKPT" | u32 version | u32 len | TOML model config (len bytes)
//! u32 count | count x (u32 name len | name | u8 role | u32 ndim | ndim x u32 | f32 data)
//! u8 has_progress | [u32 epochs done | u64 adam step | per trainable param: f32 m, f32 v]
//! ```

use std::io::{Read, Write};

use thiserror::Error;

use super::adam::AdamState;
use super::model::{Cascade, CascadeConfig, Init, ModelError};
use super::params::{ParamRole, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PLINCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("bad model config: {0}")]
    Config(String),
    #[error("parameters do not match the model config: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Optimizer state needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingProgress {
    pub adam: AdamState<f32>,
    pub epochs_done: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub cascade: Cascade,
    pub params: ParamStore<f32>,
    pub progress: Option<TrainingProgress>,
}

impl Checkpoint {
    pub fn config(&self) -> &CascadeConfig {
        self.cascade.config()
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<(), CheckpointError> {
        let config = toml::to_string(self.cascade.config()).map_err(|e| CheckpointError::Config(e.to_string()))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut buf, CHECKPOINT_VERSION);
        put_u32(&mut buf, config.len() as u32);
        buf.extend_from_slice(config.as_bytes());
        put_u32(&mut buf, self.params.len() as u32);
        for (_, p) in self.params.iter() {
            put_u32(&mut buf, p.name.len() as u32);
            buf.extend_from_slice(p.name.as_bytes());
            buf.push(match p.role {
                ParamRole::Trainable => 0,
                ParamRole::RunningStat => 1,
            });
            put_u32(&mut buf, p.shape.len() as u32);
            for &d in &p.shape {
                put_u32(&mut buf, d as u32);
            }
            put_f32s(&mut buf, &p.data);
        }
        match &self.progress {
            None => buf.push(0),
            Some(progress) => {
                buf.push(1);
                put_u32(&mut buf, progress.epochs_done as u32);
                buf.extend_from_slice(&progress.adam.step.to_le_bytes());
                for id in self.params.trainable_ids() {
                    put_f32s(&mut buf, &progress.adam.m[id.index()]);
                    put_f32s(&mut buf, &progress.adam.v[id.index()]);
                }
            }
        }
        out.write_all(&buf)?;
        out.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| CheckpointError::Config(e.to_string()))?;
        let config: CascadeConfig = toml::from_str(text).map_err(|e| CheckpointError::Config(e.to_string()))?;
        let mut params = ParamStore::new();
        let cascade = Cascade::build(&config, &mut params, Init::Placeholder)?;

        let count = r.u32()? as usize;
        if count != params.len() {
            return Err(CheckpointError::Mismatch(format!(
                "file has {count} tensors, model has {}",
                params.len()
            )));
        }
        let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
        for id in ids {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::Mismatch("tensor name is not UTF-8".into()))?
                .to_string();
            let role = match r.take(1)?[0] {
                0 => ParamRole::Trainable,
                1 => ParamRole::RunningStat,
                other => return Err(CheckpointError::Mismatch(format!("`{name}`: unknown role {other}"))),
            };
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let expected = params.get(id);
            if expected.name != name || expected.shape != shape || expected.role != role {
                return Err(CheckpointError::Mismatch(format!(
                    "found `{name}` {shape:?}, expected `{}` {:?}",
                    expected.name, expected.shape
                )));
            }
            let n = shape.iter().product();
            let data = r.f32s(n)?;
            params.data_mut(id).copy_from_slice(&data);
        }

        let progress = match r.take(1)?[0] {
            0 => None,
            _ => {
                let epochs_done = r.u32()? as usize;
                let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                let mut adam = AdamState::new(&params);
                adam.step = step;
                let ids: Vec<_> = params.trainable_ids().collect();
                for id in ids {
                    let n = params.data(id).len();
                    adam.m[id.index()] = r.f32s(n)?;
                    adam.v[id.index()] = r.f32s(n)?;
                }
                Some(TrainingProgress { adam, epochs_done })
            }
        };
        if r.pos != bytes.len() {
            return Err(CheckpointError::Mismatch("trailing bytes".into()));
        }
        Ok(Self {
            cascade,
            params,
            progress,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CheckpointError> {
        let file = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(file))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CheckpointError> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let out = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let raw = self.take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}
