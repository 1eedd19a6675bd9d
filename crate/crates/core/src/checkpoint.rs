//! `VQWW` weight container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "VQWW" version meta_len meta_utf8 n_tensors
//! { name_len name ndim dim* f32* }*
//! ```
//!
//! The metadata block is `key = value` lines in insertion order. Loading keeps
//! both the metadata order and the tensor order, so save -> load -> save is
//! byte-identical.

use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::numerics::{ParamSlot, Tensor};

pub const MAGIC: &[u8; 4] = b"VQWW";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint has no tensor `{0}`")]
    MissingTensor(String),
    #[error("checkpoint has no metadata key `{0}`")]
    MissingKey(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, found: Vec<usize>, expected: Vec<usize> },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> io::Result<()> {
    let v = u32::try_from(v).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "length exceeds u32"))?;
    w.write_all(&v.to_le_bytes())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_string<R: Read>(r: &mut R, what: &str) -> Result<String> {
    let n = get_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| CheckpointError::Malformed(format!("{what} is not UTF-8")))
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends or replaces a metadata entry. Keys and values must be single-line.
    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        assert!(!key.contains(['\n', '=']) && !value.contains('\n'), "metadata must be single-line");
        match self.metadata.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.metadata.push((key, value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key).ok_or_else(|| CheckpointError::MissingKey(key.to_string()))
    }

    pub fn put(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        let name = name.into();
        match self.tensors.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = tensor,
            None => self.tensors.push((name, tensor)),
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    }

    /// Fetches a tensor and checks its shape.
    pub fn get_shaped(&self, name: &str, shape: &[usize]) -> Result<&Tensor<f32>> {
        let t = self.get(name)?;
        if t.shape() != shape {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                found: t.shape().to_vec(),
                expected: shape.to_vec(),
            });
        }
        Ok(t)
    }

    /// Stores value and optimizer moments for each slot; step counts go to metadata.
    pub fn store_slots<'a>(&mut self, slots: impl IntoIterator<Item = &'a ParamSlot<f32>>) {
        for s in slots {
            self.put(s.name.clone(), s.value.clone());
            self.put(format!("{}.adam_m", s.name), s.adam_m.clone());
            self.put(format!("{}.adam_v", s.name), s.adam_v.clone());
            self.set_meta(format!("steps.{}", s.name), s.step_count);
        }
    }

    /// Inverse of [`store_slots`](Self::store_slots). Gradients are zeroed.
    pub fn restore_slots<'a>(&self, slots: impl IntoIterator<Item = &'a mut ParamSlot<f32>>) -> Result<()> {
        for s in slots {
            let shape = s.shape().to_vec();
            s.value = self.get_shaped(&s.name, &shape)?.clone();
            s.adam_m = self.get_shaped(&format!("{}.adam_m", s.name), &shape)?.clone();
            s.adam_v = self.get_shaped(&format!("{}.adam_v", s.name), &shape)?.clone();
            let key = format!("steps.{}", s.name);
            s.step_count = self
                .require_meta(&key)?
                .parse()
                .map_err(|_| CheckpointError::Malformed(format!("bad step count for `{}`", s.name)))?;
            s.zero_grad();
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let meta: String = self.metadata.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        put_u32(w, meta.len())?;
        w.write_all(meta.as_bytes())?;
        put_u32(w, self.tensors.len())?;
        for (name, t) in &self.tensors {
            put_u32(w, name.len())?;
            w.write_all(name.as_bytes())?;
            put_u32(w, t.shape().len())?;
            for &d in t.shape() {
                put_u32(w, d)?;
            }
            let mut bytes = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| CheckpointError::BadMagic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = get_u32(r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let meta = get_string(r, "metadata")?;
        let mut metadata = Vec::new();
        for line in meta.lines() {
            let (k, v) =
                line.split_once(" = ").ok_or_else(|| CheckpointError::Malformed(format!("metadata line `{line}`")))?;
            metadata.push((k.to_string(), v.to_string()));
        }
        let count = get_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = get_string(r, "tensor name")?;
            let ndim = get_u32(r)? as usize;
            let shape = (0..ndim).map(|_| get_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::from_vec(&shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            tensors.push((name, t));
        }
        Ok(Checkpoint { metadata, tensors })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.write(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read(&mut bytes.as_slice())
    }
}
