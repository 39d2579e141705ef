//! Named parameter sets and the binary checkpoint format.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use super::tape::{Tape, Var};
use super::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SVWT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: bad magic, not an SVWT checkpoint")]
    BadMagic { path: String },
    #[error("{path}: unsupported checkpoint version {version}")]
    BadVersion { path: String, version: u32 },
    #[error("checkpoint tensor {name} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint is missing tensor {0}")]
    Missing(String),
}

/// One named tensor; buffers (running statistics) are saved but not trained.
#[derive(Debug, Clone)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// All weights of the model, keyed by dotted names, iterated in sorted order
/// so updates and checkpoints are deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

/// Parameters registered as leaves on a tape for one step.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Wraps externally created leaves, e.g. in gradient checks.
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        self.entries.insert(
            name.to_string(),
            Param {
                tensor,
                trainable: true,
            },
        );
    }

    pub fn insert_buffer(&mut self, name: &str, tensor: Tensor) {
        self.entries.insert(
            name.to_string(),
            Param {
                tensor,
                trainable: false,
            },
        );
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .tensor
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .tensor
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Flips trainability for every parameter whose name starts with the
    /// prefix (buffers stay frozen).
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    /// Registers every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(&p.tensor)))
            .collect();
        BoundParams { vars }
    }

    /// Merges another set under a name prefix.
    pub fn extend(&mut self, prefix: &str, other: ParamSet) {
        for (name, param) in other.entries {
            self.entries.insert(format!("{prefix}.{name}"), param);
        }
    }

    /// Binary checkpoint: magic "SVWT", u32 version, then per-tensor
    /// u32 name length + name + u32 ndim + u32 dims + little-endian f32
    /// values, tensors in sorted name order, read until EOF.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(CHECKPOINT_MAGIC).map_err(io)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION).map_err(io)?;
        for (name, param) in &self.entries {
            w.write_u32::<LittleEndian>(name.len() as u32).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            w.write_u32::<LittleEndian>(param.tensor.shape.len() as u32)
                .map_err(io)?;
            for &d in &param.tensor.shape {
                w.write_u32::<LittleEndian>(d as u32).map_err(io)?;
            }
            for &v in &param.tensor.data {
                w.write_f32::<LittleEndian>(v as f32).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    /// Loads values into this set; every stored tensor must match an existing
    /// entry's name and shape, and every entry must be present in the file.
    pub fn load_from(&mut self, path: &Path) -> Result<(), CheckpointError> {
        let io = |e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic {
                path: path.display().to_string(),
            });
        }
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::BadVersion {
                path: path.display().to_string(),
                version,
            });
        }
        let mut seen = 0usize;
        loop {
            let name_len = match r.read_u32::<LittleEndian>() {
                Ok(n) => n as usize,
                Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(io(e)),
            };
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes).map_err(io)?;
            let name = String::from_utf8_lossy(&name_bytes).into_owned();
            let ndim = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u32::<LittleEndian>().map_err(io)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(r.read_f32::<LittleEndian>().map_err(io)? as f64);
            }
            let entry = self
                .entries
                .get_mut(&name)
                .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            if entry.tensor.shape != shape {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    found: shape,
                    expected: entry.tensor.shape.clone(),
                });
            }
            entry.tensor.data = data;
            seen += 1;
        }
        if seen != self.entries.len() {
            let missing = self
                .entries
                .keys()
                .nth(seen)
                .cloned()
                .unwrap_or_default();
            return Err(CheckpointError::Missing(missing));
        }
        Ok(())
    }
}
