//! Versioned single-file tensor container used for checkpoints and
//! pretrained backbone weights.
//!
//! Layout (little endian):
//!
//! ```text
//! b"MGNETCKP" | u32 format version | u64 header length | JSON header | tensor data
//! ```
//!
//! The header lists every tensor with its kind, shape, byte offset into the
//! data section and element count, plus the training step and a snapshot of
//! the configuration.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MGNETCKP";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntryKind {
    Param,
    Buffer,
    Optimizer,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    kind: EntryKind,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    step: u64,
    config: serde_json::Value,
    entries: Vec<Entry>,
}

/// In-memory contents of a container file.
#[derive(Clone, Debug, PartialEq)]
pub struct Container<T> {
    pub step: u64,
    pub config: serde_json::Value,
    /// Parameters and buffers, keyed by canonical name.
    pub tensors: Vec<(String, Tensor<T>)>,
    pub kinds: Vec<EntryKind>,
    /// Optimizer state (momentum buffers), keyed by parameter name.
    pub optimizer: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Container<T> {
    pub fn new(step: u64, config: serde_json::Value) -> Self {
        Self { step, config, tensors: Vec::new(), kinds: Vec::new(), optimizer: Vec::new() }
    }

    pub fn push(&mut self, name: &str, kind: EntryKind, tensor: Tensor<T>) {
        if kind == EntryKind::Optimizer {
            self.optimizer.push((name.to_string(), tensor));
        } else {
            self.tensors.push((name.to_string(), tensor));
            self.kinds.push(kind);
        }
    }
}

pub fn write_container<T: Scalar>(path: &Path, c: &Container<T>) -> Result<()> {
    let mut entries = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    let all = c
        .tensors
        .iter()
        .zip(&c.kinds)
        .map(|((n, t), k)| (n, *k, t))
        .chain(c.optimizer.iter().map(|(n, t)| (n, EntryKind::Optimizer, t)));
    for (name, kind, tensor) in all {
        entries.push(Entry {
            name: name.clone(),
            kind,
            shape: tensor.shape().to_vec(),
            offset: data.len() as u64,
            len: tensor.numel() as u64,
        });
        data.reserve(tensor.numel() * T::BYTES);
        for &v in tensor.data() {
            v.write_le(&mut data);
        }
    }
    let header = Header {
        version: FORMAT_VERSION,
        dtype: T::DTYPE.to_string(),
        step: c.step,
        config: c.config.clone(),
        entries,
    };
    let header = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut write = |bytes: &[u8]| f.write_all(bytes).map_err(|e| Error::io(path, e));
    write(MAGIC)?;
    write(&FORMAT_VERSION.to_le_bytes())?;
    write(&(header.len() as u64).to_le_bytes())?;
    write(&header)?;
    write(&data)?;
    f.flush().map_err(|e| Error::io(path, e))
}

fn decode<T: Scalar>(bytes: &[u8], dtype: &str) -> Result<Vec<T>> {
    Ok(match dtype {
        d if d == T::DTYPE => bytes.chunks_exact(T::BYTES).map(T::read_le).collect(),
        "f32" => bytes.chunks_exact(4).map(|b| T::from_f32(f32::read_le(b)).unwrap()).collect(),
        "f64" => bytes.chunks_exact(8).map(|b| T::from_f64(f64::read_le(b)).unwrap()).collect(),
        other => return Err(Error::Checkpoint(format!("unknown dtype `{other}`"))),
    })
}

pub fn read_container<T: Scalar>(path: &Path) -> Result<Container<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint container", path.display())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: FORMAT_VERSION });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("header extends past end of file".into()))?;
    let header: Header = serde_json::from_slice(&bytes[20..header_end])?;
    let data = &bytes[header_end..];
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::Checkpoint(format!("unknown dtype `{other}`"))),
    };
    let mut out = Container::new(header.step, header.config);
    for e in header.entries {
        let count: usize = e.shape.iter().product();
        if count as u64 != e.len {
            return Err(Error::Parameter {
                name: e.name,
                reason: format!("shape {:?} declares {count} elements but entry holds {}", e.shape, e.len),
            });
        }
        let start = e.offset as usize;
        let end = start + count * width;
        if end > data.len() {
            return Err(Error::Parameter {
                name: e.name,
                reason: format!("tensor data truncated ({} of {} bytes present)", data.len().saturating_sub(start), count * width),
            });
        }
        let values = decode::<T>(&data[start..end], &header.dtype)?;
        out.push(&e.name, e.kind, Tensor::from_vec(&e.shape, values));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let mut c = Container::<f32>::new(7, serde_json::json!({"seed": 3}));
        c.push("a.weight", EntryKind::Param, Tensor::from_vec(&[2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25]));
        c.push("a.running_mean", EntryKind::Buffer, Tensor::zeros(&[3]));
        c.push("a.weight", EntryKind::Optimizer, Tensor::ones(&[2, 2]));
        write_container(&path, &c).unwrap();
        let back = read_container::<f32>(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.tensors[0].1.data()[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn version_mismatch_is_hard_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        write_container(&path, &Container::<f64>::new(0, serde_json::Value::Null)).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8] = 99;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_container::<f64>(&path), Err(Error::CheckpointVersion { found: 99, .. })));
    }

    #[test]
    fn truncated_tensor_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let mut c = Container::<f32>::new(0, serde_json::Value::Null);
        c.push("first", EntryKind::Param, Tensor::ones(&[4]));
        c.push("second", EntryKind::Param, Tensor::ones(&[4]));
        write_container(&path, &c).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = read_container::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("second"), "{err}");
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(read_container::<f32>(Path::new("/no/such/file")), Err(Error::Io { .. })));
    }
}
