//! Checkpoint file: magic `NPCK`, u32 version, u64 header length, a JSON
//! header (architecture, tensor manifest, metadata) and the little-endian
//! `f32` payload of every tensor in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::synthdata::{read_array, read_u32};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub arch: ModelSpec,
    pub tensors: Vec<TensorEntry>,
    pub metadata: serde_json::Value,
}

pub(crate) fn framed(magic: &[u8; 4], version: u32, header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(payload);
    out
}

/// Splits a framed file into `(header bytes, payload bytes)`.
pub(crate) fn unframe<'a>(
    bytes: &'a [u8],
    magic: &[u8; 4],
    version: u32,
    what: &'static str,
) -> Result<(&'a [u8], &'a [u8])> {
    let mut r = bytes;
    let m: [u8; 4] = read_array(&mut r)?;
    if &m != magic {
        return Err(Error::Format {
            what,
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&m).into_owned(),
        });
    }
    let v = read_u32(&mut r)?;
    if v != version {
        return Err(Error::Format {
            what,
            expected: format!("version {version}"),
            found: format!("version {v}"),
        });
    }
    let hlen = u64::from_le_bytes(read_array(&mut r)?) as usize;
    if r.len() < hlen {
        return Err(Error::Format {
            what,
            expected: format!("{hlen} header bytes"),
            found: format!("{} bytes", r.len()),
        });
    }
    Ok(r.split_at(hlen))
}

pub fn checkpoint_bytes(model: &Model<f32>, metadata: serde_json::Value) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (name, t) in model.params() {
        tensors.push(TensorEntry {
            name,
            shape: t.shape.clone(),
            offset: payload.len() as u64,
            nbytes: 4 * t.len() as u64,
        });
        for v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        arch: model.spec.clone(),
        tensors,
        metadata,
    };
    Ok(framed(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &serde_json::to_vec(&header)?, &payload))
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>, metadata: serde_json::Value) -> Result<()> {
    fs::write(path, checkpoint_bytes(model, metadata)?)?;
    Ok(())
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(Model<f32>, CheckpointHeader)> {
    let (hbytes, payload) = unframe(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")?;
    let header: CheckpointHeader = serde_json::from_slice(hbytes)?;
    let mut model = Model::zeros(header.arch.clone())?;
    let expected: Vec<(String, Vec<usize>)> =
        model.params().into_iter().map(|(n, t)| (n, t.shape.clone())).collect();
    if expected.len() != header.tensors.len() {
        return Err(Error::Format {
            what: "checkpoint tensor count",
            expected: expected.len().to_string(),
            found: header.tensors.len().to_string(),
        });
    }
    let mut end = 0u64;
    for ((name, shape), entry) in expected.iter().zip(&header.tensors) {
        if *name != entry.name || *shape != entry.shape {
            return Err(Error::Format {
                what: "checkpoint tensor",
                expected: format!("{name} {shape:?}"),
                found: format!("{} {:?}", entry.name, entry.shape),
            });
        }
        let n: usize = shape.iter().product();
        let (lo, hi) = (entry.offset as usize, (entry.offset + entry.nbytes) as usize);
        if entry.nbytes as usize != 4 * n || hi > payload.len() {
            return Err(Error::Format {
                what: "checkpoint payload",
                expected: format!("{} bytes for {name}", 4 * n),
                found: format!("{} bytes at offset {}", entry.nbytes, entry.offset),
            });
        }
        let t = model.param_tensor_mut(name).expect("name produced by params()");
        for (dst, c) in t.data.iter_mut().zip(payload[lo..hi].chunks_exact(4)) {
            *dst = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
        end = end.max(entry.offset + entry.nbytes);
    }
    if end as usize != payload.len() {
        return Err(Error::Format {
            what: "checkpoint payload length",
            expected: end.to_string(),
            found: payload.len().to_string(),
        });
    }
    Ok((model, header))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, CheckpointHeader)> {
    parse_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{porenet_s, Tensor};

    #[test]
    fn roundtrip_bit_exact() {
        let m = Model::<f32>::new(porenet_s(7, 16, 16), 11).unwrap();
        let bytes = checkpoint_bytes(&m, serde_json::json!({"epochs": 3})).unwrap();
        let (back, header) = parse_checkpoint(&bytes).unwrap();
        assert_eq!(header.metadata["epochs"], 3);
        let x = Tensor::new(vec![2, 1, 16, 16], (0..512).map(|i| (i as f32).sin()).collect()).unwrap();
        let (a, b) = (m.forward(&x).unwrap(), back.forward(&x).unwrap());
        assert!(a.data.iter().zip(&b.data).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert_eq!(checkpoint_bytes(&back, header.metadata).unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_rejected() {
        let m = Model::<f32>::new(porenet_s(3, 8, 8), 1).unwrap();
        let bytes = checkpoint_bytes(&m, serde_json::Value::Null).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(parse_checkpoint(&bad), Err(Error::Format { .. })));
        assert!(parse_checkpoint(&bytes[..bytes.len() - 4]).is_err());
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(parse_checkpoint(&v2).is_err());
    }
}
