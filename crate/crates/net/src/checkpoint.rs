//! Model checkpoints: a self-describing archive of config + named tensors.
//!
//! Layout: 8-byte magic, u32 JSON header length, the JSON header (format
//! version, network config, tensor directory), then raw little-endian f64
//! blocks in directory order. Extractor parameters come first in visitation
//! order, then `predictor.weights` and `predictor.bias`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NetError, Result};
use crate::predictor::Predictor;
use crate::resnet::{Extractor, NetworkConfig};

const MAGIC: &[u8; 8] = b"CDISNET1";
pub const FORMAT_VERSION: &str = "cdis-net-v1";

#[derive(Debug, Serialize, Deserialize)]
struct HeaderJson {
    format: String,
    network: NetworkConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

/// Saves the extractor + predictor pair.
pub fn save_model(path: impl AsRef<Path>, extractor: &Extractor, predictor: &Predictor) -> Result<()> {
    let path = path.as_ref();
    let mut tensors = Vec::new();
    let mut blocks: Vec<&[f64]> = Vec::new();
    extractor.visit_params(&mut |name, slice| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            len: slice.len(),
        });
        blocks.push(slice);
    });
    tensors.push(TensorEntry {
        name: "predictor.weights".into(),
        len: predictor.weights.len(),
    });
    blocks.push(&predictor.weights);
    tensors.push(TensorEntry {
        name: "predictor.bias".into(),
        len: 1,
    });
    let bias = std::slice::from_ref(&predictor.bias);
    blocks.push(bias);

    let header = HeaderJson {
        format: FORMAT_VERSION.into(),
        network: extractor.config().clone(),
        tensors,
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| NetError::Checkpoint(e.to_string()))?;

    let file = File::create(path).map_err(|e| NetError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(|e| NetError::io(path, e))?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())
        .map_err(|e| NetError::io(path, e))?;
    w.write_all(&header_bytes).map_err(|e| NetError::io(path, e))?;
    for block in blocks {
        let mut buf = Vec::with_capacity(block.len() * 8);
        for v in block {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(|e| NetError::io(path, e))?;
    }
    w.flush().map_err(|e| NetError::io(path, e))
}

/// Loads a model saved by [`save_model`].
pub fn load_model(path: impl AsRef<Path>) -> Result<(Extractor, Predictor)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| NetError::io(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| NetError::io(path, e))?;
    if &magic != MAGIC {
        return Err(NetError::Checkpoint(format!(
            "{}: not a model checkpoint",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes).map_err(|e| NetError::io(path, e))?;
    let mut header_bytes = vec![0u8; u32::from_le_bytes(len_bytes) as usize];
    r.read_exact(&mut header_bytes).map_err(|e| NetError::io(path, e))?;
    let header: HeaderJson =
        serde_json::from_slice(&header_bytes).map_err(|e| NetError::Checkpoint(e.to_string()))?;
    if header.format != FORMAT_VERSION {
        return Err(NetError::Checkpoint(format!(
            "unsupported checkpoint format {:?}",
            header.format
        )));
    }

    let mut extractor = Extractor::new(header.network.clone())?;
    let feature_dim = header.network.feature_dim;
    let mut predictor = Predictor {
        weights: vec![0.0; feature_dim],
        bias: 0.0,
    };

    let mut entry_idx = 0;
    let mut read_err: Option<NetError> = None;
    let mut read_block = |r: &mut BufReader<File>, name: &str, slot: &mut [f64]| {
        if read_err.is_some() {
            return;
        }
        let entry = match header.tensors.get(entry_idx) {
            Some(e) => e,
            None => {
                read_err = Some(NetError::Checkpoint(format!(
                    "missing tensor entry for {name}"
                )));
                return;
            }
        };
        if entry.name != name || entry.len != slot.len() {
            read_err = Some(NetError::Checkpoint(format!(
                "tensor mismatch: expected {name}[{}], found {}[{}]",
                slot.len(),
                entry.name,
                entry.len
            )));
            return;
        }
        entry_idx += 1;
        let mut buf = vec![0u8; slot.len() * 8];
        if let Err(e) = r.read_exact(&mut buf) {
            read_err = Some(NetError::io(path, e));
            return;
        }
        for (v, chunk) in slot.iter_mut().zip(buf.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    };

    extractor.visit_params_mut(&mut |name, slot| read_block(&mut r, name, slot));
    read_block(&mut r, "predictor.weights", &mut predictor.weights);
    let mut bias = [0.0f64];
    read_block(&mut r, "predictor.bias", &mut bias);
    predictor.bias = bias[0];

    if let Some(e) = read_err {
        return Err(e);
    }
    Ok((extractor, predictor))
}

/// A stable digest of every parameter byte, in visitation order.
pub fn model_checksum(extractor: &Extractor, predictor: &Predictor) -> String {
    let mut hasher = Sha256::new();
    extractor.visit_params(&mut |_, slice| {
        for v in slice {
            hasher.update(v.to_le_bytes());
        }
    });
    for v in &predictor.weights {
        hasher.update(v.to_le_bytes());
    }
    hasher.update(predictor.bias.to_le_bytes());
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}
