//! Checkpoint container.
//!
//! Layout: magic `CATC` | version u16 LE | header length u64 LE | JSON header
//! | raw little-endian tensor payloads. The header names every tensor with
//! its shape and byte offset into the payload; parameters are stored under
//! their hierarchical names and optimizer moments under `adam.m.*` /
//! `adam.v.*`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Precision, TrainConfig};
use crate::error::{Error, Result};
use crate::net::SegNet;
use crate::optim::AdamState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CATC";
pub const VERSION: u16 = 1;

/// Trainer state frozen at an epoch boundary.
pub struct Checkpoint<T: Scalar> {
    pub config: TrainConfig,
    pub epoch: usize,
    pub best_val_dice: f64,
    pub net: SegNet<T>,
    pub adam: AdamState<T>,
}

/// Checkpoint with the precision resolved at load time.
pub enum LoadedCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl LoadedCheckpoint {
    pub fn config(&self) -> &TrainConfig {
        match self {
            LoadedCheckpoint::F32(c) => &c.config,
            LoadedCheckpoint::F64(c) => &c.config,
        }
    }

    pub fn epoch(&self) -> usize {
        match self {
            LoadedCheckpoint::F32(c) => c.epoch,
            LoadedCheckpoint::F64(c) => c.epoch,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    epoch: usize,
    adam_step: u64,
    best_val_dice: f64,
    /// Seed the per-epoch data order derives from; with `epoch` this is the
    /// complete RNG state needed to resume bit-identically.
    rng_seed: u64,
    config: TrainConfig,
    tensors: Vec<TensorEntry>,
}

fn push_tensor<T: Scalar>(
    entries: &mut Vec<TensorEntry>,
    payload: &mut Vec<u8>,
    name: &str,
    shape: &[usize],
    data: &[T],
) {
    let offset = payload.len();
    for v in data {
        if std::mem::size_of::<T>() == 4 {
            payload.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        } else {
            payload.extend_from_slice(&v.to_f64().to_le_bytes());
        }
    }
    entries.push(TensorEntry {
        name: name.to_string(),
        shape: shape.to_vec(),
        offset,
        len: data.len(),
    });
}

pub fn encode_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();

    let mut names = Vec::new();
    ckpt.net.for_each_param(&mut |name, t| {
        push_tensor(&mut entries, &mut payload, name, t.shape(), t.data());
        names.push(name.to_string());
    });
    if names.len() != ckpt.adam.m.len() {
        return Err(Error::usage(format!(
            "adam state tracks {} tensors but the network has {}",
            ckpt.adam.m.len(),
            names.len()
        )));
    }
    for (name, m) in names.iter().zip(&ckpt.adam.m) {
        push_tensor(&mut entries, &mut payload, &format!("adam.m.{name}"), &[m.len()], m);
    }
    for (name, v) in names.iter().zip(&ckpt.adam.v) {
        push_tensor(&mut entries, &mut payload, &format!("adam.v.{name}"), &[v.len()], v);
    }

    let header = Header {
        dtype: T::DTYPE_NAME.to_string(),
        epoch: ckpt.epoch,
        adam_step: ckpt.adam.step,
        best_val_dice: ckpt.best_val_dice,
        rng_seed: ckpt.config.seed,
        config: ckpt.config.clone(),
        tensors: entries,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::json("checkpoint header", e))?;

    let mut out = Vec::with_capacity(14 + header_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn read_tensor_data<T: Scalar>(payload: &[u8], entry: &TensorEntry, elem: usize) -> Result<Vec<T>> {
    let byte_len = entry
        .len
        .checked_mul(elem)
        .ok_or_else(|| Error::format(entry.offset, "tensor length overflow"))?;
    let end = entry
        .offset
        .checked_add(byte_len)
        .ok_or_else(|| Error::format(entry.offset, "tensor extent overflow"))?;
    if end > payload.len() {
        return Err(Error::format(
            entry.offset,
            format!("tensor '{}' exceeds payload", entry.name),
        ));
    }
    let bytes = &payload[entry.offset..end];
    let mut data = Vec::with_capacity(entry.len);
    if elem == 4 {
        for chunk in bytes.chunks_exact(4) {
            data.push(T::from_f64(f32::from_le_bytes(chunk.try_into().unwrap()) as f64));
        }
    } else {
        for chunk in bytes.chunks_exact(8) {
            data.push(T::from_f64(f64::from_le_bytes(chunk.try_into().unwrap())));
        }
    }
    Ok(data)
}

fn decode_typed<T: Scalar>(header: Header, payload: &[u8]) -> Result<Checkpoint<T>> {
    header.config.validate()?;
    let elem = std::mem::size_of::<T>();

    // rebuild the network skeleton, then overwrite every parameter by name
    let mut rng = ChaCha8Rng::seed_from_u64(header.config.seed);
    let mut net = SegNet::<T>::init(header.config.network.clone(), &mut rng)?;

    let find = |name: &str| -> Result<&TensorEntry> {
        header
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::data(format!("checkpoint is missing tensor '{name}'")))
    };

    let mut names = Vec::new();
    let mut load_err = None;
    net.for_each_param_mut(&mut |name, t| {
        if load_err.is_some() {
            return;
        }
        match find(name).and_then(|e| {
            if e.shape != t.shape() {
                return Err(Error::data(format!(
                    "tensor '{name}' has shape {:?} in checkpoint, expected {:?}",
                    e.shape,
                    t.shape()
                )));
            }
            read_tensor_data::<T>(payload, e, elem)
        }) {
            Ok(data) => {
                let rebuilt = Tensor::from_vec(t.shape(), data)
                    .expect("validated shape")
                    .with_requires_grad();
                *t = rebuilt;
                names.push(name.to_string());
            }
            Err(e) => load_err = Some(e),
        }
    });
    if let Some(e) = load_err {
        return Err(e);
    }

    let mut adam = AdamState::<T>::new(
        &names
            .iter()
            .map(|n| find(&format!("adam.m.{n}")).map(|e| e.len))
            .collect::<Result<Vec<_>>>()?,
    );
    adam.step = header.adam_step;
    for (i, name) in names.iter().enumerate() {
        adam.m[i] = read_tensor_data(payload, find(&format!("adam.m.{name}"))?, elem)?;
        adam.v[i] = read_tensor_data(payload, find(&format!("adam.v.{name}"))?, elem)?;
    }

    Ok(Checkpoint {
        config: header.config,
        epoch: header.epoch,
        best_val_dice: header.best_val_dice,
        net,
        adam,
    })
}

fn split_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 4 {
        return Err(Error::format(0, "truncated magic"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(0, "bad magic"));
    }
    if bytes.len() < 14 {
        return Err(Error::format(4, "truncated header"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
    let header_end = 14usize
        .checked_add(header_len)
        .ok_or_else(|| Error::format(6, "header length overflow"))?;
    if header_end > bytes.len() {
        return Err(Error::format(6, "header exceeds file size"));
    }
    let header: Header = serde_json::from_slice(&bytes[14..header_end])
        .map_err(|e| Error::json("checkpoint header", e))?;
    Ok((header, &bytes[header_end..]))
}

/// Validates the container structure without materializing the network:
/// magic, version, header JSON, configuration ranges, and that every tensor
/// entry lies inside the payload. Returns the declared dtype.
pub fn validate_checkpoint_bytes(bytes: &[u8]) -> Result<String> {
    let (header, payload) = split_header(bytes)?;
    header.config.validate()?;
    let elem = match header.dtype.as_str() {
        "f32" => 4usize,
        "f64" => 8,
        other => return Err(Error::data(format!("unknown checkpoint dtype '{other}'"))),
    };
    for entry in &header.tensors {
        let declared: usize = entry
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(entry.offset, "shape product overflow"))?;
        if declared != entry.len {
            return Err(Error::data(format!(
                "tensor '{}' declares shape {:?} but length {}",
                entry.name, entry.shape, entry.len
            )));
        }
        let end = entry
            .len
            .checked_mul(elem)
            .and_then(|b| entry.offset.checked_add(b))
            .ok_or_else(|| Error::format(entry.offset, "tensor extent overflow"))?;
        if end > payload.len() {
            return Err(Error::format(
                entry.offset,
                format!("tensor '{}' exceeds payload", entry.name),
            ));
        }
    }
    Ok(header.dtype)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<LoadedCheckpoint> {
    validate_checkpoint_bytes(bytes)?;
    let (header, payload) = split_header(bytes)?;
    match header.dtype.as_str() {
        "f32" => Ok(LoadedCheckpoint::F32(decode_typed(header, payload)?)),
        "f64" => Ok(LoadedCheckpoint::F64(decode_typed(header, payload)?)),
        other => Err(Error::data(format!("unknown checkpoint dtype '{other}'"))),
    }
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)?)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_checkpoint(&bytes)
}

/// Checks that the checkpoint's precision field matches its payload type.
pub fn expect_precision(loaded: &LoadedCheckpoint) -> Precision {
    match loaded {
        LoadedCheckpoint::F32(_) => Precision::F32,
        LoadedCheckpoint::F64(_) => Precision::F64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetworkConfig;

    fn small_checkpoint() -> Checkpoint<f32> {
        let config = TrainConfig {
            network: NetworkConfig {
                scales: 1,
                filters: vec![3, 4],
                slices: 2,
                pool_k: 1,
                transformer_blocks: 1,
                heads: 1,
                cat_layers: [1].into_iter().collect(),
                ..NetworkConfig::default()
            },
            epochs: 2,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = SegNet::<f32>::init(config.network.clone(), &mut rng).unwrap();
        let mut sizes = Vec::new();
        net.for_each_param(&mut |_, t| sizes.push(t.numel()));
        let mut adam = AdamState::new(&sizes);
        adam.step = 17;
        adam.m[0][0] = 0.25;
        Checkpoint {
            config,
            epoch: 2,
            best_val_dice: 0.5,
            net,
            adam,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = small_checkpoint();
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let loaded = match decode_checkpoint(&bytes).unwrap() {
            LoadedCheckpoint::F32(c) => c,
            _ => panic!("expected f32"),
        };
        assert_eq!(loaded.epoch, 2);
        assert_eq!(loaded.adam.step, 17);
        assert_eq!(loaded.adam.m[0][0], 0.25);
        let again = encode_checkpoint(&loaded).unwrap();
        assert_eq!(bytes, again, "checkpoint round trip must be byte-identical");

        let mut params_a = Vec::new();
        ckpt.net.for_each_param(&mut |_, t| params_a.push(t.clone()));
        let mut params_b = Vec::new();
        loaded.net.for_each_param(&mut |_, t| params_b.push(t.clone()));
        for (a, b) in params_a.iter().zip(&params_b) {
            assert!(a == b);
        }
    }

    #[test]
    fn corrupted_inputs_are_rejected() {
        let bytes = encode_checkpoint(&small_checkpoint()).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'Z';
        assert!(decode_checkpoint(&bad_magic).is_err());

        let mut bad_len = bytes.clone();
        bad_len[6..14].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode_checkpoint(&bad_len).is_err());

        let truncated = &bytes[..bytes.len() - 3];
        assert!(decode_checkpoint(truncated).is_err());
    }
}
