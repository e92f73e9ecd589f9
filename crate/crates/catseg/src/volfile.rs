//! On-disk volume container.
//!
//! Layout: magic `CATV` | version u16 LE | dtype u8 (0 = f32, 1 = u8) |
//! ndim u8 | dims u32 LE each | payload, row-major little-endian.
//! Image volumes are 4D f32, label masks 3D u8. Decoders validate before
//! allocating and never return partial values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{LabelVolume, Tensor};

pub const MAGIC: &[u8; 4] = b"CATV";
pub const VERSION: u16 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;
const MAX_NDIM: usize = 8;

struct Header {
    dtype: u8,
    dims: Vec<usize>,
    payload_start: usize,
    numel: usize,
}

fn parse_header(bytes: &[u8], want_dtype: u8, want_ndim: usize) -> Result<Header> {
    if bytes.len() < 4 {
        return Err(Error::format(0, "truncated magic"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(0, "bad magic"));
    }
    if bytes.len() < 8 {
        return Err(Error::format(4, "truncated header"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let dtype = bytes[6];
    if dtype != want_dtype {
        return Err(Error::format(6, format!("unexpected dtype {dtype}")));
    }
    let ndim = bytes[7] as usize;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(Error::format(7, format!("invalid ndim {ndim}")));
    }
    if ndim != want_ndim {
        return Err(Error::format(7, format!("expected {want_ndim} dims, got {ndim}")));
    }
    let dims_end = 8 + 4 * ndim;
    if bytes.len() < dims_end {
        return Err(Error::format(bytes.len(), "truncated dimension list"));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut numel = 1usize;
    for i in 0..ndim {
        let off = 8 + 4 * i;
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        if d == 0 {
            return Err(Error::format(off, "zero dimension"));
        }
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| Error::format(off, "dimension product overflow"))?;
        dims.push(d);
    }
    let elem = if dtype == DTYPE_F32 { 4 } else { 1 };
    let expected = numel
        .checked_mul(elem)
        .ok_or_else(|| Error::format(8, "payload size overflow"))?;
    let actual = bytes.len() - dims_end;
    if actual != expected {
        return Err(Error::format(
            dims_end,
            format!("payload holds {actual} bytes but dims require {expected}"),
        ));
    }
    Ok(Header {
        dtype,
        dims,
        payload_start: dims_end,
        numel,
    })
}

fn write_header(out: &mut Vec<u8>, dtype: u8, dims: &[usize]) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

/// Serializes a 4D f32 image volume.
pub fn encode_image(t: &Tensor<f32>) -> Vec<u8> {
    assert_eq!(t.shape().len(), 4, "image volumes are 4D");
    let mut out = Vec::with_capacity(8 + 4 * t.shape().len() + 4 * t.numel());
    write_header(&mut out, DTYPE_F32, t.shape());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_image(bytes: &[u8]) -> Result<Tensor<f32>> {
    let header = parse_header(bytes, DTYPE_F32, 4)?;
    debug_assert_eq!(header.dtype, DTYPE_F32);
    let mut data = Vec::with_capacity(header.numel);
    for i in 0..header.numel {
        let off = header.payload_start + 4 * i;
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::format(off, "non-finite voxel value"));
        }
        data.push(v);
    }
    Tensor::from_vec(&header.dims, data)
}

/// Serializes a 3D u8 label mask.
pub fn encode_labels(labels: &LabelVolume) -> Vec<u8> {
    let dims = labels.shape();
    let mut out = Vec::with_capacity(8 + 12 + labels.data().len());
    write_header(&mut out, DTYPE_U8, &dims);
    out.extend_from_slice(labels.data());
    out
}

pub fn decode_labels(bytes: &[u8]) -> Result<LabelVolume> {
    let header = parse_header(bytes, DTYPE_U8, 3)?;
    let payload = &bytes[header.payload_start..];
    if let Some(pos) = payload.iter().position(|&v| v >= 3) {
        return Err(Error::format(
            header.payload_start + pos,
            format!("label {} out of range", payload[pos]),
        ));
    }
    LabelVolume::new(
        [header.dims[0], header.dims[1], header.dims[2]],
        payload.to_vec(),
    )
}

pub fn save_image(path: &Path, t: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_image(t)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_image(&bytes)
}

pub fn save_labels(path: &Path, labels: &LabelVolume) -> Result<()> {
    fs::write(path, encode_labels(labels)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_labels(path: &Path) -> Result<LabelVolume> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_labels(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_image() -> Tensor<f32> {
        Tensor::from_vec(&[2, 2, 3, 1], (0..12).map(|v| v as f32 * 0.25).collect()).unwrap()
    }

    #[test]
    fn image_round_trip_is_bit_exact() {
        let t = sample_image();
        let bytes = encode_image(&t);
        let back = decode_image(&bytes).unwrap();
        assert!(t == back);
        assert_eq!(encode_image(&back), bytes);
    }

    #[test]
    fn label_round_trip() {
        let labels = LabelVolume::new([2, 2, 2], vec![0, 1, 2, 0, 1, 2, 0, 0]).unwrap();
        let back = decode_labels(&encode_labels(&labels)).unwrap();
        assert_eq!(labels, back);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = encode_image(&sample_image());
        bytes[0] = b'X';
        match decode_image(&bytes) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("expected format error at offset 0, got {other:?}"),
        }
    }

    #[test]
    fn dims_payload_mismatch_is_rejected() {
        let mut bytes = encode_image(&sample_image());
        // enlarge the first dimension without adding payload
        bytes[8] = 3;
        assert!(matches!(decode_image(&bytes), Err(Error::Format { .. })));

        let mut truncated = encode_image(&sample_image());
        truncated.truncate(truncated.len() - 1);
        assert!(matches!(decode_image(&truncated), Err(Error::Format { .. })));
    }

    #[test]
    fn dim_overflow_is_rejected() {
        let mut bytes = Vec::new();
        write_header(&mut bytes, DTYPE_F32, &[usize::MAX / 2, 8, 8, 8].map(|v| v as u32 as usize));
        assert!(matches!(decode_image(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn out_of_range_label_is_rejected_with_offset() {
        let labels = LabelVolume::new([1, 1, 4], vec![0, 1, 2, 0]).unwrap();
        let mut bytes = encode_labels(&labels);
        let payload_start = bytes.len() - 4;
        bytes[payload_start + 2] = 7;
        match decode_labels(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, payload_start + 2),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
