//! GCMV movie files.
//!
//! Layout: magic `GCMV`, version `u32`, dims `T, H, W, C` as `u32`, a dtype
//! code `u8` (0 = u8, 1 = f32, 2 = f64), then the row-major little-endian
//! payload. Masks are stored as `T = 1, C = 1` u8 files.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Frames, Mask, MaskSource};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const GCMV_MAGIC: &[u8; 4] = b"GCMV";
pub const GCMV_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 16 + 1;

fn header(shape: [usize; 4], dtype: DType) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(GCMV_MAGIC);
    out.extend_from_slice(&GCMV_VERSION.to_le_bytes());
    for d in shape {
        let d = u32::try_from(d).map_err(|_| shape_err!("dimension {d} exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(dtype.code());
    Ok(out)
}

fn parse_header(bytes: &[u8]) -> Result<([usize; 4], DType, &[u8])> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("file of {} bytes is shorter than a GCMV header", bytes.len())));
    }
    if &bytes[..4] != GCMV_MAGIC {
        return Err(Error::Format("missing GCMV magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != GCMV_VERSION {
        return Err(Error::Format(format!("unsupported GCMV version {version}")));
    }
    let shape = [u32_at(8), u32_at(12), u32_at(16), u32_at(20)].map(|d| d as usize);
    let dtype = DType::from_code(bytes[24])
        .ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[24])))?;
    let payload = &bytes[HEADER_LEN..];
    let expected = shape.iter().product::<usize>() * dtype.size();
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload has {} bytes, header {:?} {} needs {expected}",
            payload.len(),
            shape,
            dtype.name()
        )));
    }
    Ok((shape, dtype, payload))
}

pub fn encode_frames(frames: &Frames) -> Result<Vec<u8>> {
    let mut out = header(frames.shape(), DType::U8)?;
    out.extend_from_slice(frames.data());
    Ok(out)
}

pub fn decode_frames(bytes: &[u8]) -> Result<Frames> {
    let (shape, dtype, payload) = parse_header(bytes)?;
    if dtype != DType::U8 {
        return Err(Error::Format(format!("expected u8 frames, file holds {}", dtype.name())));
    }
    Frames::new(payload.to_vec(), shape)
}

pub fn encode_tensor<E: Element>(t: &Tensor<E>) -> Result<Vec<u8>> {
    let shape: [usize; 4] = t
        .shape()
        .try_into()
        .map_err(|_| shape_err!("GCMV stores rank-4 tensors, got {:?}", t.shape()))?;
    let mut out = header(shape, E::DTYPE)?;
    for &x in t.data() {
        x.write_le(&mut out);
    }
    Ok(out)
}

/// Reads any float GCMV payload; u8 payloads are normalized to [0, 1].
pub fn decode_tensor<E: Element>(bytes: &[u8]) -> Result<Tensor<E>> {
    let (shape, dtype, payload) = parse_header(bytes)?;
    match dtype {
        DType::U8 => Ok(Frames::new(payload.to_vec(), shape)?.normalize()),
        DType::F32 => {
            let v: Vec<E> = payload.chunks_exact(4).map(|c| E::from_f64_lossy(f32::read_le(c) as f64)).collect();
            Tensor::from_vec(v, &shape)
        }
        DType::F64 => {
            let v: Vec<E> = payload.chunks_exact(8).map(|c| E::from_f64_lossy(f64::read_le(c))).collect();
            Tensor::from_vec(v, &shape)
        }
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

pub fn write_gcmv(path: impl AsRef<Path>, frames: &Frames) -> Result<()> {
    write_bytes(path.as_ref(), &encode_frames(frames)?)
}

pub fn read_gcmv(path: impl AsRef<Path>) -> Result<Frames> {
    decode_frames(&fs::read(path)?)
}

pub fn write_mask(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    let frames = Frames::new(mask.data.clone(), [1, mask.height, mask.width, 1])?;
    write_gcmv(path, &frames)
}

pub fn read_mask(path: impl AsRef<Path>, source: MaskSource) -> Result<Mask> {
    let f = read_gcmv(path)?;
    let [t, h, w, c] = f.shape();
    if t != 1 || c != 1 {
        return Err(Error::Format(format!("mask file must be (1, H, W, 1), got {:?}", f.shape())));
    }
    if f.data().iter().any(|&b| b > 1) {
        return Err(Error::Format("mask file holds values other than 0 and 1".into()));
    }
    Ok(Mask {
        height: h,
        width: w,
        data: f.data().to_vec(),
        source,
    })
}

/// Concatenates headerless byte chunks, each a whole number of
/// `(H, W, C)` frames, along time.
pub fn import_raw(chunks: &[Vec<u8>], height: usize, width: usize, channels: usize) -> Result<Frames> {
    let frame = height * width * channels;
    if frame == 0 {
        return Err(Error::Config("import needs positive H, W and C".into()));
    }
    let mut data = Vec::new();
    for (k, chunk) in chunks.iter().enumerate() {
        if chunk.len() % frame != 0 {
            return Err(Error::Format(format!(
                "chunk {k} has {} bytes, not a multiple of the {frame}-byte frame",
                chunk.len()
            )));
        }
        data.extend_from_slice(chunk);
    }
    let t = data.len() / frame;
    Frames::new(data, [t, height, width, channels])
}
