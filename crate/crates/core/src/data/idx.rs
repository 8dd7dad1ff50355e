//! IDX containers: a big-endian magic `00 00 type rank`, `rank` big-endian
//! u32 extents, then the raw values. Images are rank 3 (`N, H, W`) or rank 4
//! (`N, H, W, C`) of unsigned bytes (type 0x08, scaled by 1/255) or
//! big-endian f32 (type 0x0D, stored as is). Labels are rank 1 bytes.

use std::fs;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder};

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::write_atomic;
use crate::tensor::Tensor;

const TYPE_U8: u8 = 0x08;
const TYPE_F32: u8 = 0x0D;

struct Header {
    kind: u8,
    dims: Vec<usize>,
    body: usize,
}

fn header(bytes: &[u8], what: &str) -> Result<Header> {
    if bytes.len() < 4 {
        return Err(Error::parse(bytes.len() as u64, format!("{what}: truncated magic")));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::parse(0, format!("{what}: bad magic {:02x}{:02x}{:02x}{:02x}", bytes[0], bytes[1], bytes[2], bytes[3])));
    }
    let kind = bytes[2];
    if kind != TYPE_U8 && kind != TYPE_F32 {
        return Err(Error::parse(2, format!("{what}: unsupported element type 0x{kind:02x}")));
    }
    let rank = bytes[3] as usize;
    let body = 4 + 4 * rank;
    if bytes.len() < body {
        return Err(Error::parse(bytes.len() as u64, format!("{what}: truncated header ({rank} extents)")));
    }
    let dims = (0..rank).map(|i| BigEndian::read_u32(&bytes[4 + 4 * i..]) as usize).collect();
    Ok(Header { kind, dims, body })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, what: &str) -> Result<&'a [u8]> {
    let width = if h.kind == TYPE_U8 { 1 } else { 4 };
    let need = h
        .dims
        .iter()
        .try_fold(width, |a: usize, &d| a.checked_mul(d))
        .ok_or_else(|| Error::parse(4, format!("{what}: extents {:?} overflow", h.dims)))?;
    let have = bytes.len() - h.body;
    if have < need {
        return Err(Error::parse(bytes.len() as u64, format!("{what}: truncated, extents {:?} need {need} bytes, {have} present", h.dims)));
    }
    if have > need {
        return Err(Error::parse((h.body + need) as u64, format!("{what}: {} trailing bytes", have - need)));
    }
    Ok(&bytes[h.body..])
}

/// Parses an image file into `[N, H, W, C]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor<f32>> {
    let h = header(bytes, "images")?;
    let shape = match h.dims[..] {
        [n, r, c] => vec![n, r, c, 1],
        [n, r, c, ch] => vec![n, r, c, ch],
        _ => return Err(Error::parse(3, format!("images: rank {} (expected 3 or 4)", h.dims.len()))),
    };
    let body = payload(bytes, &h, "images")?;
    let data = match h.kind {
        TYPE_U8 => body.iter().map(|&b| b as f32 / 255.0).collect(),
        _ => body.chunks_exact(4).map(BigEndian::read_f32).collect(),
    };
    Tensor::new(shape, data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let h = header(bytes, "labels")?;
    if h.kind != TYPE_U8 || h.dims.len() != 1 {
        return Err(Error::parse(2, format!("labels: expected magic 00000801, found type 0x{:02x} rank {}", h.kind, h.dims.len())));
    }
    Ok(payload(bytes, &h, "labels")?.iter().map(|&b| b as usize).collect())
}

/// Reads an image file and, when given, its label file.
pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<Dataset> {
    let read = |p: &Path| fs::read(p).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display()))));
    let imgs = parse_idx_images(&read(images)?)?;
    let labels = match labels {
        Some(p) => {
            let l = parse_idx_labels(&read(p)?)?;
            if l.len() != imgs.shape()[0] {
                return Err(Error::parse(4, format!("{} labels for {} images", l.len(), imgs.shape()[0])));
            }
            Some(l)
        }
        None => None,
    };
    Dataset::new(imgs, labels, None, Split::Whole)
}

fn encode_header(kind: u8, shape: &[usize]) -> Result<Vec<u8>> {
    let dims: Vec<usize> = match shape {
        [n, h, w, 1] => vec![*n, *h, *w],
        [_, _, _, _] | [_] => shape.to_vec(),
        s => return Err(Error::dim(format!("cannot store shape {s:?} as IDX"))),
    };
    let mut out = vec![0, 0, kind, dims.len() as u8];
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::dim(format!("extent {d} does not fit IDX")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    Ok(out)
}

/// Byte images; every value must lie in `[0, 1]` and is rounded to the
/// nearest multiple of 1/255.
pub fn encode_idx_u8(images: &Tensor<f32>) -> Result<Vec<u8>> {
    let mut out = encode_header(TYPE_U8, images.shape())?;
    for &v in images.data() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Range(format!("pixel {v} outside [0, 1] cannot be stored as a byte")));
        }
        out.push((v * 255.0).round() as u8);
    }
    Ok(out)
}

/// Float images, stored exactly.
pub fn encode_idx_f32(images: &Tensor<f32>) -> Result<Vec<u8>> {
    let mut out = encode_header(TYPE_F32, images.shape())?;
    for &v in images.data() {
        out.extend_from_slice(&v.to_be_bytes());
    }
    Ok(out)
}

pub fn encode_idx_labels(labels: &[usize]) -> Result<Vec<u8>> {
    let mut out = encode_header(TYPE_U8, &[labels.len()])?;
    for &l in labels {
        out.push(u8::try_from(l).map_err(|_| Error::Range(format!("label {l} does not fit a byte")))?);
    }
    Ok(out)
}

pub fn write_idx_u8(path: &Path, images: &Tensor<f32>) -> Result<()> {
    write_atomic(path, &encode_idx_u8(images)?)
}

pub fn write_idx_f32(path: &Path, images: &Tensor<f32>) -> Result<()> {
    write_atomic(path, &encode_idx_f32(images)?)
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    write_atomic(path, &encode_idx_labels(labels)?)
}
