//! Per-item latent files.
//!
//! Nuisance sidecar: five little-endian f64 per item (slant, tilt, x, y,
//! depth), no header.
//!
//! Trace sidecar (sampler output), little-endian:
//!
//! ```text
//! "DRMMLAT1" | u32 batch | u32 layers
//! | per layer: u8 kind (0 none, 1 mask, 2 switches), u64 len, len bytes
//! | batch × u32 class
//! ```

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use super::LatentLabels;
use crate::error::{Error, Result};
use crate::model::{write_atomic, LatentTrace, LayerLatents};
use crate::tensor::{Real, Switch};

pub const LATENT_RECORD: usize = 5 * 8;
pub const TRACE_MAGIC: &[u8; 8] = b"DRMMLAT1";

pub fn encode_latents(latents: &[LatentLabels]) -> Vec<u8> {
    let mut out = Vec::with_capacity(latents.len() * LATENT_RECORD);
    for l in latents {
        for v in l.to_array() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_latents(bytes: &[u8]) -> Result<Vec<LatentLabels>> {
    if !bytes.len().is_multiple_of(LATENT_RECORD) {
        let whole = bytes.len() / LATENT_RECORD * LATENT_RECORD;
        return Err(Error::parse(whole as u64, format!("latent sidecar ends with a partial record of {} bytes", bytes.len() - whole)));
    }
    Ok(bytes
        .chunks_exact(LATENT_RECORD)
        .map(|r| {
            let mut v = [0.0; 5];
            LittleEndian::read_f64_into(r, &mut v);
            LatentLabels::from_array(v)
        })
        .collect())
}

pub fn write_latents(path: &Path, latents: &[LatentLabels]) -> Result<()> {
    write_atomic(path, &encode_latents(latents))
}

pub fn read_latents(path: &Path) -> Result<Vec<LatentLabels>> {
    decode_latents(&fs::read(path)?)
}

pub fn encode_trace<T: Real>(trace: &LatentTrace<T>) -> Vec<u8> {
    let mut out = TRACE_MAGIC.to_vec();
    out.extend_from_slice(&(trace.batch as u32).to_le_bytes());
    out.extend_from_slice(&(trace.layers.len() as u32).to_le_bytes());
    for lat in &trace.layers {
        let (kind, bytes): (u8, Vec<u8>) = match (&lat.mask, &lat.switches) {
            (Some(m), _) => (1, m.iter().map(|&b| b as u8).collect()),
            (None, Some(s)) => (2, s.iter().map(|s| s.index() as u8).collect()),
            (None, None) => (0, vec![]),
        };
        out.push(kind);
        out.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&bytes);
    }
    for &c in &trace.classes {
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    out
}

pub fn decode_trace<T: Real>(bytes: &[u8]) -> Result<LatentTrace<T>> {
    let mut pos = 0usize;
    let mut take = |n: usize, what: &str| -> Result<(usize, &[u8])> {
        if bytes.len() - pos < n {
            return Err(Error::parse(pos as u64, format!("truncated trace sidecar while reading {what}")));
        }
        pos += n;
        Ok((pos - n, &bytes[pos - n..pos]))
    };
    if take(8, "magic")?.1 != TRACE_MAGIC {
        return Err(Error::parse(0, "not a trace sidecar (bad magic)"));
    }
    let batch = LittleEndian::read_u32(take(4, "batch")?.1) as usize;
    let count = LittleEndian::read_u32(take(4, "layer count")?.1) as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let (at, kind) = take(1, "layer kind")?;
        let kind = kind[0];
        let len = LittleEndian::read_u64(take(8, "layer length")?.1);
        let len = usize::try_from(len).map_err(|_| Error::parse(at as u64 + 1, "layer length overflow"))?;
        let (at, body) = take(len, "layer latents")?;
        let mut lat = LayerLatents::default();
        match kind {
            0 if len == 0 => {}
            1 => lat.mask = Some(body.iter().map(|&b| b != 0).collect()),
            2 => {
                let sw = body.iter().enumerate().map(|(i, &b)| {
                    Switch::ALL.get(b as usize).copied().ok_or_else(|| Error::parse((at + i) as u64, format!("bad switch {b}")))
                });
                lat.switches = Some(sw.collect::<Result<_>>()?);
            }
            k => return Err(Error::parse(at as u64 - 9, format!("bad layer kind {k}"))),
        }
        layers.push(lat);
    }
    let mut classes = Vec::with_capacity(batch.min(1 << 20));
    for _ in 0..batch {
        classes.push(LittleEndian::read_u32(take(4, "class")?.1) as usize);
    }
    if pos != bytes.len() {
        return Err(Error::parse(pos as u64, format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(LatentTrace { batch, layers, classes, posterior: None })
}

pub fn write_trace<T: Real>(path: &Path, trace: &LatentTrace<T>) -> Result<()> {
    write_atomic(path, &encode_trace(trace))
}

pub fn read_trace<T: Real>(path: &Path) -> Result<LatentTrace<T>> {
    decode_trace(&fs::read(path)?)
}
