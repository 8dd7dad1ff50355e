//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DRMMCKPT" | u32 version | u32 len, arch text | u64 step
//! | u32 C, C × f64 class prior | u32 convs
//! | per conv: tensor filters, u8 has_bn [, tensor gamma, tensor beta, f32 mean × out, f32 var × out]
//! | 32-byte SHA-256 of everything before it
//! tensor = u32 rank, rank × u32 extent, f32 values
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use sha2::{Digest, Sha256};

use super::arch::{ArchitectureSpec, Layer};
use super::params::{ConvParams, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{RunningStats, Tensor};

pub const MAGIC: &[u8; 8] = b"DRMMCKPT";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Architecture, parameters and step counter of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: ArchitectureSpec,
    pub params: ModelParams<f32>,
    pub step: u64,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_len(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::contract(format!("length {v} does not fit the checkpoint format")))?;
    put_u32(out, v);
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) -> Result<()> {
    put_len(out, t.rank())?;
    for &d in t.shape() {
        put_len(out, d)?;
    }
    put_f32s(out, t.data());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::parse(self.pos as u64, format!("truncated checkpoint while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4, what)?))
    }

    fn len(&mut self, what: &str, limit: usize) -> Result<usize> {
        let at = self.pos as u64;
        let v = self.u32(what)? as usize;
        if v > limit {
            return Err(Error::parse(at, format!("{what} {v} exceeds the remaining {limit} bytes")));
        }
        Ok(v)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(LittleEndian::read_u64(self.take(8, what)?))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::parse(self.pos as u64, "length overflow"))?, what)?;
        Ok(bytes.chunks_exact(4).map(LittleEndian::read_f32).collect())
    }

    fn tensor(&mut self, what: &str) -> Result<Tensor<f32>> {
        let remaining = self.buf.len() - self.pos;
        let rank = self.len(&format!("{what} rank"), 8)?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.len(&format!("{what} extent"), remaining)?);
        }
        let at = self.pos as u64;
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).filter(|&c| c <= remaining / 4);
        let count = count.ok_or_else(|| Error::parse(at, format!("{what} shape {shape:?} exceeds the file")))?;
        let data = self.f32s(count, what)?;
        Tensor::new(shape, data).map_err(|e| Error::parse(at, e.to_string()))
    }
}

impl Checkpoint {
    pub fn new(arch: ArchitectureSpec, params: ModelParams<f32>, step: u64) -> Result<Self> {
        params.validate(&arch)?;
        Ok(Checkpoint { arch, params, step })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let arch = self.arch.to_string();
        put_len(&mut out, arch.len())?;
        out.extend_from_slice(arch.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_len(&mut out, self.params.class_prior.len())?;
        for p in &self.params.class_prior {
            out.extend_from_slice(&p.to_le_bytes());
        }
        put_len(&mut out, self.params.convs.len())?;
        for c in &self.params.convs {
            put_tensor(&mut out, &c.filters)?;
            match (&c.gamma, &c.beta, &c.running) {
                (Some(g), Some(b), Some(r)) => {
                    out.push(1);
                    put_tensor(&mut out, g)?;
                    put_tensor(&mut out, b)?;
                    put_f32s(&mut out, &r.mean);
                    put_f32s(&mut out, &r.var);
                }
                _ => out.push(0),
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
            return Err(Error::parse(bytes.len() as u64, "file too short to be a checkpoint"));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::parse(0, "not a checkpoint (bad magic)"));
        }
        let version = LittleEndian::read_u32(&bytes[8..12]);
        if version != VERSION {
            return Err(Error::parse(8, format!("checkpoint format version {version}, this build reads version {VERSION}")));
        }
        let body_len = bytes.len() - DIGEST_LEN;
        if Sha256::digest(&bytes[..body_len]).as_slice() != &bytes[body_len..] {
            return Err(Error::parse(body_len as u64, format!("checkpoint version {version} checksum mismatch (corrupted file)")));
        }
        let mut r = Reader { buf: &bytes[..body_len], pos: 12 };
        let arch_len = r.len("architecture length", body_len)?;
        let at = r.pos as u64;
        let text = std::str::from_utf8(r.take(arch_len, "architecture")?).map_err(|_| Error::parse(at, "architecture text is not UTF-8"))?;
        let arch: ArchitectureSpec = text.parse().map_err(|e| Error::parse(at, format!("architecture: {e}")))?;
        let step = r.u64("step")?;
        let classes = r.len("class count", body_len / 8)?;
        let class_prior = (0..classes).map(|_| r.u64("class prior").map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
        let at = r.pos as u64;
        let conv_count = r.len("convolution count", body_len)?;
        let conv_layers = arch.conv_layers();
        if conv_count != conv_layers.len() {
            return Err(Error::parse(at, format!("{conv_count} convolutions stored, architecture has {}", conv_layers.len())));
        }
        let mut convs = Vec::with_capacity(conv_count);
        for (k, &i) in conv_layers.iter().enumerate() {
            let filters = r.tensor(&format!("conv {k} filters"))?.with_grad();
            let at = r.pos as u64;
            let conv = match r.u8("batch-norm flag")? {
                0 => ConvParams { filters, gamma: None, beta: None, running: None },
                1 => {
                    let gamma = r.tensor(&format!("conv {k} scale"))?.with_grad();
                    let beta = r.tensor(&format!("conv {k} shift"))?.with_grad();
                    let Layer::Conv { out_channels, .. } = arch.layers()[i] else { unreachable!() };
                    let mean = r.f32s(out_channels, "running mean")?;
                    let var = r.f32s(out_channels, "running variance")?;
                    ConvParams { filters, gamma: Some(gamma), beta: Some(beta), running: Some(RunningStats { mean, var }) }
                }
                other => return Err(Error::parse(at, format!("bad batch-norm flag {other}"))),
            };
            convs.push(conv);
        }
        if r.pos != body_len {
            return Err(Error::parse(r.pos as u64, format!("{} trailing bytes", body_len - r.pos)));
        }
        let params = ModelParams { convs, class_prior };
        params.validate(&arch).map_err(|e| Error::parse(0, format!("parameters do not match the architecture: {e}")))?;
        Ok(Checkpoint { arch, params, step })
    }

    /// Writes to a temporary sibling file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

/// Write-temp-then-rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path.file_name().ok_or_else(|| Error::config(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}
